import dataclasses

import numpy as np
import pytest

from retrieval_lab.rng import RandomStream


class TestRandomStream:
    def test_same_seed_same_draws(self):
        a = RandomStream(123).generator().random(5)
        b = RandomStream(123).generator().random(5)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = RandomStream(1).generator().random(5)
        b = RandomStream(2).generator().random(5)
        assert not np.array_equal(a, b)

    def test_split_is_deterministic(self):
        a = RandomStream(9).split(4).generator().random(3)
        b = RandomStream(9).split(4).generator().random(3)
        assert np.array_equal(a, b)

    def test_splits_are_distinct_from_parent_and_siblings(self):
        root = RandomStream(9)
        draws = [root.generator().random(4)]
        for i in range(8):
            draws.append(root.split(i).generator().random(4))
        flat = [tuple(d) for d in draws]
        assert len(set(flat)) == len(flat)

    def test_nested_splits_do_not_collide(self):
        root = RandomStream(5)
        seen = set()
        for i in range(4):
            for j in range(4):
                seen.add(tuple(root.split(i).split(j).generator().random(2)))
        assert len(seen) == 16

    def test_stream_is_immutable(self):
        s = RandomStream(1)
        with pytest.raises(dataclasses.FrozenInstanceError):
            s.root_seed = 2
