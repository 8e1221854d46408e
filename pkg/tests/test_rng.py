"""Determinism and substream independence of the random streams."""
import numpy as np
import pytest

from afa.rng import Rng


def test_same_seed_same_sequence():
    a = Rng(42).normal(0, 1, (10,))
    b = Rng(42).normal(0, 1, (10,))
    np.testing.assert_array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Rng(1).normal(0, 1, (8,)), Rng(2).normal(0, 1, (8,)))


def test_substreams_are_order_independent():
    r1 = Rng(7)
    init_first = r1.substream("init").normal(0, 1, (4,))
    episodes_first = Rng(7)
    episodes_first.substream("episode", 3).integers(0, 100, (5,))
    init_second = episodes_first.substream("init").normal(0, 1, (4,))
    np.testing.assert_array_equal(init_first, init_second)


def test_substream_labels_distinguish():
    r = Rng(9)
    a = r.substream("a").normal(0, 1, (6,))
    b = r.substream("b").normal(0, 1, (6,))
    assert not np.array_equal(a, b)


def test_nested_paths_are_stable():
    a = Rng(11).substream("data", 2, "noise").uniform(0, 1, (3,))
    b = Rng(11).substream("data", 2, "noise").uniform(0, 1, (3,))
    np.testing.assert_array_equal(a, b)


def test_parent_draws_do_not_shift_children():
    r = Rng(5)
    r.normal(0, 1, (100,))
    after = r.substream("x").normal(0, 1, (3,))
    fresh = Rng(5).substream("x").normal(0, 1, (3,))
    np.testing.assert_array_equal(after, fresh)


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        Rng(0).substream(-1)
    with pytest.raises(TypeError):
        Rng(0).substream(3.5)
