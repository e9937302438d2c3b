from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdg_lab.errors import AllocationTooLarge, GridMismatch
from sdg_lab.mc_paths import PathBundle, TimeGrid, counter_normals, generate, shift_by


def test_same_seed_same_increment():
    grid = TimeGrid(0.0, 1.0, 1)
    a, b = generate(grid, 1, 1, 7), generate(grid, 1, 1, 7)
    assert a.increments.shape == (1, 1, 1)
    assert a.increments[0, 0, 0] == b.increments[0, 0, 0]


def test_increment_mean_within_clt_bound():
    grid = TimeGrid(0.0, 1.0, 100)
    inc = generate(grid, 1, 100_000, 1).increments
    assert abs(inc.mean()) < 5 * math.sqrt(grid.dt / 100_000)


def test_terminal_variance_matches_horizon():
    grid = TimeGrid(0.25, 1.0, 20)
    m = 50_000
    BT = generate(grid, 1, m, 3).brownian()[:, -1, 0]
    var = BT.var(ddof=1)
    # std error of a sample variance of a Gaussian: sigma^2 sqrt(2/(m-1))
    assert abs(var - 0.75) < 5 * 0.75 * math.sqrt(2 / (m - 1))


def test_zero_shift_is_identity():
    grid = TimeGrid(0.0, 1.0, 8)
    bundle = generate(grid, 2, 16, 5)
    assert shift_by(bundle, np.zeros(9)).same_as(bundle)


def test_linear_shift_raises_each_increment():
    grid = TimeGrid(0.0, 1.0, 2)
    bundle = generate(grid, 1, 4, 9)
    shifted = shift_by(bundle, grid.times)
    assert np.array_equal(shifted.increments, bundle.increments + 0.5)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=6), st.integers(0, 2**40))
def test_shift_round_trip_is_bit_exact(h_tail, seed):
    grid = TimeGrid(0.0, 1.0, 6)
    bundle = generate(grid, 1, 5, seed)
    h = np.concatenate([[0.0], h_tail])
    back = shift_by(shift_by(bundle, h), -h)
    assert np.array_equal(back.increments, bundle.increments)


def test_shift_must_start_at_zero_and_match_grid():
    grid = TimeGrid(0.0, 1.0, 3)
    bundle = generate(grid, 1, 2, 0)
    with pytest.raises(ValueError):
        shift_by(bundle, np.ones(4))
    with pytest.raises(GridMismatch):
        shift_by(bundle, np.zeros(3))


@given(st.integers(0, 2**63), st.integers(1, 40), st.integers(1, 40))
def test_head_equals_regenerating_fewer_paths(seed, m_small, extra):
    grid = TimeGrid(0.0, 1.0, 3)
    big = generate(grid, 2, m_small + extra, seed)
    assert big.head(m_small).same_as(generate(grid, 2, m_small, seed))


def test_counter_normals_are_per_path():
    a = counter_normals(11, np.array([0, 1, 2]), 4)
    b = counter_normals(11, np.array([2]), 4)
    assert np.array_equal(a[2], b[0])


def test_dump_load_round_trip(tmp_path):
    bundle = generate(TimeGrid(0.0, 2.0, 5), 2, 7, 123)
    bundle.dump(tmp_path / "b.bin")
    again = PathBundle.load(tmp_path / "b.bin")
    assert again.same_as(bundle) and again.seed == 123


def test_allocation_cap():
    with pytest.raises(AllocationTooLarge):
        generate(TimeGrid(0.0, 1.0, 100), 1, 1000, 0, max_elements=1000)


def test_index_of_rejects_off_grid_times():
    grid = TimeGrid(0.0, 1.0, 4)
    assert grid.index_of(0.5) == 2
    with pytest.raises(Exception):
        grid.index_of(0.3)
