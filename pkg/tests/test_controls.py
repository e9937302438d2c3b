from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import sine_root, sine_root_grid
from sdg_lab.controls import (
    ControlPath,
    attach_neutralizers,
    constant_strategy,
    construct_neutralizer,
    evaluate_strategy,
    linear_strategy,
    neutralizer_strategy,
    paste_by_partition,
    paste_controls,
    zero_set_min,
)
from sdg_lab.errors import GrowthViolated, MissingNeutralizer, NotAPartition
from sdg_lab.games import additive_diffusion_model, frozen_model
from sdg_lab.mc_paths import TimeGrid, generate
from sdg_lab.model import ControlSpace, scalar_phi_from_expressions
from sdg_lab.sde_engine import simulate_forward

GRID = TimeGrid(0.0, 1.0, 4)
SPACE = ControlSpace(1)


def _path(values):
    return ControlPath(GRID, np.asarray(values, float), SPACE)


def _const(m, value):
    return ControlPath.constant(GRID, m, value, SPACE)


def test_paste_identical_is_identity():
    mu = _path(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(paste_controls(mu, mu, [1, 2, 3]).values, mu.values)


def test_paste_at_zero_returns_second():
    mu1, mu2 = _const(3, 1.0), _path(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(paste_controls(mu1, mu2, 0).values, mu2.values)


def test_paste_switches_at_tau():
    out = paste_controls(_const(2, 0.5), _const(2, -0.5), 2)
    assert out.values[:, :, 0].tolist() == [[0.5, 0.5, -0.5, -0.5]] * 2


def test_partition_single_full_mask():
    mu = _path(np.arange(8.0).reshape(2, 4))
    assert np.array_equal(paste_by_partition([(np.ones(2, bool), mu)]).values, mu.values)


def test_partition_even_split():
    mask = np.array([True, False, True, False])
    out = paste_by_partition([(mask, _const(4, 1.0)), (~mask, _const(4, 2.0))])
    assert out.values[:, 0, 0].tolist() == [1.0, 2.0, 1.0, 2.0]


@given(st.lists(st.integers(0, 2), min_size=6, max_size=30), st.integers(0, 2**32))
def test_partition_round_trip(owner, seed):
    owner = np.array(owner)
    rng = np.random.default_rng(seed)
    items = [(owner == j, _path(rng.normal(size=(len(owner), 4)))) for j in range(3)]
    combined = paste_by_partition(items)
    for mask, cp in items:
        assert np.array_equal(combined.values[mask], cp.values[mask])


def test_partition_rejects_overlap_and_gaps():
    a = np.array([True, True, False])
    with pytest.raises(NotAPartition) as info:
        paste_by_partition([(a, _const(3, 0.0)), (np.array([False, True, True]), _const(3, 1.0))])
    assert info.value.path_index == 1
    with pytest.raises(NotAPartition):
        paste_by_partition([(a, _const(3, 0.0))])


def test_additive_neutralizer_answers_minus_u():
    cs = additive_diffusion_model()
    beta = neutralizer_strategy(cs, GRID)
    x = np.zeros((2, 1))
    out = beta(0, x, np.array([[3.0], [0.0]]))
    assert out[:, 0].tolist() == [-3.0, 0.0]


def test_missing_neutralizer_is_reported():
    with pytest.raises(MissingNeutralizer):
        neutralizer_strategy(frozen_model().replace(psi=None), GRID)


def test_sine_neutralizer_unique_zero():
    cs = attach_neutralizers(scalar_phi_from_expressions("0", "0", "0", "v - sin(u)"), n_levels=12)
    v = cs.psi(0.3, np.array([[2.0]]))[0, 0]
    assert abs(v - sine_root(2.0)) < 2.0**-10
    phi = cs.meta["phi"]
    assert zero_set_min(phi, 1.0, 0.0, 2.0)[0] == pytest.approx(sine_root(2.0), abs=1e-9)


def test_sum_phi_neutralizer_converges_to_minus_u():
    psi = construct_neutralizer(lambda t, u, v: u + v, 1.0, 12)
    assert abs(psi(0.0, 0.5) + 0.5) < 2.0**-10
    errors = np.abs(psi.level_values(0.0, 0.5)[:, 0] + 0.5)
    assert errors[-1] < errors[0]


@given(st.floats(0, 1), st.floats(-3, 3))
def test_sum_phi_levels_never_exceed_the_zero_set(t, u):
    psi = construct_neutralizer(lambda t, u, v: u + v, 1.0, 12)
    levels = psi.level_values(t, u)[:, 0]
    assert np.all(levels <= -u + 1e-12)
    assert -u - levels[-1] < 2.0**-10


def test_u_free_phi_gives_zero_at_every_level():
    psi = construct_neutralizer(lambda t, u, v: v + 0.0 * u, 1.0, 6)
    levels = psi.level_values(np.linspace(0, 1, 7), np.linspace(-2, 2, 7))
    assert np.all(levels == 0.0)


def test_sine_neutralizer_matches_grid_root_at_one():
    psi = construct_neutralizer(lambda t, u, v: v - np.sin(u), 1.0, 12)
    assert abs(psi(0.5, 1.0) - sine_root_grid(1.0)) < 2.0**-10


def test_constant_strategy_gives_constant_path():
    cs = additive_diffusion_model()
    bundle = generate(GRID, 1, 5, 0)
    mu = _path(np.random.default_rng(0).uniform(-1, 1, size=(5, 4)))
    state = simulate_forward(cs, 0.0, mu, mu, bundle)
    nu = evaluate_strategy(constant_strategy(0.7, SPACE, 1.0), mu, state)
    assert np.all(nu.values == 0.7)


def test_negating_strategy_on_constant_control():
    cs = additive_diffusion_model(kappa=1.0)
    bundle = generate(GRID, 1, 3, 0)
    mu = _const(3, 2.0)
    state = simulate_forward(cs, 0.0, mu, mu, bundle)
    nu = evaluate_strategy(linear_strategy(-1.0, SPACE, 1.0), mu, state)
    assert np.all(nu.values == -2.0)


@given(st.integers(1, 3), st.integers(0, 2**32))
def test_strategy_is_non_anticipative(k0, seed):
    rng = np.random.default_rng(seed)
    cs = additive_diffusion_model()
    bundle = generate(GRID, 1, 6, seed)
    a = rng.uniform(-1, 1, size=(6, 4))
    b = a.copy()
    b[:3, k0:] = rng.uniform(-1, 1, size=(3, 4 - k0))
    mu_a, mu_b = _path(a), _path(b)
    beta = linear_strategy(0.5, SPACE, 1.0, offset=0.1)
    nu_a = evaluate_strategy(beta, mu_a, simulate_forward(cs, 0.0, mu_a, mu_a, bundle))
    nu_b = evaluate_strategy(beta, mu_b, simulate_forward(cs, 0.0, mu_b, mu_b, bundle))
    assert np.array_equal(nu_a.values[:3, :k0], nu_b.values[:3, :k0])


def test_constant_strategy_outside_kappa_ball_is_rejected():
    with pytest.raises(GrowthViolated):
        constant_strategy(2.0, SPACE, 1.0)
