from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdg_lab.controls import ControlPath, constant_control, linear_strategy
from sdg_lab.errors import DeltaOutOfRange, NonFiniteState, PreconditionViolated
from sdg_lab.games import additive_diffusion_model
from sdg_lab.mc_paths import TimeGrid, generate
from sdg_lab.model import CoefficientSet, ControlSpace
from sdg_lab.sde_engine import (
    exit_time,
    pasted_state_check,
    restart_flow_check,
    simulate_closed_loop,
    simulate_forward,
)

SPACE = ControlSpace(1)


def _cs(b=0.0, sigma=0.0):
    return CoefficientSet(k=1, d=1, b=lambda t, x, u, v: b, sigma=lambda t, x, u, v: sigma,
                          f=lambda t, x, y, z, u, v: 0.0, g=lambda x: x[..., 0], gamma=10.0,
                          kappa=1.0, p=2.0, u_space=SPACE, v_space=SPACE)


def _zero_controls(grid, m):
    c = ControlPath.constant(grid, m, 0.0, SPACE)
    return c, c


def test_frozen_dynamics_keep_initial_state():
    grid = TimeGrid(0.0, 1.0, 10)
    mu, nu = _zero_controls(grid, 4)
    X = simulate_forward(_cs(), 0.3, mu, nu, generate(grid, 1, 4, 0)).values
    assert np.all(X == 0.3)


@pytest.mark.parametrize("n", [1, 3, 8, 64])
def test_constant_drift_is_exact(n):
    grid = TimeGrid(0.0, 1.0, n)
    mu, nu = _zero_controls(grid, 2)
    X = simulate_forward(_cs(b=1.0), 0.0, mu, nu, generate(grid, 1, 2, 0)).values
    assert X[0, -1, 0] == pytest.approx(1.0, abs=1e-14)


def test_second_moment_of_brownian_state():
    grid = TimeGrid(0.0, 1.0, 20)
    m = 100_000
    mu, nu = _zero_controls(grid, m)
    XT = simulate_forward(_cs(sigma=1.0), 0.0, mu, nu, generate(grid, 1, m, 4)).values[:, -1, 0]
    sq = XT**2
    assert abs(sq.mean() - 1.0) < 5 * sq.std(ddof=1) / math.sqrt(m)


def _additive_setup(seed, m=16, n=10):
    grid = TimeGrid(0.0, 1.0, n)
    rng = np.random.default_rng(seed)
    mu = ControlPath(grid, rng.uniform(-2, 2, size=(m, n)), SPACE)
    nu = ControlPath(grid, rng.uniform(-2, 2, size=(m, n)), SPACE)
    return additive_diffusion_model(), grid, mu, nu, generate(grid, 1, m, seed)


@pytest.mark.parametrize("s_idx", [0, 5, 10])
def test_restart_flow_is_exact(s_idx):
    cs, grid, mu, nu, bundle = _additive_setup(1)
    assert restart_flow_check(cs, 0.2, mu, nu, bundle, s_idx) == 0.0


def test_pasted_state_identical_controls():
    cs, grid, mu, nu, bundle = _additive_setup(2)
    assert pasted_state_check(cs, 0.0, mu, mu, nu, nu, 4, np.ones(16, bool), bundle) == (0.0, 0.0)


def test_pasted_state_controls_differ_after_tau():
    cs, grid, mu, nu, bundle = _additive_setup(3)
    A = np.arange(16) % 2 == 0
    values = mu.values.copy()
    values[~A, 5:] += 0.5
    mu_t = ControlPath(grid, values, SPACE)
    first, second = pasted_state_check(cs, 0.0, mu, mu_t, nu, nu, 5, A, bundle)
    assert first == 0.0 and second == 0.0
    X = simulate_forward(cs, 0.0, mu, nu, bundle).values
    Xt = simulate_forward(cs, 0.0, mu_t, nu, bundle).values
    assert np.all(np.abs(X[~A, -1] - Xt[~A, -1]) > 0)


def test_pasted_state_empty_tail():
    cs, grid, mu, nu, bundle = _additive_setup(4)
    mu_t = ControlPath(grid, mu.values + 0.0, SPACE)
    assert pasted_state_check(cs, 0.0, mu, mu_t, nu, nu, 10, np.zeros(16, bool), bundle) == (0.0, 0.0)


def test_pasted_state_rejects_disagreement_before_tau():
    cs, grid, mu, nu, bundle = _additive_setup(5)
    values = mu.values.copy()
    values[0, 0] += 1.0
    with pytest.raises(PreconditionViolated):
        pasted_state_check(cs, 0.0, mu, ControlPath(grid, values, SPACE), nu, nu, 3,
                           np.zeros(16, bool), bundle)


@given(st.integers(0, 2**32), st.integers(0, 10))
def test_restart_flow_property(seed, s_idx):
    cs, grid, mu, nu, bundle = _additive_setup(seed, m=4)
    assert restart_flow_check(cs, 0.1, mu, nu, bundle, s_idx) == 0.0


def test_pure_time_exit():
    grid = TimeGrid(0.0, 1.0, 50)
    mu, nu = _zero_controls(grid, 3)
    state = simulate_forward(_cs(), 0.0, mu, nu, generate(grid, 1, 3, 0))
    rec = exit_time(state, (0.0, np.zeros(1)), 0.3)
    assert np.all(rec.tau_idx == math.ceil(0.3 / grid.dt - 1e-9))
    assert not rec.exited_space.any()
    half = exit_time(state, (0.0, np.zeros(1)), grid.dt / 2)
    assert np.all(half.tau_idx == 1)


def test_fast_drift_exits_in_space_at_first_step():
    grid = TimeGrid(0.0, 1.0, 100)
    mu, nu = _zero_controls(grid, 2)
    state = simulate_forward(_cs(b=10.0), 0.0, mu, nu, generate(grid, 1, 2, 0))
    rec = exit_time(state, (0.0, np.zeros(1)), 0.1)
    assert np.all(rec.tau_idx == 1) and rec.exited_space.all()


def test_exit_radius_guard():
    grid = TimeGrid(0.0, 1.0, 10)
    mu, nu = _zero_controls(grid, 1)
    state = simulate_forward(_cs(), 0.0, mu, nu, generate(grid, 1, 1, 0))
    with pytest.raises(DeltaOutOfRange):
        exit_time(state, (0.0, np.zeros(1)), 1.0)


def test_closed_loop_matches_open_loop_replay():
    cs, grid, mu, nu, bundle = _additive_setup(6)
    beta = linear_strategy(-0.5, SPACE, 1.0)
    run = simulate_closed_loop(cs, 0.0, constant_control(0.8, SPACE), beta, bundle)
    replay = simulate_forward(cs, 0.0, run.mu, run.nu, bundle)
    assert np.array_equal(run.state.values, replay.values)
    assert np.all(run.nu.values == -0.4)


def test_non_finite_state_is_reported():
    grid = TimeGrid(0.0, 1.0, 2)
    mu, nu = _zero_controls(grid, 1)
    with pytest.raises(NonFiniteState):
        simulate_forward(_cs(b=np.inf), 0.0, mu, nu, generate(grid, 1, 1, 0))
