from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import LINEAR_BSDE_Y0
from sdg_lab.bsde_engine import (
    Projector,
    basis_features,
    comparison_check,
    evaluate_payoff,
    initial_stability,
    semigroup_check,
    solve_bsde,
    terminal_stability,
)
from sdg_lab.controls import ControlPath
from sdg_lab.errors import PreconditionViolated
from sdg_lab.games import additive_diffusion_model, cancellation_model, heat_model, linear_bsde_model
from sdg_lab.mc_paths import TimeGrid, generate
from sdg_lab.model import CoefficientSet, ControlSpace
from sdg_lab.sde_engine import simulate_forward

SPACE = ControlSpace(1)


def _brownian_cs(f=lambda t, x, y, z, u, v: 0.0, g=lambda x: x[..., 0], gamma=1.0):
    return CoefficientSet(k=1, d=1, b=lambda t, x, u, v: 0.0, sigma=lambda t, x, u, v: 1.0, f=f, g=g,
                          gamma=gamma, kappa=1.0, p=2.0, u_space=SPACE, v_space=SPACE)


def _setup(cs, n=20, m=4000, seed=0, t0=0.0, x=0.0, T=1.0):
    grid = TimeGrid(0.0, T, n)
    bundle = generate(grid, 1, m, seed)
    mu = ControlPath.constant(grid, m, 0.0, SPACE)
    state = simulate_forward(cs, x, mu, mu, bundle, start_idx=grid.index_of(t0))
    return grid, bundle, mu, state


def test_constant_terminal_is_reproduced():
    cs = _brownian_cs()
    grid, bundle, mu, state = _setup(cs)
    sol = solve_bsde(cs, state, mu, mu, np.full(state.m_paths, 2.5), None, bundle)
    assert np.allclose(sol.Y, 2.5, atol=1e-12)
    assert np.max(np.abs(sol.Z)) < 1e-10


def test_unit_generator_integrates_time():
    cs = _brownian_cs(f=lambda t, x, y, z, u, v: 1.0)
    grid, bundle, mu, state = _setup(cs, t0=0.25)
    sol = solve_bsde(cs, state, mu, mu, np.zeros(state.m_paths), grid.n_steps, bundle)
    assert sol.y0 == pytest.approx(0.75, abs=1e-12)


def test_linear_generator_small_sample():
    cs = linear_bsde_model()
    grid, bundle, mu, state = _setup(cs, n=50, m=20_000, seed=3)
    sol = solve_bsde(cs, state, mu, mu, np.ones(state.m_paths), None, bundle)
    assert abs(sol.y0 - LINEAR_BSDE_Y0) / LINEAR_BSDE_Y0 < 0.02


def test_martingale_representation_of_brownian_terminal():
    cs = _brownian_cs()
    grid, bundle, mu, state = _setup(cs, n=20, m=100_000, seed=5)
    sol = solve_bsde(cs, state, mu, mu, state.values[:, -1, 0], None, bundle)
    assert np.mean(np.abs(sol.Z[..., 0] - 1.0)) < 0.05


def test_constant_payoff():
    cs = _brownian_cs(g=lambda x: np.full(np.shape(x)[:-1], 5.0))
    grid, bundle, mu, _ = _setup(cs, m=100)
    assert evaluate_payoff(cs, 0.0, 0.3, mu, mu, bundle).value == pytest.approx(5.0, abs=1e-12)


def test_neutralized_deterministic_payoff_is_zero():
    cs = cancellation_model()
    grid = TimeGrid(0.0, 1.0, 10)
    bundle = generate(grid, 1, 50, 0)
    mu = ControlPath.constant(grid, 50, 1.0, SPACE)
    nu = ControlPath.constant(grid, 50, -1.0, SPACE)
    assert evaluate_payoff(cs, 0.0, 0.0, mu, nu, bundle).value == 0.0


def test_squared_brownian_payoff():
    cs = heat_model()
    grid, bundle, mu, _ = _setup(cs, m=40_000, seed=8)
    est = evaluate_payoff(cs, 0.0, 0.0, mu, mu, bundle)
    assert abs(est.value - 1.0) < 3 * est.std_err


@pytest.mark.parametrize("zeta", [0, 10, 20])
def test_semigroup_under_projection_reuse(zeta):
    cs = linear_bsde_model()
    grid, bundle, mu, _ = _setup(cs, n=20, m=2000, seed=1)
    assert semigroup_check(cs, 0.0, 0.0, mu, mu, bundle, zeta) == 0.0


@given(st.integers(0, 2**32), st.integers(0, 12))
def test_semigroup_property_on_additive_game(seed, zeta):
    cs = additive_diffusion_model()
    grid = TimeGrid(0.0, 1.0, 12)
    rng = np.random.default_rng(seed)
    bundle = generate(grid, 1, 300, seed)
    mu = ControlPath(grid, rng.uniform(-1, 1, size=(300, 12)), SPACE)
    assert semigroup_check(cs, 0.0, 0.2, mu, mu, bundle, zeta) == 0.0


def test_comparison_linear_terminal_gap():
    cs = linear_bsde_model()
    grid, bundle, mu, state = _setup(cs, m=3000, seed=2)
    eta2 = np.sin(state.values[:, -1, 0])
    res = comparison_check(cs, state, mu, mu, (eta2 - 1.0, None), (eta2, None), bundle)
    assert res.violations == 0
    y1 = solve_bsde(cs, state, mu, mu, eta2 - 1.0, None, bundle).y0
    y2 = solve_bsde(cs, state, mu, mu, eta2, None, bundle).y0
    # explicit scheme on a constant gap: discrete discount (1 - dt)^N
    assert y2 - y1 == pytest.approx((1 - grid.dt) ** grid.n_steps, abs=1e-10)


def test_comparison_identical_inputs():
    cs = linear_bsde_model()
    grid, bundle, mu, state = _setup(cs, m=1000)
    eta = np.cos(state.values[:, -1, 0])
    res = comparison_check(cs, state, mu, mu, (eta, None), (eta, None), bundle, tol=0.0)
    assert res.violations == 0 and res.max_excess == 0.0


def test_comparison_generator_shift():
    cs = _brownian_cs()
    grid, bundle, mu, state = _setup(cs, m=1000, t0=0.5)
    eta = state.values[:, -1, 0]
    f2 = lambda t, x, y, z, u, v: np.sin(t) + 0.0 * y  # noqa: E731
    f1 = lambda t, x, y, z, u, v: np.sin(t) - 1.0 + 0.0 * y  # noqa: E731
    y1 = solve_bsde(cs, state, mu, mu, eta, None, bundle, generator=f1).y0
    y2 = solve_bsde(cs, state, mu, mu, eta, None, bundle, generator=f2).y0
    assert y1 == pytest.approx(y2 - 0.5, abs=1e-12)
    assert comparison_check(cs, state, mu, mu, (eta, f1), (eta, f2), bundle).violations == 0


def test_terminal_stability_zero_perturbation():
    cs = linear_bsde_model()
    grid, bundle, mu, state = _setup(cs, m=1000)
    eta = state.values[:, -1, 0]
    rep = terminal_stability(cs, state, mu, mu, eta, np.ones_like(eta), [0.0, 0.1], bundle)
    assert rep.numerators[0] == 0.0


def test_initial_stability_zero_perturbation_and_ladder():
    cs = additive_diffusion_model()
    grid, bundle, mu, _ = _setup(cs, m=2000)
    rep = initial_stability(cs, 0.0, 0.0, 1.0, [0.0, 0.1, 0.2, 0.4, 0.8], mu, mu, bundle)
    assert rep.numerators[0] == 0.0
    ratios = np.array(rep.ratios[1:])
    assert np.allclose(ratios, ratios[0], rtol=1e-6)


def test_projector_reproduces_span(rng):
    X = rng.normal(size=(500, 1))
    F = basis_features(X, 3)
    proj = Projector(F)
    y = 1.0 + 2 * X[:, 0] - X[:, 0] ** 3
    assert np.allclose(proj(y), y, atol=1e-9)


def test_rank_deficient_design_falls_back_to_ridge():
    X = np.zeros((50, 1))
    X[:25] = 1.0
    F = np.column_stack([X[:, 0], 2 * X[:, 0]])
    proj = Projector(F)
    y = X[:, 0] * 3.0
    assert np.allclose(proj(y), y, atol=1e-6)


def test_step_size_guard():
    cs = linear_bsde_model(rate=30.0)
    grid, bundle, mu, state = _setup(cs, n=10, m=100)
    with pytest.raises((PreconditionViolated, ValueError)):
        solve_bsde(cs, state, mu, mu, np.ones(100), None, bundle)


@pytest.mark.slow
def test_linear_generator_error_shrinks_with_finer_grid():
    cs = linear_bsde_model()
    better = 0
    for seed in range(5):
        errs = []
        for n in (50, 100):
            grid, bundle, mu, state = _setup(cs, n=n, m=100_000, seed=seed)
            sol = solve_bsde(cs, state, mu, mu, np.ones(state.m_paths), None, bundle)
            errs.append(abs(sol.y0 - LINEAR_BSDE_Y0))
        better += errs[1] < errs[0]
    assert better >= 3
