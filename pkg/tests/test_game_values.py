from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdg_lab.bsde_engine import payoff_J
from sdg_lab.controls import (
    ControlClass,
    ControlPath,
    StrategyClass,
    constant_control,
    constant_controls,
    constant_strategy,
)
from sdg_lab.game_values import (
    ValueRow,
    bounds_check,
    determinism_check,
    estimate_w1,
    estimate_w2,
    holder_check,
    negate_game,
    values_to_csv,
)
from sdg_lab.games import build_game
from sdg_lab.mc_paths import TimeGrid, generate
from sdg_lab.model import AdditiveFuncs, ControlSpace, build_additive

GRID = TimeGrid(0.0, 1.0, 10)
SPACE = ControlSpace(1)


def test_singleton_classes_give_the_pair_payoff():
    game = build_game("additive_diffusion")
    bundle = generate(GRID, 1, 500, 2)
    S = StrategyClass((constant_strategy(0.5, SPACE, 1.0),))
    C = constant_controls([0.25], SPACE)
    est = estimate_w1(game.cs, 0.0, 0.1, S, C, bundle)
    mu = ControlPath.constant(GRID, 500, 0.25, SPACE)
    nu = ControlPath.constant(GRID, 500, 0.5, SPACE)
    assert est.value == payoff_J(game.cs, 0.0, 0.1, mu, nu, bundle)


def test_mirror_game_values_vanish():
    game = build_game("mirror")
    bundle = generate(GRID, 1, 20, 0)
    S, C = game.classes(GRID, "w1")
    w1 = estimate_w1(game.cs, 0.0, 0.0, S, C, bundle)
    assert w1.value == 0.0 and w1.argmin_strategy == "mirror"
    S2, C2 = game.classes(GRID, "w2")
    assert estimate_w2(game.cs, 0.0, 0.0, S2, C2, bundle).value == 0.0


def _coupled_game():
    funcs = AdditiveFuncs(b=lambda t, x, w: 0.5 * w, sigma=lambda t, x, w: 1.0 + 0.0 * w[..., :1, None],
                          f=lambda t, x, y, z, w: -0.5 * y + 0.3 * z[..., 0] + 0.2 * w[..., 0],
                          g=lambda x: np.sin(x[..., 0]))
    return build_additive(1, funcs, gamma=2.0)


def test_sign_flip_of_negated_game():
    cs = _coupled_game()
    bundle = generate(GRID, 1, 2000, 4)
    S = StrategyClass((constant_strategy(-0.5, SPACE, 1.0), constant_strategy(0.5, SPACE, 1.0)))
    C = constant_controls([-1.0, 0.0, 1.0], SPACE)
    w1 = estimate_w1(cs, 0.0, 0.3, S, C, bundle)
    w2_neg = estimate_w2(negate_game(cs), 0.0, 0.3, S, C, bundle)
    assert w2_neg.value == pytest.approx(-w1.value, abs=1e-12)


def test_identical_controls_collapse():
    cs = _coupled_game()
    bundle = generate(GRID, 1, 300, 1)
    S = StrategyClass((constant_strategy(0.2, SPACE, 1.0),))
    one = estimate_w1(cs, 0.0, 0.0, S, constant_controls([0.7], SPACE), bundle)
    many = ControlClass(tuple(constant_control(0.7, SPACE, f"c{i}") for i in range(3)))
    assert estimate_w1(cs, 0.0, 0.0, S, many, bundle).value == one.value


def _values(game, xs, which="w1", m=2000, seed=0):
    bundle = generate(GRID, 1, m, seed)
    S, C = game.classes(GRID, which)
    fn = estimate_w1 if which == "w1" else estimate_w2
    return [fn(game.cs, 0.0, x, S, C, bundle) for x in xs]


def test_zero_game_bounds():
    game = build_game("frozen")
    game = type(game)(game.name, game.cs.replace(g=lambda x: np.zeros(np.shape(x)[:-1])),
                      game.strategy_specs, game.control_specs, game.u_grid, game.v_grid)
    rep = bounds_check(_values(game, [0.0, 1.0, 2.0]), game.cs)
    assert rep.passed and np.all(rep.sizes == 0.0)


def test_quadratic_terminal_bounds():
    game = build_game("heat")
    ests = _values(game, [0.0, 1.0, 2.0], m=20_000)
    rep = bounds_check(ests, game.cs)
    assert rep.passed
    assert abs(ests[0].value) <= rep.c_kappa + 0.1 * np.max(rep.envelope)


def test_bounds_need_three_radii():
    game = build_game("frozen")
    with pytest.raises(ValueError):
        bounds_check(_values(game, [1.0, -1.0, 1.0]), game.cs)


def test_holder_equal_points_and_linear_game():
    game = build_game("additive_diffusion")
    S, C = game.classes(GRID, "w1")
    bundle = generate(GRID, 1, 1000, 3)
    pairs = [(0.0, 0.0), (0.0, 0.1), (0.0, 0.2), (0.0, 0.4), (0.0, 0.8)]
    rep = holder_check(game.cs, 0.0, pairs, S, C, bundle)
    assert rep.differences[0] == 0.0
    assert rep.passed
    assert np.allclose(rep.ratios, 1.0, atol=1e-9)


def test_holder_frozen_game_ratio_at_most_one():
    game = build_game("frozen")
    S, C = game.classes(GRID, "w1")
    bundle = generate(GRID, 1, 10, 0)
    rep = holder_check(game.cs, 0.0, [(0.0, 0.05), (0.0, 0.1), (0.3, 0.5), (-1.0, 1.0)], S, C, bundle)
    assert rep.passed and rep.constant <= 1.0 + 1e-12


def test_determinism_deterministic_game():
    game = build_game("mirror")
    S, C = game.classes(GRID, "w1")
    rep = determinism_check(game.cs, 0.3, 0.4, S, C, GRID, 50, [1, 2, 3])
    assert rep.spread == 0.0 and rep.shift_invariant and rep.passed


def test_determinism_heat_game_across_seeds():
    game = build_game("heat")
    S, C = game.classes(GRID, "w1")
    rep = determinism_check(game.cs, 0.0, 0.0, S, C, GRID, 100_000, [11, 12, 13])
    assert rep.passed, (rep.spread, rep.pooled_std_err)


@given(st.floats(-2, 2), st.integers(0, 2**20))
def test_threads_do_not_change_values(x, seed):
    game = build_game("cancellation")
    S, C = game.classes(GRID, "w1")
    bundle = generate(GRID, 1, 50, seed)
    a = estimate_w1(game.cs, 0.0, x, S, C, bundle)
    b = estimate_w1(game.cs, 0.0, x, S, C, bundle, threads=3)
    assert a.value == b.value and np.array_equal(a.payoffs, b.payoffs)


def test_value_csv_layout():
    game = build_game("frozen")
    rows = [ValueRow(e) for e in _values(game, [0.0, 0.5, 1.0], m=5)]
    text = values_to_csv(rows, "# seed=0")
    lines = text.splitlines()
    assert lines[0] == "# seed=0" and lines[1].startswith("t0,x,value_w1")
    assert len(lines) == 5
