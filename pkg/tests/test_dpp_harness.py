from __future__ import annotations

import numpy as np
import pytest

from sdg_lab.controls import StrategyClass, constant_controls, constant_strategy
from sdg_lab.dpp_harness import (
    ValueGrid,
    build_sandwich,
    check_dpp_w1,
    check_dpp_w2,
    estimate_value_grid,
)
from sdg_lab.errors import DeltaOutOfRange, GridTooCoarse
from sdg_lab.games import build_game
from sdg_lab.mc_paths import TimeGrid, generate
from sdg_lab.model import ControlSpace

GRID = TimeGrid(0.0, 1.0, 50)
SPACE = ControlSpace(1)
TIMES = GRID.times[[0, 6, 12, 18]]
AXIS = np.linspace(-1.5, 1.5, 13)


def _identity_grid(std_err=0.0):
    return ValueGrid.from_function(lambda t, x: x[:, 0], TIMES, [AXIS], std_err)


def test_constant_sandwich():
    vg = ValueGrid.from_function(lambda t, x: np.full(len(t), 2.0), TIMES, [AXIS])
    phi, phi_t = build_sandwich(vg, 0.05)
    t, x = np.array([0.1, 0.2]), np.array([[0.3], [-1.0]])
    assert np.allclose(phi(t, x), 1.95) and np.allclose(phi_t(t, x), 2.05)


def test_zero_epsilon_is_rejected():
    with pytest.raises(ValueError):
        build_sandwich(_identity_grid(), 0.0)


def test_epsilon_below_grid_noise_is_rejected():
    with pytest.raises(ValueError):
        build_sandwich(_identity_grid(std_err=0.1), 0.2)


def test_linear_sandwich_is_exact():
    phi, _ = build_sandwich(_identity_grid(), 0.1)
    assert phi(np.array([0.2]), np.array([[0.5]]))[0] == pytest.approx(0.4, abs=1e-15)


def test_points_outside_the_grid_raise():
    with pytest.raises(GridTooCoarse):
        _identity_grid()(np.array([0.0]), np.array([[3.0]]))


def test_singleton_markov_bracket_has_width_two_eps():
    game = build_game("additive_diffusion")
    S = StrategyClass((constant_strategy(0.0, SPACE, 1.0),))
    C = constant_controls([0.0], SPACE)
    bundle = generate(GRID, 1, 20_000, 5)
    rep = check_dpp_w1(game.cs, 0.0, 0.0, 0.3, S, C, _identity_grid(), 0.05, bundle)
    assert rep.upper - rep.lower == pytest.approx(0.1, abs=1e-12)
    assert rep.passed and rep.eps_monotone
    assert rep.per_pair[0].post_tau_abs_z == 0.0


def test_frozen_bracket_reduces_to_the_sandwich():
    game = build_game("frozen")
    S, C = game.classes(GRID, "w1")
    vg = ValueGrid.from_function(lambda t, x: x[:, 0], TIMES, [AXIS])
    rep = check_dpp_w1(game.cs, 0.0, 0.4, 0.3, S, C, vg, 0.05, generate(GRID, 1, 10, 0))
    assert rep.lower == pytest.approx(0.35, abs=1e-12) and rep.upper == pytest.approx(0.45, abs=1e-12)
    assert rep.passed


@pytest.mark.parametrize("which", ["w1", "w2"])
def test_mirror_game_pipeline(which):
    game = build_game("mirror")
    S, C = game.classes(GRID, which)
    vg = estimate_value_grid(game.cs, which, S, C, GRID, 200, 1, TIMES, [np.linspace(-1.2, 1.2, 9)])
    check = check_dpp_w1 if which == "w1" else check_dpp_w2
    rep = check(game.cs, 0.0, 0.0, 0.3, S, C, vg, 0.05, generate(GRID, 1, 2000, 2))
    assert rep.passed, rep.to_dict()
    assert rep.to_dict()["pass"] is True


def test_delta_range_guard():
    game = build_game("frozen")
    S, C = game.classes(GRID, "w1")
    with pytest.raises(DeltaOutOfRange):
        check_dpp_w1(game.cs, 0.0, 0.0, 1.0, S, C, _identity_grid(), 0.05, generate(GRID, 1, 5, 0))
