"""Numerical toolkit for two-player stochastic differential games with BSDE payoffs."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .mc_paths import PathBundle, TimeGrid, generate, shift_by  # noqa: E402
from .model import CoefficientSet, ControlSpace, build_model, validate_coefficients  # noqa: E402
from .bsde_engine import evaluate_payoff, solve_bsde  # noqa: E402
from .game_values import estimate_w1, estimate_w2  # noqa: E402
from .games import GAMES, build_game  # noqa: E402

__all__ = [
    "__version__",
    "CoefficientSet",
    "ControlSpace",
    "GAMES",
    "PathBundle",
    "TimeGrid",
    "build_game",
    "build_model",
    "estimate_w1",
    "estimate_w2",
    "evaluate_payoff",
    "generate",
    "shift_by",
    "solve_bsde",
    "validate_coefficients",
]
