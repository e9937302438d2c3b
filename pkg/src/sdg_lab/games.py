"""Shipped games with their default feedback classes and closed forms.

Each ``Game`` bundles coefficients, the classes used for ``w1`` and ``w2``,
compact control grids for the PDE solver and, where one exists, the exact
value ``w(t, x)`` of the class-restricted game.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controls import (
    StrategyClass,
    constant_controls,
    constant_strategy,
    linear_strategy,
    neutralizer_strategy,
)
from .mc_paths import TimeGrid
from .model import (
    AdditiveFuncs,
    CoefficientSet,
    ControlSpace,
    build_additive,
    register_model,
    scalar_phi_from_expressions,
)


@dataclass(frozen=True, eq=False)
class Game:
    """A coefficient set with default classes.

    ``strategy_specs`` and ``control_specs`` map ``'w1'``/``'w2'`` to class
    declarations in the config format (see ``build_classes``).
    """

    name: str
    cs: CoefficientSet
    strategy_specs: dict
    control_specs: dict
    u_grid: np.ndarray
    v_grid: np.ndarray
    exact: Callable | None = None

    def classes(self, grid: TimeGrid, which: str = "w1") -> tuple:
        return build_classes(self.cs, grid, which, self.strategy_specs[which], self.control_specs[which])


def build_classes(cs: CoefficientSet, grid: TimeGrid, which: str, strategy_specs, control_specs) -> tuple:
    """``(StrategyClass, ControlClass)`` from declarations.

    Strategies: ``{"type": "neutralizer"}``, ``{"type": "constant", "value": c}``
    or ``{"type": "linear", "scale": a, "offset": c}``. Controls:
    ``{"type": "constant", "values": [...]}``. For ``w1`` strategies belong to
    player II (outputs in V) and controls to player I; ``w2`` swaps them.
    """
    if which == "w1":
        out_space, in_space, player = cs.v_space, cs.u_space, "II"
    elif which == "w2":
        out_space, in_space, player = cs.u_space, cs.v_space, "I"
    else:
        raise ValueError("which must be 'w1' or 'w2'")
    strategies = []
    for spec in strategy_specs:
        kind = spec.get("type")
        if kind == "neutralizer":
            strategies.append(neutralizer_strategy(cs, grid, player))
        elif kind == "constant":
            strategies.append(constant_strategy(spec["value"], out_space, cs.kappa))
        elif kind == "linear":
            strategies.append(linear_strategy(spec["scale"], out_space, cs.kappa,
                                              spec.get("offset", 0.0), spec.get("label")))
        else:
            raise ValueError(f"unknown strategy type {kind!r}")
    values = []
    for spec in control_specs:
        if spec.get("type") != "constant":
            raise ValueError(f"unknown control type {spec.get('type')!r}")
        values.extend(spec["values"])
    return StrategyClass(tuple(strategies)), constant_controls(values, in_space)


def _plain(b, sigma, f, g, *, gamma=1.0, kappa=1.0, psi=None, psi_tilde=None, name="custom", meta=None):
    return CoefficientSet(
        k=1, d=1, b=b, sigma=sigma, f=f, g=g, gamma=gamma, kappa=kappa, p=2.0,
        u_space=ControlSpace(1), v_space=ControlSpace(1), psi=psi, psi_tilde=psi_tilde,
        name=name, meta=meta or {},
    )


def _identity(t, u):
    return np.asarray(u, float)


def _negate(t, u):
    return -np.asarray(u, float)


def _first(x):
    return np.asarray(x, float)[..., 0]


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


@register_model("frozen")
def frozen_model(**_) -> CoefficientSet:
    """``b = sigma = f = 0``, ``g(x) = x``: the state never moves."""
    return _plain(lambda t, x, u, v: 0.0, lambda t, x, u, v: 0.0, lambda t, x, y, z, u, v: 0.0,
                  _first, psi=_identity, psi_tilde=_identity, name="frozen")


@register_model("mirror")
def mirror_model(kappa: float = 1.0, **_) -> CoefficientSet:
    """``b = u - v``, ``sigma = f = 0``, ``g(x) = x``; answering ``v = u`` freezes the state."""
    return _plain(lambda t, x, u, v: u - v, lambda t, x, u, v: 0.0, lambda t, x, y, z, u, v: 0.0,
                  _first, kappa=kappa, psi=_identity, psi_tilde=_identity, name="mirror")


@register_model("additive_diffusion")
def additive_diffusion_model(kappa: float = 1.0, **_) -> CoefficientSet:
    """``b = u + v``, ``sigma = 1``, ``f = 0``, ``g(x) = x``."""
    funcs = AdditiveFuncs(b=lambda t, x, w: w, sigma=lambda t, x, w: 1.0,
                          f=lambda t, x, y, z, w: 0.0, g=_first)
    return build_additive(1, funcs, kappa=kappa, name="additive_diffusion")


@register_model("cancellation")
def cancellation_model(kappa: float = 1.0, **_) -> CoefficientSet:
    """``b = u + v``, ``sigma = f = 0``, ``g(x) = x``."""
    funcs = AdditiveFuncs(b=lambda t, x, w: w, sigma=lambda t, x, w: 0.0,
                          f=lambda t, x, y, z, w: 0.0, g=_first)
    return build_additive(1, funcs, kappa=kappa, name="cancellation")


@register_model("heat")
def heat_model(**_) -> CoefficientSet:
    """No control influence: ``b = 0``, ``sigma = 1``, ``f = 0``, ``g(x) = x^2``."""
    return _plain(lambda t, x, u, v: 0.0, lambda t, x, u, v: 1.0, lambda t, x, y, z, u, v: 0.0,
                  lambda x: _first(x) ** 2, psi=_identity, psi_tilde=_identity, name="heat")


@register_model("linear_bsde")
def linear_bsde_model(rate: float = 1.0, terminal: float = 1.0, **_) -> CoefficientSet:
    """``b = 0``, ``sigma = 1``, ``f = -rate * y``, constant terminal value."""
    return _plain(lambda t, x, u, v: 0.0, lambda t, x, u, v: 1.0,
                  lambda t, x, y, z, u, v: -rate * y,
                  lambda x: np.full(np.shape(x)[:-1], float(terminal)),
                  gamma=max(1.0, abs(rate)), psi=_identity, psi_tilde=_identity, name="linear_bsde")


@register_model("phi_sum")
def phi_sum_model(kappa: float = 1.0, **kw) -> CoefficientSet:
    """Scalar game with ``phi(t, u, v) = u + v`` and zero base coefficients."""
    return scalar_phi_from_expressions("0", "0", "0", "u + v", kappa=kappa, name="phi_sum", **kw)


@register_model("phi_sine")
def phi_sine_model(kappa: float = 1.0, **kw) -> CoefficientSet:
    """Scalar game with ``phi(t, u, v) = v - sin(u)`` and zero base coefficients."""
    return scalar_phi_from_expressions("0", "0", "0", "v - sin(u)", kappa=kappa, name="phi_sine", **kw)


def _const(*values):
    return [{"type": "constant", "values": list(values)}]


_PM = _const(-1.0, 1.0)
_CONTROL_GRID = np.linspace(-1.0, 1.0, 21)
_NO_CONTROL = np.zeros(1)


def _game(name: str, cs: CoefficientSet, strategies: dict, controls: dict, grids, exact=None) -> Game:
    return Game(name, cs, strategies, controls, grids[0], grids[1], exact)


def build_game(name: str, **params) -> Game:
    """A shipped game by name: frozen, mirror, additive_diffusion, cancellation or heat."""
    if name == "frozen":
        cs = frozen_model(**params)
        strat = [{"type": "constant", "value": 0.0}]
        return _game(name, cs, {"w1": strat, "w2": strat}, {"w1": _PM, "w2": _PM},
                     (_CONTROL_GRID, _CONTROL_GRID), lambda t, x: np.asarray(x, float))
    if name == "mirror":
        cs = mirror_model(**params)
        strat = [{"type": "linear", "scale": 1.0, "label": "mirror"},
                 {"type": "constant", "value": -1.0}, {"type": "constant", "value": 1.0}]
        return _game(name, cs, {"w1": strat, "w2": strat}, {"w1": _PM, "w2": _PM},
                     (_CONTROL_GRID, _CONTROL_GRID), lambda t, x: np.asarray(x, float))
    if name == "additive_diffusion":
        cs = additive_diffusion_model(**params)
        strat = [{"type": "neutralizer"}, {"type": "constant", "value": 0.0}]
        return _game(name, cs, {"w1": strat, "w2": strat}, {"w1": _PM, "w2": _PM},
                     (_CONTROL_GRID, _CONTROL_GRID), lambda t, x: np.asarray(x, float))
    if name == "cancellation":
        cs = cancellation_model(**params)
        strat = [{"type": "linear", "scale": -1.0, "label": "negate"},
                 {"type": "constant", "value": 0.0}]
        return _game(name, cs, {"w1": strat, "w2": strat},
                     {"w1": _const(-1.0, 0.0, 1.0), "w2": _const(-1.0, 0.0, 1.0)},
                     (_CONTROL_GRID, _CONTROL_GRID), lambda t, x: np.asarray(x, float))
    if name == "heat":
        cs = heat_model(**params)
        strat = [{"type": "constant", "value": 0.0}]
        T = params.get("T", 1.0)
        return _game(name, cs, {"w1": strat, "w2": strat}, {"w1": _const(0.0), "w2": _const(0.0)},
                     (_NO_CONTROL, _NO_CONTROL),
                     lambda t, x: np.asarray(x, float) ** 2 + (T - np.asarray(t, float)))
    raise KeyError(name)


GAMES = ("frozen", "mirror", "additive_diffusion", "cancellation", "heat")
