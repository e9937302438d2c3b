"""Euler-Maruyama simulation of the controlled state, pathwise identities, exits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import (
    ControlPath,
    FeedbackControl,
    FeedbackStrategy,
    check_growth,
)
from .errors import DeltaOutOfRange, GridMismatch, NonFiniteState, PreconditionViolated
from .mc_paths import PathBundle, TimeGrid
from .model import CoefficientSet


@dataclass(frozen=True, eq=False)
class StatePaths:
    """Simulated states ``values[i, k]`` at grid node ``k`` (shape ``m x (n+1) x k``).

    Nodes before ``start_idx`` repeat the initial state.
    """

    grid: TimeGrid
    values: np.ndarray
    initial: np.ndarray
    start_idx: int = 0

    @property
    def m_paths(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class ExitRecord:
    tau_idx: np.ndarray
    exited_space: np.ndarray


def _initial(initial, m: int, k: int) -> np.ndarray:
    x0 = np.asarray(initial, float)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    return np.broadcast_to(x0, (m, k)).copy()


def _step(cs: CoefficientSet, t: float, dt: float, x, u, v, dB) -> np.ndarray:
    drift = cs.eval_b(t, x, u, v)
    vol = cs.eval_sigma(t, x, u, v)
    return x + drift * dt + np.einsum("mij,mj->mi", vol, dB)


def _check_finite(x: np.ndarray, k: int) -> None:
    if not np.all(np.isfinite(x)):
        i = int(np.argmax(~np.isfinite(x).all(axis=-1)))
        raise NonFiniteState(f"state not finite on path {i} at step {k}", {"path": i, "step": k})


def simulate_forward(cs: CoefficientSet, initial, mu: ControlPath, nu: ControlPath,
                     bundle: PathBundle, start_idx: int = 0) -> StatePaths:
    """Euler-Maruyama with open-loop control paths, starting at grid node ``start_idx``."""
    grid = bundle.grid
    m = bundle.m_paths
    if mu.grid != grid or nu.grid != grid or mu.m_paths != m or nu.m_paths != m:
        raise GridMismatch("controls and bundle disagree")
    if bundle.d != cs.d:
        raise GridMismatch(f"bundle has d={bundle.d}, coefficients need d={cs.d}")
    x0 = _initial(initial, m, cs.k)
    X = np.empty((m, grid.n_steps + 1, cs.k))
    X[:, : start_idx + 1] = x0[:, None, :]
    times, dt, inc = grid.times, grid.dt, bundle.increments
    for k in range(start_idx, grid.n_steps):
        X[:, k + 1] = _step(cs, times[k], dt, X[:, k], mu.values[:, k], nu.values[:, k], inc[:, k])
        _check_finite(X[:, k + 1], k + 1)
    X.flags.writeable = False
    return StatePaths(grid, X, x0, start_idx)


@dataclass(frozen=True, eq=False)
class ClosedLoopRun:
    state: StatePaths
    mu: ControlPath
    nu: ControlPath


def simulate_closed_loop(cs: CoefficientSet, initial, control: FeedbackControl,
                         strategy: FeedbackStrategy, bundle: PathBundle,
                         start_idx: int = 0, priority: str = "II") -> ClosedLoopRun:
    """Jointly simulate the state and both players' actions.

    ``priority='II'`` (value ``w1``): player I plays the feedback control in U
    and player II answers with the strategy, ``v_k = beta(k, X_k, u_k)``.
    ``priority='I'`` (value ``w2``): player II plays the control in V and
    player I answers, ``u_k = alpha(k, X_k, v_k)``.
    """
    grid = bundle.grid
    m, n = bundle.m_paths, grid.n_steps
    if priority == "II":
        in_space, out_space = cs.u_space, cs.v_space
    elif priority == "I":
        in_space, out_space = cs.v_space, cs.u_space
    else:
        raise ValueError("priority must be 'I' or 'II'")
    if control.space.dim != in_space.dim or strategy.space.dim != out_space.dim:
        raise GridMismatch("control/strategy dimensions do not match the game")
    x0 = _initial(initial, m, cs.k)
    X = np.empty((m, n + 1, cs.k))
    X[:, : start_idx + 1] = x0[:, None, :]
    a_in = np.broadcast_to(in_space.base_point, (m, n, in_space.dim)).copy()
    a_out = np.broadcast_to(out_space.base_point, (m, n, out_space.dim)).copy()
    times, dt, inc = grid.times, grid.dt, bundle.increments
    for k in range(start_idx, n):
        xk = X[:, k]
        a_in[:, k] = control(k, xk)
        a_out[:, k] = strategy(k, xk, a_in[:, k])
        if priority == "II":
            u, v = a_in[:, k], a_out[:, k]
        else:
            u, v = a_out[:, k], a_in[:, k]
        X[:, k + 1] = _step(cs, times[k], dt, xk, u, v, inc[:, k])
        _check_finite(X[:, k + 1], k + 1)
    check_growth(strategy, a_in[:, start_idx:], a_out[:, start_idx:], in_space)
    X.flags.writeable = False
    state = StatePaths(grid, X, x0, start_idx)
    cin = ControlPath(grid, a_in, control.space)
    cout = ControlPath(grid, a_out, strategy.space)
    return ClosedLoopRun(state, cin, cout) if priority == "II" else ClosedLoopRun(state, cout, cin)


def restart_flow_check(cs: CoefficientSet, x, mu: ControlPath, nu: ControlPath,
                       bundle: PathBundle, s_idx: int) -> float:
    """Max ``|X - X_restart|`` after restarting from ``(t_s, X_s)`` on the same noise."""
    if not 0 <= s_idx <= bundle.grid.n_steps:
        raise ValueError("s_idx out of range")
    full = simulate_forward(cs, x, mu, nu, bundle)
    again = simulate_forward(cs, full.values[:, s_idx], mu, nu, bundle, start_idx=s_idx)
    return float(np.max(np.abs(full.values[:, s_idx:] - again.values[:, s_idx:])))


def pasted_state_check(cs: CoefficientSet, x, mu: ControlPath, mu_tilde: ControlPath,
                       nu: ControlPath, nu_tilde: ControlPath, tau_idx, mask_A,
                       bundle: PathBundle) -> tuple[float, float]:
    """Pasting identity for states driven by controls that agree before tau (and after on A).

    Returns:
        ``(max |X - X~| over k <= tau on all paths, max |X - X~| over all k on A)``.

    Raises:
        PreconditionViolated: the controls differ where they must agree.
    """
    m, n = bundle.m_paths, bundle.grid.n_steps
    tau = np.broadcast_to(np.asarray(tau_idx, int), (m,))
    A = np.broadcast_to(np.asarray(mask_A, bool), (m,))
    must_agree = (np.arange(n)[None, :] < tau[:, None]) | A[:, None]
    for a, b, name in ((mu, mu_tilde, "mu"), (nu, nu_tilde, "nu")):
        differ = np.any(a.values != b.values, axis=-1)
        if np.any(differ & must_agree):
            i, k = (int(v) for v in np.argwhere(differ & must_agree)[0])
            raise PreconditionViolated(f"{name} differs at path {i}, step {k} inside the agreement region")
    X = simulate_forward(cs, x, mu, nu, bundle).values
    Xt = simulate_forward(cs, x, mu_tilde, nu_tilde, bundle).values
    diff = np.max(np.abs(X - Xt), axis=-1)
    upto_tau = np.arange(n + 1)[None, :] <= tau[:, None]
    first = float(np.max(np.where(upto_tau, diff, 0.0)))
    second = float(np.max(diff[A])) if A.any() else 0.0
    return first, second


def exit_time(paths: StatePaths, center: tuple, delta: float) -> ExitRecord:
    """First node ``k > start`` with ``(t_k, X_k)`` outside the ball ``O_delta(t0, x)``.

    The ball lives in ``(t, x)`` space, so the time coordinate alone forces
    an exit before ``T`` whenever ``delta < T - t0``.
    """
    t0, x = center
    grid = paths.grid
    if not 0 < delta < grid.T - t0:
        raise DeltaOutOfRange(f"delta={delta} outside (0, {grid.T - t0})")
    x = np.asarray(x, float).reshape(1, 1, -1)
    times = grid.times
    s = paths.start_idx
    dist = np.sqrt((times[None, s + 1:] - t0) ** 2
                   + np.sum((paths.values[:, s + 1:] - x) ** 2, axis=-1))
    out = dist >= delta * (1 - 1e-12)
    # the last node is always an exit (T - t0 > delta); guard anyway
    out[:, -1] = True
    first = np.argmax(out, axis=1)
    tau = s + 1 + first
    # exits that happen before the time coordinate alone leaves the ball
    exited_space = times[tau] - t0 < delta * (1 - 1e-12)
    return ExitRecord(tau.astype(int), exited_space)
