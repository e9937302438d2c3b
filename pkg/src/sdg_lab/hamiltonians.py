"""Pointwise Hamiltonian and its four envelope versions on finite samples.

Limits over shrinking neighbourhoods are replaced by extrema over nested
sample sets: the level-``n`` sample of the ``1/n``-ball around ``Xi`` is

    S_n = {Xi} U (Xi + D/n) U (Xi + D/(n+1)) U ... U (Xi + D/n_max)

for a fixed set ``D`` of quasi-random directions in the unit ball. Since
``S_{n+1}`` is contained in ``S_n`` and the truncated response sets grow with
``n``, the level sequences are monotone exactly, not just up to sampling
error. The same nesting is used for the perturbed control ``u'`` (``v'``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .errors import EmptyGrid
from .model import CoefficientSet, ControlSpace

KINDS = ("H1_lower", "H1_upper", "H2_lower", "H2_upper")
GAUGE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class HamPoint:
    """The point ``Xi = (t, x, y, z, Gamma)`` with ``Gamma`` symmetric ``k x k``."""

    t: float
    x: np.ndarray
    y: float
    z: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, float))
        z = np.atleast_1d(np.asarray(self.z, float))
        G = np.atleast_2d(np.asarray(self.Gamma, float))
        k = len(x)
        if z.shape != (k,) or G.shape != (k, k):
            raise ValueError(f"z and Gamma must match k={k}")
        if not np.allclose(G, G.T, rtol=0, atol=1e-12):
            raise ValueError("Gamma must be symmetric")
        vals = np.concatenate([[self.t, self.y], x, z, G.ravel()])
        if not np.all(np.isfinite(vals)):
            raise ValueError("HamPoint entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "Gamma", G)

    @property
    def k(self) -> int:
        return len(self.x)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.t], self.x, [self.y], self.z, self.Gamma.ravel()])


def _unpack(vecs: np.ndarray, k: int):
    t = vecs[..., 0]
    x = vecs[..., 1:1 + k]
    y = vecs[..., 1 + k]
    z = vecs[..., 2 + k:2 + 2 * k]
    G = vecs[..., 2 + 2 * k:].reshape(vecs.shape[:-1] + (k, k))
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    return t, x, y, z, G


def hamiltonian_batch(cs: CoefficientSet, t, x, y, z, Gamma, u, v) -> np.ndarray:
    """Vectorised ``H``; every argument carries the same leading batch shape."""
    b = cs.eval_b(t, x, u, v)
    s = cs.eval_sigma(t, x, u, v)
    a = np.einsum("...id,...jd->...ij", s, s)
    trace = np.einsum("...ij,...ji->...", a, Gamma)
    zs = np.einsum("...i,...id->...d", z, s)
    f = cs.eval_f(t, x, y, zs, u, v)
    return 0.5 * trace + np.einsum("...i,...i->...", z, b) + f


def hamiltonian(cs: CoefficientSet, xi: HamPoint, u, v) -> float:
    """``H = 1/2 tr(sigma sigma^T Gamma) + z . b + f(t, x, y, z sigma, u, v)``."""
    u = np.atleast_1d(np.asarray(u, float))
    v = np.atleast_1d(np.asarray(v, float))
    return float(hamiltonian_batch(cs, xi.t, xi.x, np.asarray(xi.y, float), xi.z, xi.Gamma, u, v))


# ---------------------------------------------------------------------------
# truncated response sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TruncatedSet:
    """Grid realisation of ``{w : gauge(w) <= kappa + n gauge(anchor)}``."""

    owner: str
    anchor: np.ndarray
    n: int
    realization: np.ndarray


def truncated_set(owner: str, anchor, n: int, master: np.ndarray, kappa: float,
                  anchor_space: ControlSpace, own_space: ControlSpace) -> TruncatedSet:
    """Points of the finite ``master`` grid (in ``own_space``) inside the level-``n`` set."""
    anchor = np.atleast_1d(np.asarray(anchor, float))
    master = np.atleast_2d(np.asarray(master, float))
    bound = kappa + n * anchor_space.gauge(anchor)
    keep = own_space.gauge(master) <= bound + GAUGE_TOL
    if not keep.any():
        raise EmptyGrid(f"no grid point within gauge {bound:.6g}")
    return TruncatedSet(owner, anchor, n, master[keep])


def _masks(kappa, n_levels, anchor_gauge, own_gauge) -> np.ndarray:
    """``mask[n-1, i, j]``: own point ``j`` lies in the level-``n`` set of anchor ``i``."""
    n = np.arange(1, n_levels + 1)[:, None, None]
    return own_gauge[None, None, :] <= kappa + n * anchor_gauge[None, :, None] + GAUGE_TOL


# ---------------------------------------------------------------------------
# nested neighbourhood samples
# ---------------------------------------------------------------------------


def _ball_directions(dim: int, count: int, seed: int) -> np.ndarray:
    """Scrambled-Sobol points of the unit ball in ``dim`` dimensions."""
    with warnings.catch_warnings():
        # balance warnings for counts that are not powers of two
        warnings.simplefilter("ignore", UserWarning)
        pts = qmc.Sobol(d=dim, scramble=True, seed=seed).random(count)
    return (2.0 * pts - 1.0) / np.sqrt(dim)


def _nested(center: np.ndarray, dirs: np.ndarray, n_max: int):
    """Samples ``center + dirs/m`` for ``m = 1..n_max`` plus the centre, with shell labels."""
    pts = [center[None, :]]
    shell = [np.zeros(1, int)]
    for m in range(1, n_max + 1):
        pts.append(center[None, :] + dirs / m)
        shell.append(np.full(len(dirs), m))
    return np.vstack(pts), np.concatenate(shell)


def _in_level(shell: np.ndarray, n: int) -> np.ndarray:
    return (shell == 0) | (shell >= n)


def _clip(points: np.ndarray, space: ControlSpace) -> np.ndarray:
    if space.bound is None:
        return points
    g = space.gauge(points)
    scale = np.where(g > space.bound, space.bound / np.where(g > 0, g, 1.0), 1.0)
    return space.base_point + (points - space.base_point) * scale[..., None]


@dataclass
class EnvelopeResult:
    """Per-level values (``levels[n-1]`` at level ``n``) and the level-``n_max`` estimate."""

    which: str
    levels: np.ndarray
    limit: float
    n_max: int


@dataclass
class EnvelopeSampler:
    """Shared samples for the envelopes at one point ``Xi``."""

    cs: CoefficientSet
    xi: HamPoint
    u_grid: np.ndarray
    v_grid: np.ndarray
    n_max: int = 8
    n_dirs: int = 128
    n_offsets: int = 2
    seed: int = 0

    def __post_init__(self):
        cs = self.cs
        self.u_grid = np.asarray(self.u_grid, float).reshape(-1, cs.u_space.dim)
        self.v_grid = np.asarray(self.v_grid, float).reshape(-1, cs.v_space.dim)
        if len(self.u_grid) == 0 or len(self.v_grid) == 0:
            raise EmptyGrid("control grids must be nonempty")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        vec = self.xi.as_vector()
        self.xi_pts, self.xi_shell = _nested(vec, _ball_directions(len(vec), self.n_dirs, self.seed), self.n_max)
        self.u_dirs = _ball_directions(cs.u_space.dim, self.n_offsets, self.seed + 1)
        self.v_dirs = _ball_directions(cs.v_space.dim, self.n_offsets, self.seed + 2)
        gu = cs.u_space.gauge(self.u_grid)
        gv = cs.v_space.gauge(self.v_grid)
        self.v_masks = _masks(cs.kappa, self.n_max, gu, gv)  # responses v to anchors u
        self.u_masks = _masks(cs.kappa, self.n_max, gv, gu)  # responses u to anchors v
        for masks, label in ((self.v_masks, "v"), (self.u_masks, "u")):
            if not masks[0].any(axis=1).all():
                raise EmptyGrid(f"a level-1 truncated {label}-set is empty on the grid")

    def values(self, xi_pts, u, v) -> np.ndarray:
        """``H`` on the product ``xi_pts x u x v``, shape ``(len(xi), len(u), len(v))``."""
        k = self.xi.k
        nx, nu, nv = len(xi_pts), len(u), len(v)
        t, x, y, z, G = _unpack(xi_pts, k)
        sh = (nx, nu, nv)
        return hamiltonian_batch(
            self.cs,
            np.broadcast_to(t[:, None, None], sh),
            np.broadcast_to(x[:, None, None, :], sh + (k,)),
            np.broadcast_to(y[:, None, None], sh),
            np.broadcast_to(z[:, None, None, :], sh + (k,)),
            np.broadcast_to(G[:, None, None], sh + (k, k)),
            np.broadcast_to(u[None, :, None, :], sh + (u.shape[1],)),
            np.broadcast_to(v[None, None, :, :], sh + (v.shape[1],)),
        )

    # -- envelopes ------------------------------------------------------------
    def h1_lower(self) -> np.ndarray:
        """``sup_u min_{Xi' in S_n} min_{v in O^{n_max}_u} H``; nondecreasing in ``n``."""
        full = self.v_masks[-1]
        out = np.full((self.n_max, len(self.u_grid)), -np.inf)
        for i, u in enumerate(self.u_grid):
            H = self.values(self.xi_pts, u[None, :], self.v_grid[full[i]])[:, 0, :]
            per_xi = H.min(axis=1)
            for n in range(1, self.n_max + 1):
                out[n - 1, i] = per_xi[_in_level(self.xi_shell, n)].min()
        return out.max(axis=1)

    def h1_upper(self) -> np.ndarray:
        """``sup_u min_{v in O^n_u} max_{u' in N_n(u)} max_{Xi' in S_n} H``; nonincreasing."""
        cs = self.cs
        out = np.full((self.n_max, len(self.u_grid)), -np.inf)
        for i, u in enumerate(self.u_grid):
            ups, ushell = _nested(u, self.u_dirs, self.n_max)
            ups = _clip(ups, cs.u_space)
            H = self.values(self.xi_pts, ups, self.v_grid)
            for n in range(1, self.n_max + 1):
                sub = H[_in_level(self.xi_shell, n)][:, _in_level(ushell, n)]
                inner = sub.max(axis=(0, 1))
                out[n - 1, i] = inner[self.v_masks[n - 1, i]].min()
        return out.max(axis=1)

    def h2_upper(self) -> np.ndarray:
        """``inf_v max_{Xi' in S_n} max_{u in O^{n_max}_v} H``; nonincreasing in ``n``."""
        full = self.u_masks[-1]
        out = np.full((self.n_max, len(self.v_grid)), np.inf)
        for j, v in enumerate(self.v_grid):
            H = self.values(self.xi_pts, self.u_grid[full[j]], v[None, :])[:, :, 0]
            per_xi = H.max(axis=1)
            for n in range(1, self.n_max + 1):
                out[n - 1, j] = per_xi[_in_level(self.xi_shell, n)].max()
        return out.min(axis=1)

    def h2_lower(self) -> np.ndarray:
        """``inf_v max_{u in O^n_v} min_{v' in N_n(v)} min_{Xi' in S_n} H``; nondecreasing."""
        cs = self.cs
        out = np.full((self.n_max, len(self.v_grid)), np.inf)
        for j, v in enumerate(self.v_grid):
            vps, vshell = _nested(v, self.v_dirs, self.n_max)
            vps = _clip(vps, cs.v_space)
            H = self.values(self.xi_pts, self.u_grid, vps)
            for n in range(1, self.n_max + 1):
                sub = H[_in_level(self.xi_shell, n)][:, :, _in_level(vshell, n)]
                inner = sub.min(axis=(0, 2))
                out[n - 1, j] = inner[self.u_masks[n - 1, j]].max()
        return out.min(axis=1)

    def envelope(self, which: str) -> EnvelopeResult:
        if which not in KINDS:
            raise ValueError(f"which must be one of {KINDS}")
        levels = {
            "H1_lower": self.h1_lower,
            "H1_upper": self.h1_upper,
            "H2_lower": self.h2_lower,
            "H2_upper": self.h2_upper,
        }[which]()
        steps = np.diff(levels)
        if which in ("H1_upper", "H2_upper") and np.any(steps > 0):
            raise AssertionError(f"{which} level sequence increased: {levels.tolist()}")
        if which in ("H1_lower", "H2_lower") and np.any(steps < 0):
            raise AssertionError(f"{which} level sequence decreased: {levels.tolist()}")
        return EnvelopeResult(which, levels, float(levels[-1]), self.n_max)

    def modulus(self) -> float:
        """Largest sampled change of ``H`` when ``Xi``, ``u`` and ``v`` move within ``1/n_max``."""
        cs = self.cs
        level = _in_level(self.xi_shell, self.n_max)
        H0 = self.values(self.xi.as_vector()[None, :], self.u_grid, self.v_grid)[0]
        worst = np.max(np.abs(self.values(self.xi_pts[level], self.u_grid, self.v_grid) - H0[None]))
        du = _clip(self.u_grid[:, None, :] + self.u_dirs[None] / self.n_max, cs.u_space)
        dv = _clip(self.v_grid[:, None, :] + self.v_dirs[None] / self.n_max, cs.v_space)
        for a in range(du.shape[1]):
            Hu = self.values(self.xi.as_vector()[None, :], du[:, a], self.v_grid)[0]
            worst = max(worst, float(np.max(np.abs(Hu - H0))))
        for a in range(dv.shape[1]):
            Hv = self.values(self.xi.as_vector()[None, :], self.u_grid, dv[:, a])[0]
            worst = max(worst, float(np.max(np.abs(Hv - H0))))
        return float(worst)


def envelope_h(cs: CoefficientSet, xi: HamPoint, which: str, u_grid, v_grid, n_max: int = 8,
               n_dirs: int = 128, n_offsets: int = 2, seed: int = 0) -> EnvelopeResult:
    """One envelope Hamiltonian at ``xi`` with its level sequence ``n = 1..n_max``.

    Raises:
        EmptyGrid: a control grid or a truncated response set is empty.
        AssertionError: the level sequence is not monotone in the expected direction.
    """
    return EnvelopeSampler(cs, xi, u_grid, v_grid, n_max, n_dirs, n_offsets, seed).envelope(which)


def all_envelopes(cs: CoefficientSet, xi: HamPoint, u_grid, v_grid, n_max: int = 8,
                  n_dirs: int = 128, n_offsets: int = 2, seed: int = 0) -> dict:
    """All four envelopes on shared samples, asserting lower <= upper at every level."""
    sampler = EnvelopeSampler(cs, xi, u_grid, v_grid, n_max, n_dirs, n_offsets, seed)
    out = {w: sampler.envelope(w) for w in KINDS}
    for i in ("1", "2"):
        lo, hi = out[f"H{i}_lower"].levels, out[f"H{i}_upper"].levels
        if np.any(lo > hi + 1e-12 * np.maximum(1.0, np.abs(hi))):
            raise AssertionError(f"H{i} lower envelope exceeds the upper one: {lo} vs {hi}")
    out["modulus"] = sampler.modulus()
    return out


def brute_supinf(cs: CoefficientSet, xi: HamPoint, u_grid, v_grid) -> float:
    """``max_u min_v H(Xi, u, v)`` over the product grid."""
    s = EnvelopeSampler(cs, xi, u_grid, v_grid, n_max=1, n_dirs=1)
    return float(s.values(xi.as_vector()[None, :], s.u_grid, s.v_grid)[0].min(axis=1).max())


def brute_infsup(cs: CoefficientSet, xi: HamPoint, u_grid, v_grid) -> float:
    """``min_v max_u H(Xi, u, v)`` over the product grid."""
    s = EnvelopeSampler(cs, xi, u_grid, v_grid, n_max=1, n_dirs=1)
    return float(s.values(xi.as_vector()[None, :], s.u_grid, s.v_grid)[0].max(axis=0).min())
