"""Independent reference values, computed without the package under test."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq
from scipy.special import roots_hermitenorm

# f = -y, terminal 1, horizon 1: Y_0 = exp(-1)
LINEAR_BSDE_Y0 = math.exp(-1.0)


def heat_exact(t, x, T=1.0):
    """E[(x + B_{T-t})^2]."""
    return np.asarray(x, float) ** 2 + (T - np.asarray(t, float))


def sine_root(u: float) -> float:
    """The unique v in [-|u|, |u|] with v - sin(u) = 0."""
    if u == 0:
        return 0.0
    a = abs(u)
    return brentq(lambda v: v - math.sin(u), -a, a, xtol=1e-14)


def sine_root_grid(u: float, n: int = 10_000) -> float:
    """Brute-force root on an n-point v-grid."""
    v = np.linspace(-abs(u), abs(u), n)
    return float(v[np.argmin(np.abs(v - math.sin(u)))])


def gaussian_expectation(fn, x: float, var: float, nodes: int = 80) -> float:
    """E[fn(x + sqrt(var) N)] by Gauss-Hermite quadrature (probabilists' weights)."""
    z, w = roots_hermitenorm(nodes)
    return float(np.sum(w * fn(x + math.sqrt(var) * z)) / math.sqrt(2 * math.pi))


def log_cosh(x):
    x = np.asarray(x, float)
    return np.abs(x) + np.log1p(np.exp(-2 * np.abs(x))) - math.log(2.0)
