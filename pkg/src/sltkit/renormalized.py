"""Renormalized posterior on one chart.

The distribution over (t, u) has density proportional to
t^(lam-1) exp(-t + sqrt(t) xi(u)) dt du*, where du* is a weighted set of grid
nodes and xi is a zero-mean Gaussian field on those nodes. All t-integrals
are computed in s = sqrt(t), where t^(lam-1) dt = 2 s^(2 lam - 1) ds and the
exponent -s^2 + s xi is a shifted Gaussian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp, roots_jacobi, roots_legendre


class DegenerateWeightError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ChartGrid:
    """Nodes, du* weights and xi covariance of a single chart.

    ``a_kernel`` is E_X[a(X,u) a(X,v)] on the nodes. On the support of du*
    (where u^k = 0) it equals the xi covariance, which is the default.
    """

    lam: float
    nodes: np.ndarray
    weights: np.ndarray
    covariance: np.ndarray
    a_kernel: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        lam = float(self.lam)
        if not lam > 0:
            raise ValueError("lambda must be positive")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative with at least one positive")
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes.reshape(w.size, -1) if nodes.size else np.zeros((w.size, 0))
        if nodes.shape[0] != w.size:
            raise ValueError("one weight per node required")
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (w.size, w.size):
            raise ValueError(f"covariance must be {w.size}x{w.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        kern = cov if self.a_kernel is None else np.atleast_2d(np.asarray(self.a_kernel, dtype=float))
        if kern.shape != cov.shape:
            raise ValueError("a_kernel must match the covariance shape")
        for name, v in (("nodes", nodes), ("weights", w), ("covariance", cov), ("a_kernel", kern)):
            v = v.copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        out = {
            "lambda": self.lam,
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
            "covariance": self.covariance.tolist(),
        }
        if not np.array_equal(self.a_kernel, self.covariance):
            out["a_kernel"] = self.a_kernel.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ChartGrid":
        missing = {"lambda", "weights", "covariance"} - set(d)
        if missing:
            raise ValueError(f"chart grid missing field(s): {', '.join(sorted(missing))}")
        w = d["weights"]
        nodes = d.get("nodes", [[] for _ in w])
        return cls(d["lambda"], np.asarray(nodes, dtype=float).reshape(len(w), -1), w, d["covariance"], d.get("a_kernel"))

    @classmethod
    def from_json(cls, text: str) -> "ChartGrid":
        return cls.from_dict(json.loads(text))


def scalar_grid(lam: float, variance: float) -> ChartGrid:
    """A single node of unit weight carrying a scalar xi of the given variance."""
    return ChartGrid(lam, np.zeros((1, 0)), [1.0], [[variance]])


def product_mean_grid() -> ChartGrid:
    """ProductMean chart: both coordinates attain lam = 1/2, so u_b is empty.

    With a(x,u) = u^k - sqrt(2) x and u^k = 0 on the support,
    E[a a] = 2 and xi has variance 2.
    """
    return scalar_grid(0.5, 2.0)


def product_mean_a(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """a(x, u) on the support of du* for ProductMean; shape (len(x), len(u))."""
    x = np.asarray(x, dtype=float)
    return -math.sqrt(2.0) * x[:, None] + np.zeros(len(u))[None, :]


def matched_xi(x: np.ndarray) -> float:
    """xi_n = n^{-1/2} sum_i (u^k - a(X_i, u)) for ProductMean, i.e. sqrt(2n) mean(x)."""
    x = np.asarray(x, dtype=float).ravel()
    return math.sqrt(2.0 * x.size) * float(x.mean()) if x.size else 0.0


@dataclass(frozen=True)
class XiField:
    values: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _factor(cov: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    if evals.size and evals.min() < -1e-10:
        raise ValueError(f"covariance is not positive semidefinite (eigenvalue {evals.min():.3g})")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_xi_array(grid: ChartGrid, seed: int, size: int) -> np.ndarray:
    """``size`` independent field realizations, shape (size, nodes)."""
    L = _factor(grid.covariance)
    z = np.random.default_rng(seed).standard_normal((size, grid.size))
    return z @ L.T


def sample_xi(grid: ChartGrid, seed: int) -> XiField:
    return XiField(sample_xi_array(grid, seed, 1)[0], grid.covariance)


# ---------------------------------------------------------------------------
# t quadrature


@lru_cache(maxsize=64)
def _s_rule(lam: float, s_max: float, panels: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights in s for int_0^s_max g(s) 2 s^(2 lam - 1) ds."""
    edges = np.linspace(0.0, s_max, panels + 1)
    h = edges[1] - edges[0]
    # first panel: Gauss-Jacobi absorbs s^(2 lam - 1)
    xj, wj = roots_jacobi(order, 0.0, 2.0 * lam - 1.0)
    s0 = h * (xj + 1.0) / 2.0
    w0 = 2.0 * wj * (h / 2.0) ** (2.0 * lam)
    xl, wl = roots_legendre(order)
    mids = (edges[1:-1] + edges[2:]) / 2.0
    s1 = (mids[:, None] + (h / 2.0) * xl[None, :]).ravel()
    w1 = (np.tile(wl, panels - 1) * (h / 2.0)) * 2.0 * s1 ** (2.0 * lam - 1.0)
    s = np.concatenate([s0, s1])
    w = np.concatenate([w0, w1])
    s.setflags(write=False)
    w.setflags(write=False)
    return s, w


def t_max(xi: np.ndarray) -> float:
    """Upper t limit; beyond it the integrand is below exp(-(sqrt(T) - max xi/2)^2)."""
    top = float(np.max(xi)) if np.size(xi) else 0.0
    return max(50.0, 10.0 * (1.0 + max(top, 0.0)) ** 2)


def _shift(xi: np.ndarray) -> np.ndarray:
    # max over s >= 0 of -s^2 + s xi
    return np.where(xi > 0, xi * xi / 4.0, 0.0)


def _log_masses(s, w, xi):
    """Shifted masses int t^(lam-1) exp(-t + sqrt t xi - c) dt per (draw, node), the shifts c, and the integrand."""
    with np.errstate(under="ignore", over="ignore", invalid="ignore"):
        c = _shift(xi)  # (K, P)
        e = np.exp(-(s * s)[None, :, None] + s[None, :, None] * xi[:, None, :] - c[:, None, :])  # (K, Q, P)
        mass = np.einsum("q,kqp->kp", w, e)
    return mass, c, e


class _Quadrature:
    """Quadrature for a batch of xi realizations; panel count doubled until converged."""

    def __init__(self, grid: ChartGrid, xi: np.ndarray, order: int = 24, rtol: float = 1e-13, max_panels: int = 1024):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != grid.size:
            raise ValueError(f"xi has {xi.shape[1]} nodes, grid has {grid.size}")
        self.grid = grid
        self.xi = xi
        s_max = math.sqrt(t_max(xi))
        panels = max(4, int(math.ceil(s_max / 0.75)))
        prev = None
        while True:
            s, w = _s_rule(grid.lam, s_max, panels, order)
            mass, c, e = _log_masses(s, w, xi)
            if prev is not None:
                with np.errstate(invalid="ignore", divide="ignore"):
                    rel = np.abs(mass - prev) / np.abs(mass)
                if np.all(np.nan_to_num(rel, nan=0.0) < rtol) or panels >= max_panels:
                    break
            prev = mass
            panels *= 2
        self.s, self.w, self.e = s, w, e
        logw = np.log(grid.weights, where=grid.weights > 0, out=np.full(grid.size, -np.inf))
        with np.errstate(divide="ignore"):
            lm = np.log(mass) + c + logw[None, :]  # (K, P)
        bad = ~np.isfinite(logsumexp(lm, axis=1))
        if np.any(bad):
            raise DegenerateWeightError("degenerate weight: renormalizing constant underflowed")
        self.log_node_mass = lm
        self.log_z = logsumexp(lm, axis=1)
        # normalized weights over (t node, grid node)
        node_share = np.exp(lm - self.log_z[:, None])  # (K, P)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_t = (w[None, :, None] * e) / mass[:, None, :]
        per_t = np.nan_to_num(per_t, nan=0.0)
        self.omega = per_t * node_share[:, None, :]  # (K, Q, P), sums to 1 per k

    @property
    def t(self) -> np.ndarray:
        return self.s * self.s

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Expectation of values broadcastable to (K, Q, P)."""
        return np.einsum("kqp,kqp->k", self.omega, np.broadcast_to(values, self.omega.shape))


def _call_F(F, quad: _Quadrature) -> np.ndarray:
    t = quad.t[:, None]
    val = np.asarray(F(t, quad.grid.nodes), dtype=float)
    return np.broadcast_to(val, (quad.t.size, quad.grid.size))[None, :, :]


def renorm_expectation(F: Callable, xi, grid: ChartGrid):
    """<F> under the renormalized posterior.

    ``F(t, u)`` receives t of shape (Q, 1) and the node array u of shape
    (P, dim) and must return something broadcastable to (Q, P). ``xi`` is an
    ``XiField``, a (P,) array, or a (K, P) batch; a batch returns shape (K,).
    """
    arr = xi.values if isinstance(xi, XiField) else np.asarray(xi, dtype=float)
    batch = arr.ndim == 2
    quad = _Quadrature(grid, arr)
    out = quad.expect(_call_F(F, quad))
    return out if batch else float(out[0])


def moments(xi, grid: ChartGrid, powers) -> np.ndarray:
    """<t^p> for each p in ``powers``; shape (K, len(powers))."""
    quad = _Quadrature(grid, xi)
    return np.stack([quad.expect(quad.t[None, :, None] ** p) for p in powers], axis=1)


def partial_integration_residuals(alpha: float, xi, grid: ChartGrid) -> np.ndarray:
    """|<t^a> - (lam + a - 1)<t^(a-1)> - <t^(a-1/2) xi>/2| per xi realization."""
    if alpha < 1:
        raise ValueError("alpha must be at least 1")
    quad = _Quadrature(grid, xi)
    t = quad.t[None, :, None]
    xi_b = quad.xi[:, None, :]
    lhs = quad.expect(t**alpha)
    rhs = (grid.lam + alpha - 1.0) * quad.expect(t ** (alpha - 1.0)) + 0.5 * quad.expect(t ** (alpha - 0.5) * xi_b)
    return np.abs(lhs - rhs)


def check_partial_integration(alpha: float, xi, grid: ChartGrid) -> float:
    """Largest partial-integration residual over the supplied realization(s)."""
    arr = xi.values if isinstance(xi, XiField) else xi
    return float(np.max(partial_integration_residuals(alpha, arr, grid)))


def chi(xi, grid: ChartGrid):
    """-log of sum_nodes w int t^(lam-1) exp(-t + sqrt t xi) dt."""
    arr = xi.values if isinstance(xi, XiField) else np.asarray(xi, dtype=float)
    quad = _Quadrature(grid, arr)
    out = -quad.log_z
    return out if arr.ndim == 2 else float(out[0])


@dataclass(frozen=True)
class IdentityCheck:
    lhs: float
    rhs: float
    stderr: float

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "stderr": self.stderr}


def functional_variance(xi, grid: ChartGrid, a: Optional[Callable] = None, x_nodes: int = 60) -> np.ndarray:
    """V(xi) = E_X[<t a^2> - <sqrt t a>^2] per realization.

    Without ``a`` the x-expectation uses the second-moment kernel of the grid.
    With ``a(x, u)`` it is done by Gauss-Hermite quadrature over x ~ N(0, 1).
    """
    quad = _Quadrature(grid, xi)
    t = quad.t[None, :, None]
    mt = np.einsum("kqp,qp->kp", quad.omega, np.broadcast_to(t[0], quad.omega.shape[1:]))  # (K, P)
    ms = np.einsum("kqp,qp->kp", quad.omega, np.broadcast_to(np.sqrt(t[0]), quad.omega.shape[1:]))
    if a is None:
        M = grid.a_kernel
        return mt @ np.diag(M) - np.einsum("kp,pr,kr->k", ms, M, ms)
    x, wx = hermegauss(x_nodes)
    wx = wx / wx.sum()
    A = np.asarray(a(x, grid.nodes), dtype=float)  # (X, P)
    first = mt @ (wx @ (A * A))
    second = wx @ ((ms @ A.T) ** 2).T
    return first - second


def functional_identity_check(
    grid: ChartGrid, draws: int, seed: int, a: Optional[Callable] = None, chunk: int = 4096
) -> IdentityCheck:
    """Monte Carlo over xi of E<sqrt(t) xi(u)> against E V(xi), with a paired standard error."""
    if draws < 2:
        raise ValueError("need at least two draws")
    xi = sample_xi_array(grid, seed, draws)
    lhs = np.empty(draws)
    rhs = np.empty(draws)
    for i in range(0, draws, chunk):
        blk = xi[i : i + chunk]
        quad = _Quadrature(grid, blk)
        lhs[i : i + chunk] = quad.expect(np.sqrt(quad.t)[None, :, None] * quad.xi[:, None, :])
        rhs[i : i + chunk] = functional_variance(blk, grid, a)
    diff = lhs - rhs
    se = float(diff.std(ddof=1) / math.sqrt(draws))
    return IdentityCheck(float(lhs.mean()), float(rhs.mean()), se)
