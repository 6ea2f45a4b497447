"""Real log canonical thresholds from normal-crossing charts, and two numerical estimators.

A chart is the pair of multi-indices (k, h) of one local coordinate of a
resolution, in which K(g(u)) = u^{2k} and the prior times Jacobian is
proportional to |u^h|. Charts are inputs here; nothing resolves singularities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .criteria import Estimate, _mean_deviance
from .sampler import McmcConfig, run_mcmc, with_beta
from .zoo import ModelSpec, generate_data


@dataclass(frozen=True)
class NormalCrossingChart:
    k: tuple
    h: tuple

    def __post_init__(self):
        k = tuple(int(v) for v in self.k)
        h = tuple(int(v) for v in self.h)
        if len(k) != len(h) or not k:
            raise ValueError("k and h must be nonempty and of equal length")
        if any(v < 0 for v in k + h):
            raise ValueError("multi-indices must be nonnegative integers")
        if not any(v > 0 for v in k):
            raise ValueError("at least one k_j must be positive")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "h", h)

    def ratios(self) -> list:
        """(h_j + 1) / (2 k_j) per coordinate, ``None`` standing for infinity when k_j = 0."""
        return [Fraction(hj + 1, 2 * kj) if kj > 0 else None for kj, hj in zip(self.k, self.h)]


@dataclass(frozen=True)
class RlctResult:
    lam: Fraction
    m: int

    def to_dict(self) -> dict:
        return {
            "lambda": {"num": self.lam.numerator, "den": self.lam.denominator},
            "lambda_decimal": float(self.lam),
            "m": self.m,
        }

    def __str__(self) -> str:
        return f"lambda={self.lam} m={self.m}"


def rlct_of_charts(charts: Sequence[NormalCrossingChart]) -> RlctResult:
    """lambda = min over charts and coordinates of (h_j+1)/(2k_j); m = max count attaining it."""
    charts = list(charts)
    if not charts:
        raise ValueError("need at least one chart")
    per_chart = []
    for ch in charts:
        if not isinstance(ch, NormalCrossingChart):
            ch = NormalCrossingChart(**ch) if isinstance(ch, dict) else NormalCrossingChart(*ch)
        finite = [r for r in ch.ratios() if r is not None]
        per_chart.append(finite)
    lam = min(min(f) for f in per_chart)
    m = max(sum(1 for r in f if r == lam) for f in per_chart)
    return RlctResult(lam, m)


def _lam(p) -> Fraction:
    return p.lam if isinstance(p, RlctResult) else Fraction(p)


def rlct_sum(parts: Iterable) -> Fraction:
    """RLCT of (sum_j K_j(theta_j), prod_j pi_j): the sum of the parts' RLCTs."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one part")
    return sum((_lam(p) for p in parts), Fraction(0))


def rlct_product(parts: Iterable) -> Fraction:
    """RLCT of (prod_j K_j(theta_j), prod_j pi_j): the smallest of the parts' RLCTs."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one part")
    return min(_lam(p) for p in parts)


def charts_from_json(text: str) -> list[NormalCrossingChart]:
    raw = json.loads(text)
    if isinstance(raw, dict):
        raw = raw.get("charts", [raw])
    return [NormalCrossingChart(tuple(c["k"]), tuple(c["h"])) for c in raw]


# ---------------------------------------------------------------------------
# numerical estimators


def two_temperature_lambda(model: ModelSpec, data, config: McmcConfig) -> Estimate:
    """(E_b1[n L_n] - E_b2[n L_n]) / (1/b1 - 1/b2) with b1 = 1/log n, b2 = 1.5/log n.

    Both temperatures reuse the same seed, so the two runs share their
    random numbers and their difference has a smaller variance.
    """
    n = data.n
    if n < 5:
        raise ValueError("two-temperature estimator needs n >= 5")
    b1 = 1.0 / math.log(n)
    b2 = 1.5 / math.log(n)
    if b2 > 1:
        raise ValueError("1.5/log n exceeds 1; n too small")
    e1 = _mean_deviance(run_mcmc(model, data, with_beta(config, b1)))
    e2 = _mean_deviance(run_mcmc(model, data, with_beta(config, b2)))
    scale = 1.0 / b1 - 1.0 / b2
    return Estimate((e1.value - e2.value) / scale, math.hypot(e1.mcse, e2.mcse) / scale)


def estimate_rlct_wbic(
    model: ModelSpec,
    n: int,
    replicates: int,
    config: McmcConfig,
    seed: int | None = None,
) -> tuple[float, float]:
    """Mean and standard error over replicate datasets of the two-temperature estimate."""
    if n < 20:
        raise ValueError("estimate_rlct_wbic needs n >= 20")
    if replicates < 10:
        raise ValueError("estimate_rlct_wbic needs at least 10 replicates")
    from .harness import replicate_seed, substream

    master = config.seed if seed is None else seed
    vals = []
    for r in range(replicates):
        rs = replicate_seed(master, n, r)
        data = generate_data(model, n, rs)
        cfg = replace(with_beta(config, 1.0), seed=substream(rs, 1))
        vals.append(two_temperature_lambda(model, data, cfg).value)
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


class InsufficientResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeFit:
    lam: float
    stderr: float
    eps: tuple
    volume: tuple
    hits: tuple
    used: tuple


def volume_fit(
    model: ModelSpec,
    eps_grid: Sequence[float],
    prior_samples: int = 1_000_000,
    seed: int = 0,
    min_hits: int = 100,
    K=None,
    batch: int = 1_000_000,
) -> VolumeFit:
    """Least-squares slope of log Vol(eps) against log eps, Vol(eps) = P_prior[K < eps]."""
    K = model.analytic_K if K is None else K
    if K is None:
        raise ValueError("model has no analytic K")
    eps = np.asarray(list(eps_grid), dtype=float)
    if eps.size < 1 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps_grid must be strictly decreasing and positive")
    if prior_samples < 100_000:
        raise ValueError("prior_samples must be at least 1e5")
    rng = np.random.default_rng(int(seed))
    hits = np.zeros(eps.size, dtype=np.int64)
    left = int(prior_samples)
    while left > 0:
        b = min(batch, left)
        kv = K(model.sample_prior(rng, b))
        hits += np.array([np.count_nonzero(kv < e) for e in eps])
        left -= b
    used = hits >= min_hits
    if used.sum() < 3:
        raise InsufficientResolutionError("insufficient tail resolution")
    vol = hits / float(prior_samples)
    fit = stats.linregress(np.log(eps[used]), np.log(vol[used]))
    return VolumeFit(
        float(fit.slope),
        float(fit.stderr),
        tuple(eps.tolist()),
        tuple(vol.tolist()),
        tuple(int(h) for h in hits),
        tuple(bool(u) for u in used),
    )


def estimate_rlct_volume(
    model: ModelSpec, eps_grid: Sequence[float], prior_samples: int = 1_000_000, seed: int = 0, **kw
) -> tuple[float, float]:
    fit = volume_fit(model, eps_grid, prior_samples, seed, **kw)
    return fit.lam, fit.stderr


def scale_matched_eps_grid(n: int, points: int = 9, decades: float = 1.0) -> np.ndarray:
    """Geometric eps grid spanning ``decades`` either side of log(n)/n, largest first.

    The tempered posteriors used by the two-temperature estimator resolve K on
    the scale log(n)/n, so a volume fit on this window measures the same local
    exponent.
    """
    centre = math.log(n) / n
    return np.geomspace(centre * 10**decades, centre * 10**-decades, points)
