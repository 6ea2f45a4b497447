"""Small numerical helpers shared by the sampler and the criteria."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp


def logmeanexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """log(mean(exp(a))) along ``axis`` without overflow."""
    a = np.asarray(a, dtype=float)
    return logsumexp(a, axis=axis) - math.log(a.shape[axis])


def batch_means_mcse(series: np.ndarray) -> float:
    """Monte Carlo standard error of the grand mean of a (chains, iterations) series.

    Each chain is cut into ``floor(sqrt(T))`` batches of equal length; the
    standard error is the spread of the batch means over the square root of
    the total batch count.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[None, :]
    chains, T = series.shape
    if T == 0:
        raise ValueError("empty series")
    size = max(1, int(math.isqrt(T)))
    nb = T // size
    if chains * nb < 2:
        return 0.0
    means = series[:, : nb * size].reshape(chains, nb, size).mean(axis=2).ravel()
    sd = float(np.std(means, ddof=1))
    if not np.isfinite(sd) or sd < 1e-300:
        return 0.0
    return sd / math.sqrt(means.size)


def fsum_mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error (sample sd / sqrt(k)) with exactly rounded sums."""
    vals = [float(v) for v in values]
    k = len(vals)
    if k == 0:
        return math.nan, math.nan
    mean = math.fsum(vals) / k
    if k == 1:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2 for v in vals) / (k - 1)
    return mean, math.sqrt(var / k)
