"""Adaptive random-walk Metropolis for tempered posteriors, with replica exchange.

The target at inverse temperature beta is ``pi(theta) * prod_i p(X_i|theta)^beta``
restricted to the model's box. Each chain owns a full temperature ladder; all
chains and rungs are advanced together as one array so a run is a single
vectorised loop. Every chain draws its random numbers from its own stream
(``SeedSequence(seed).spawn``), so results never depend on execution layout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from ._numerics import batch_means_mcse
from .zoo import Dataset, ModelSpec


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    warmup: Optional[int] = None
    draws_per_chain: int = 2000
    initial_step: float = 0.1
    target_accept: float = 0.3
    seed: int = 0
    beta: float = 1.0
    ladder: Optional[tuple] = None
    exchange_interval: int = 10
    ladder_rungs: int = 4

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("chains must be >= 2")
        if self.draws_per_chain < 1:
            raise ValueError("draws_per_chain must be >= 1")
        if self.warmup is not None and self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be > 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.ladder is not None:
            lad = tuple(float(b) for b in self.ladder)
            if any(b2 <= b1 for b1, b2 in zip(lad, lad[1:])):
                raise ValueError("ladder must be strictly increasing")
            if not math.isclose(lad[-1], self.beta, rel_tol=0, abs_tol=1e-15):
                raise ValueError("ladder must end at beta")
            if lad[0] <= 0:
                raise ValueError("ladder entries must be > 0")
            object.__setattr__(self, "ladder", lad)

    @property
    def n_warmup(self) -> int:
        return self.draws_per_chain // 2 if self.warmup is None else int(self.warmup)

    def betas(self) -> tuple:
        """The temperature ladder actually simulated (last rung is ``beta``)."""
        if self.ladder is not None:
            return self.ladder
        if self.beta >= 1.0 or self.ladder_rungs <= 1:
            return (float(self.beta),)
        return tuple(np.geomspace(self.beta / 8.0, self.beta, self.ladder_rungs).tolist()[:-1]) + (
            float(self.beta),
        )


@dataclass
class ChainSet:
    """Retained draws at one inverse temperature.

    ``draws`` has shape ``(chains, iterations, d)``; ``loglik`` holds the total
    log-likelihood sum_i log p(X_i|theta) of every draw.
    """

    draws: np.ndarray
    accept_rate: np.ndarray
    beta: float
    seed: int
    loglik: Optional[np.ndarray] = None
    model: Optional[ModelSpec] = field(default=None, repr=False)
    step: Optional[np.ndarray] = None

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim == 2:
            self.draws = self.draws[:, :, None]
        self.accept_rate = np.asarray(self.accept_rate, dtype=float)

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    @property
    def iterations(self) -> int:
        return self.draws.shape[1]

    @property
    def d(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.d)

    @classmethod
    def point_mass(cls, theta, model: Optional[ModelSpec] = None, chains: int = 2, draws: int = 10):
        theta = np.asarray(theta, dtype=float).ravel()
        arr = np.broadcast_to(theta, (chains, draws, theta.size)).copy()
        return cls(arr, np.zeros(chains), 1.0, 0, model=model)


# ---------------------------------------------------------------------------
# kernel pieces


def reflect(x: np.ndarray, lower, upper) -> np.ndarray:
    """Fold ``x`` back into [lower, upper] by mirror reflection at both walls."""
    w = upper - lower
    y = np.mod(x - lower, 2.0 * w)
    y = np.where(y > w, 2.0 * w - y, y)
    return lower + y


def metropolis_accept(log_target_current, log_target_proposed, log_u) -> np.ndarray:
    """Accept when log u < log pi(proposed) - log pi(current) (symmetric proposals)."""
    with np.errstate(invalid="ignore"):
        return np.asarray(log_u) < (np.asarray(log_target_proposed) - np.asarray(log_target_current))


def _chain_streams(seed: int, chains: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(chains)]


def _sample(
    model: ModelSpec,
    data: Dataset,
    config: McmcConfig,
    keep: Sequence[int] | None = None,
    initial: Optional[np.ndarray] = None,
) -> list[ChainSet]:
    betas = np.asarray(config.betas(), dtype=float)
    R = betas.size
    C = config.chains
    d = model.d
    keep = list(range(R)) if keep is None else list(keep)
    warm = config.n_warmup
    T = config.draws_per_chain
    lo, hi = model.lower, model.upper
    total = model.total_log_likelihood(data.observations)
    flat_prior = model.uniform_prior

    def evaluate(theta):  # theta (C, R, d)
        flat = theta.reshape(-1, d)
        ll = total(flat).reshape(C, R)
        lp = np.zeros((C, R)) if flat_prior else model.log_prior(flat).reshape(C, R)
        return ll, lp

    rngs = _chain_streams(config.seed, C)

    if initial is not None:
        init = np.asarray(initial, dtype=float)
        if init.shape == (C, d):
            init = np.repeat(init[:, None, :], R, axis=1)
        theta = init.reshape(C, R, d).copy()
    else:
        theta = np.stack([_initial_states(model, r, R) for r in rngs])
    ll, lp = evaluate(theta)
    if not np.all(np.isfinite(lp)):
        raise SamplerError("initial state outside the prior support")

    log_step = np.full((C, R, d), math.log(config.initial_step))
    accepts = np.zeros((C, R, d))
    warm_accepts = np.zeros((C, R, d))
    out = np.empty((len(keep), C, T, d))
    out_ll = np.empty((len(keep), C, T))
    interval = max(1, int(config.exchange_interval))
    n_swaps = 0

    block = 256
    total_sweeps = warm + T
    sweep = 0
    while sweep < total_sweeps:
        B = min(block, total_sweeps - sweep)
        z = np.stack([r.standard_normal((B, R, d)) for r in rngs], axis=1)  # (B, C, R, d)
        lu = np.log(np.stack([r.random((B, R, d)) for r in rngs], axis=1))
        lus = np.log(np.stack([r.random((B, R)) for r in rngs], axis=1))  # (B, C, R)
        for b in range(B):
            step = np.exp(log_step)
            adapting = sweep < warm
            for j in range(d):
                prop = theta.copy()
                prop[:, :, j] = reflect(theta[:, :, j] + step[:, :, j] * z[b, :, :, j], lo[j], hi[j])
                ll_p, lp_p = evaluate(prop)
                cur = betas * ll + lp
                new = betas * ll_p + lp_p
                acc = metropolis_accept(cur, new, lu[b, :, :, j])
                theta[acc] = prop[acc]
                ll = np.where(acc, ll_p, ll)
                lp = np.where(acc, lp_p, lp)
                if adapting:
                    warm_accepts[:, :, j] += acc
                    gamma = (sweep + 1.0) ** -0.6
                    log_step[:, :, j] += gamma * (acc - config.target_accept)
                else:
                    accepts[:, :, j] += acc
            if R > 1 and (sweep + 1) % interval == 0:
                parity = n_swaps % 2
                n_swaps += 1
                for r in range(parity, R - 1, 2):
                    log_a = (betas[r + 1] - betas[r]) * (ll[:, r] - ll[:, r + 1])
                    sw = lus[b, :, r] < log_a
                    if np.any(sw):
                        ti = theta[sw, r].copy()
                        theta[sw, r] = theta[sw, r + 1]
                        theta[sw, r + 1] = ti
                        for arr in (ll, lp):
                            a_r = arr[sw, r].copy()
                            arr[sw, r] = arr[sw, r + 1]
                            arr[sw, r + 1] = a_r
            if not adapting:
                t = sweep - warm
                out[:, :, t, :] = theta[:, keep, :].transpose(1, 0, 2)
                out_ll[:, :, t] = ll[:, keep].T
            sweep += 1
            if sweep == warm and warm > 0:
                dead = np.all(warm_accepts == 0, axis=2)
                if np.any(dead):
                    raise SamplerError("adaptation failure: every warmup proposal rejected")

    rate = accepts.sum(axis=2) / (T * d)  # (C, R)
    step_final = np.exp(log_step)
    sets = []
    for idx, r in enumerate(keep):
        sets.append(
            ChainSet(
                draws=out[idx],
                accept_rate=rate[:, r],
                beta=float(betas[r]),
                seed=int(config.seed),
                loglik=out_ll[idx],
                model=model,
                step=step_final[:, r, :],
            )
        )
    return sets


def _initial_states(model: ModelSpec, rng: np.random.Generator, R: int) -> np.ndarray:
    """Initial states for one chain: an independent prior draw per rung."""
    return model.sample_prior(rng, R)


def run_mcmc(
    model: ModelSpec, data: Dataset, config: McmcConfig, initial: Optional[np.ndarray] = None
) -> ChainSet:
    """Sample the tempered posterior at ``config.beta``; only the top rung is returned."""
    if data.n < 1:
        raise ValueError("run_mcmc needs n >= 1")
    if not np.all(model.upper > model.lower):
        raise ValueError("empty domain box")
    R = len(config.betas())
    return _sample(model, data, config, keep=[R - 1], initial=initial)[0]


def run_tempered(model: ModelSpec, data: Dataset, config: McmcConfig) -> list[ChainSet]:
    """Sample every rung of the ladder and return one ChainSet per rung (ascending beta)."""
    if data.n < 1:
        raise ValueError("run_tempered needs n >= 1")
    return _sample(model, data, config)


# ---------------------------------------------------------------------------
# summaries


def posterior_expectation(
    chains: ChainSet, f: Callable[[np.ndarray], np.ndarray], vectorized: bool = True
) -> tuple[float, float]:
    """Mean of f over all retained draws and its batch-means standard error.

    ``f`` receives the ``(S, d)`` draw matrix when ``vectorized`` (the
    default) and single parameter vectors otherwise.
    """
    if chains.draws.size == 0:
        raise ValueError("empty ChainSet")
    flat = chains.flat()
    if vectorized:
        vals = np.asarray(f(flat), dtype=float)
        if vals.shape != (flat.shape[0],):
            vals = np.broadcast_to(vals, (flat.shape[0],))
    else:
        vals = np.array([float(f(th)) for th in flat])
    vals = vals.reshape(chains.chains, chains.iterations)
    return float(vals.mean()), batch_means_mcse(vals)


class Diagnostics(NamedTuple):
    rhat: np.ndarray
    ess: np.ndarray

    @property
    def flagged(self) -> bool:
        return bool(np.any(self.rhat > 1.1))


def split_rhat(x: np.ndarray) -> float:
    """Split R-hat of a (chains, iterations) array."""
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    s = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n = s.shape
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def ess(x: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    if W <= 0:
        return float(m * n)
    means = x.mean(axis=1)
    var_plus = W * (n - 1.0) / n + (means.var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        p = min(p, prev)
        total += p
        prev = p
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n + 10))
    return float(min(m * n / tau, m * n))


def diagnostics(chains: ChainSet) -> Diagnostics:
    if chains.chains < 2 or chains.iterations < 10:
        raise ValueError("diagnostics need >= 2 chains and >= 10 draws each")
    rh = np.array([split_rhat(chains.draws[:, :, j]) for j in range(chains.d)])
    es = np.array([ess(chains.draws[:, :, j]) for j in range(chains.d)])
    return Diagnostics(rh, es)


# ---------------------------------------------------------------------------
# serialisation


def save_chains_csv(chains: ChainSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter"] + [f"theta{j + 1}" for j in range(chains.d)])
        for c in range(chains.chains):
            for t in range(chains.iterations):
                w.writerow([c, t] + [repr(float(v)) for v in chains.draws[c, t]])
    return path


def load_chains_csv(path, beta: float = 1.0, seed: int = 0, model: Optional[ModelSpec] = None) -> ChainSet:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    C = int(body[:, 0].max()) + 1
    T = int(body[:, 1].max()) + 1
    draws = body[:, 2:].reshape(C, T, -1)
    return ChainSet(draws, np.full(C, np.nan), beta, seed, model=model)


def diagnostics_json(chains: ChainSet) -> dict:
    diag = diagnostics(chains)
    return {
        "beta": chains.beta,
        "seed": chains.seed,
        "chains": chains.chains,
        "draws_per_chain": chains.iterations,
        "accept_rate": [float(a) for a in chains.accept_rate],
        "rhat": [float(v) for v in diag.rhat],
        "ess": [float(v) for v in diag.ess],
        "flagged": diag.flagged,
    }


def save_diagnostics(chains: ChainSet, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(diagnostics_json(chains), indent=2) + "\n")
    return path


def with_beta(config: McmcConfig, beta: float, ladder=None) -> McmcConfig:
    return replace(config, beta=float(beta), ladder=ladder)
