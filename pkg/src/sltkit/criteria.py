"""Training loss, LOOCV, WAIC, generalization loss, WBIC, free energy and sBIC.

All posterior averages are taken over the retained draws of a
:class:`~sltkit.sampler.ChainSet`. Monte Carlo standard errors come from
linearising each estimator in the per-draw weights and applying batch means
to the resulting series, so they respect the chains' autocorrelation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import qmc

from ._numerics import batch_means_mcse, logmeanexp
from .sampler import ChainSet, McmcConfig, run_mcmc, run_tempered, with_beta
from .zoo import Dataset, ModelSpec, UndefinedLossError, empirical_loss


class LadderError(ValueError):
    pass


@dataclass(frozen=True)
class Estimate:
    value: float
    mcse: float


@dataclass(frozen=True)
class LooResult:
    value: float
    mcse: float
    unstable: bool
    min_ess_fraction: float


def loglik_matrix(chains: ChainSet, data: Dataset) -> np.ndarray:
    """``log p(X_i | theta_s)`` for every retained draw, shape (S, n)."""
    if chains.model is None:
        raise ValueError("ChainSet carries no model")
    if data.n == 0:
        raise UndefinedLossError("empty data")
    return chains.model.log_likelihood(data.observations, chains.flat())


def _series(chains: ChainSet, g: np.ndarray) -> float:
    return batch_means_mcse(g.reshape(chains.chains, chains.iterations))


def _training(chains, ll) -> Estimate:
    lse = logsumexp(ll, axis=0)
    S, n = ll.shape
    value = -float(np.mean(lse - math.log(S)))
    # influence: -(1/n) sum_i p_si / mean_s p_si
    g = -np.exp(ll - lse[None, :]).sum(axis=1) * S / n
    return Estimate(value, _series(chains, g))


def _loo(chains, ll) -> LooResult:
    S, n = ll.shape
    lse = logsumexp(-ll, axis=0)
    value = float(np.mean(lse - math.log(S)))
    w = np.exp(-ll - lse[None, :])  # normalised importance weights, columns sum to 1
    ess_frac = 1.0 / np.sum(w * w, axis=0) / S
    g = w.sum(axis=1) * S / n
    return LooResult(value, _series(chains, g), bool(np.any(ess_frac < 0.1)), float(ess_frac.min()))


def _vterm(chains, ll) -> Estimate:
    # shift by the first draw so a constant column gives exactly zero
    z = ll - ll[:1]
    dev2 = (z - z.mean(axis=0)[None, :]) ** 2
    value = float(dev2.mean())
    g = dev2.mean(axis=1)
    return Estimate(value, _series(chains, g))


def training_loss(chains: ChainSet, data: Dataset) -> float:
    """T_n = -(1/n) sum_i log E_theta[p(X_i|theta)]."""
    return _training(chains, loglik_matrix(chains, data)).value


def training_loss_estimate(chains: ChainSet, data: Dataset) -> Estimate:
    return _training(chains, loglik_matrix(chains, data))


def loocv(chains: ChainSet, data: Dataset) -> float:
    """C_n = (1/n) sum_i log E_theta[1/p(X_i|theta)] (importance-sampling LOOCV)."""
    return _loo(chains, loglik_matrix(chains, data)).value


def loocv_details(chains: ChainSet, data: Dataset) -> LooResult:
    """LOOCV with its MCSE and an instability flag.

    The flag is raised when, for some observation, the importance weights
    1/p(X_i|theta_s) have an effective sample size below 10% of the draws.
    """
    return _loo(chains, loglik_matrix(chains, data))


def waic(chains: ChainSet, data: Dataset) -> tuple[float, float]:
    """Return ``(W_n, V)`` where W_n = T_n + V and V = (1/n) sum_i Var_theta[log p(X_i|theta)]."""
    ll = loglik_matrix(chains, data)
    t = _training(chains, ll).value
    v = _vterm(chains, ll).value
    return t + v, v


def waic_estimate(chains: ChainSet, data: Dataset) -> tuple[Estimate, Estimate]:
    ll = loglik_matrix(chains, data)
    return _waic_from(chains, ll)


def _waic_from(chains, ll) -> tuple[Estimate, Estimate]:
    S, n = ll.shape
    t = _training(chains, ll)
    v = _vterm(chains, ll)
    lse = logsumexp(ll, axis=0)
    g_t = -np.exp(ll - lse[None, :]).sum(axis=1) * S / n
    mu = ll.mean(axis=0)
    g_v = ((ll - mu[None, :]) ** 2).mean(axis=1)
    return Estimate(t.value + v.value, _series(chains, g_t + g_v)), v


def estimate_nu(chains: ChainSet, data: Dataset) -> float:
    """Singular fluctuation estimate (n/2) * V."""
    ll = loglik_matrix(chains, data)
    return 0.5 * data.n * _vterm(chains, ll).value


def cumulant(chains: ChainSet, data: Dataset, alpha: float) -> float:
    """T(alpha) = (1/n) sum_i log E_theta[p(X_i|theta)^alpha], evaluated in log space."""
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    ll = loglik_matrix(chains, data)
    if alpha == 0:
        return 0.0
    return float(np.mean(logmeanexp(alpha * ll, axis=0)))


def generalization_loss_estimate(
    chains: ChainSet,
    model: ModelSpec,
    test_n: int = 100_000,
    seed: int = 0,
    max_draws: int = 1000,
    chunk: int = 4096,
) -> Estimate:
    """Monte Carlo G_n = -E_X[log E_theta p(X|theta)] over ``test_n`` fresh draws from q.

    When the model knows L(theta0) in closed form the estimate is written as
    L(theta0) + mean_x[log p(x|theta0) - log p(x|X^n)], which has the same
    expectation and a far smaller variance. The predictive density uses at
    most ``max_draws`` evenly thinned posterior draws.
    """
    if test_n <= 0:
        raise ValueError("test_n must be positive")
    C, T = chains.chains, chains.iterations
    per = max(1, min(T, max_draws // C))
    idx = np.linspace(0, T - 1, per).round().astype(int)
    draws = chains.draws[:, idx, :].reshape(-1, chains.d)
    S = draws.shape[0]
    rng = np.random.default_rng(int(seed))
    xtest = model.sample_q(rng, int(test_n))
    control = model.analytic_L0 is not None
    terms = np.empty(test_n)
    g = np.zeros(S)
    for start in range(0, test_n, chunk):
        xc = xtest[start : start + chunk]
        ll = model.log_likelihood(xc, draws)  # (S, c)
        lse = logsumexp(ll, axis=0)
        lpred = lse - math.log(S)
        if control:
            l0 = model.log_likelihood(xc, model.theta0[None, :])[0]
            terms[start : start + chunk] = l0 - lpred
        else:
            terms[start : start + chunk] = -lpred
        g += -np.exp(ll - lse[None, :]).sum(axis=1) * S
    g /= test_n
    value = float(terms.mean()) + (model.analytic_L0 if control else 0.0)
    mc_x = float(terms.std(ddof=1) / math.sqrt(test_n)) if test_n > 1 else 0.0
    mc_theta = batch_means_mcse(g.reshape(C, per))
    return Estimate(value, math.hypot(mc_x, mc_theta))


def generalization_loss(
    chains: ChainSet, model: ModelSpec, test_n: int = 100_000, seed: int = 0, **kw
) -> float:
    return generalization_loss_estimate(chains, model, test_n, seed, **kw).value


def _mean_deviance(chains: ChainSet) -> Estimate:
    dev = -chains.loglik
    return Estimate(float(dev.mean()), batch_means_mcse(dev))


def wbic_estimate(
    model: ModelSpec, data: Dataset, config: McmcConfig, beta: Optional[float] = None
) -> Estimate:
    """E_beta[n L_n(theta)] at beta = 1/log n (or at an explicitly given beta)."""
    if beta is None:
        if data.n < 3:
            raise ValueError("WBIC needs n >= 3 so that log n > 1")
        beta = 1.0 / math.log(data.n)
    cfg = with_beta(config, beta)
    chains = run_mcmc(model, data, cfg)
    return _mean_deviance(chains)


def wbic(model: ModelSpec, data: Dataset, config: McmcConfig, beta: Optional[float] = None) -> float:
    return wbic_estimate(model, data, config, beta).value


def default_ti_ladder(rungs: int = 16, beta_min: float = 1e-3) -> tuple:
    return tuple(np.geomspace(beta_min, 1.0, rungs).tolist()[:-1]) + (1.0,)


def _check_ladder(ladder) -> tuple:
    lad = tuple(float(b) for b in ladder)
    if len(lad) < 8:
        raise LadderError("ladder must have at least 8 rungs")
    if any(b2 <= b1 for b1, b2 in zip(lad, lad[1:])):
        raise LadderError("non-monotone ladder")
    if lad[0] <= 0 or lad[-1] != 1.0:
        raise LadderError("ladder must lie in (0, 1] and end at 1")
    return lad


def prior_mean_deviance(model: ModelSpec, data: Dataset, samples: int, seed: int) -> Estimate:
    rng = np.random.default_rng(int(seed))
    th = model.sample_prior(rng, samples)
    dev = -model.total_log_likelihood(data.observations)(th)
    return Estimate(float(dev.mean()), float(dev.std(ddof=1) / math.sqrt(samples)))


@dataclass(frozen=True)
class FreeEnergyResult:
    value: float
    mcse: float
    betas: tuple
    integrand: tuple
    prior_endpoint: float
    quadrature_error: float = 0.0


def _trapezoid(b: np.ndarray, e: np.ndarray) -> tuple[float, np.ndarray]:
    db = np.diff(b)
    w = np.zeros_like(b)
    w[:-1] += db / 2
    w[1:] += db / 2
    return float(np.dot(w, e)), w


def free_energy_ti_details(
    model: ModelSpec,
    data: Dataset,
    ladder: Sequence[float] | None = None,
    config: McmcConfig | None = None,
    prior_samples: int = 20_000,
) -> FreeEnergyResult:
    """Thermodynamic integration F_n = int_0^1 E_beta[n L_n] d beta.

    One replica-exchange run samples every rung; the integral is the
    trapezoid rule over the ladder plus a final trapezoid panel on
    [0, beta_1] whose left value is the prior mean of n L_n. The reported
    standard error combines the Monte Carlo error with a discretisation
    estimate, |trapezoid - trapezoid on every other rung| / 3.
    """
    lad = _check_ladder(default_ti_ladder() if ladder is None else ladder)
    if data.n == 0:
        return FreeEnergyResult(0.0, 0.0, lad, tuple(0.0 for _ in lad), 0.0)
    config = config or McmcConfig()
    cfg = with_beta(config, 1.0, ladder=lad)
    sets = run_tempered(model, data, cfg)
    ests = [_mean_deviance(s) for s in sets]
    e0 = prior_mean_deviance(model, data, prior_samples, config.seed + 7919)
    b = np.concatenate([[0.0], lad])
    e = np.array([e0.value] + [x.value for x in ests])
    se = np.array([e0.mcse] + [x.mcse for x in ests])
    value, w = _trapezoid(b, e)
    # every other rung counted down from beta = 1, always keeping beta = 0
    coarse = np.unique(np.concatenate([[0], np.arange(b.size - 1, 0, -2)]))
    coarse_value, _ = _trapezoid(b[coarse], e[coarse])
    quad_err = abs(value - coarse_value) / 3.0
    mc = float(math.sqrt(np.sum((w * se) ** 2)))
    return FreeEnergyResult(
        value, math.hypot(mc, quad_err), lad, tuple(e[1:].tolist()), e0.value, quad_err
    )


def free_energy_ti(model, data, ladder=None, config=None) -> float:
    return free_energy_ti_details(model, data, ladder, config).value


def mle_fit(model: ModelSpec, data: Dataset, starts: int = 20) -> np.ndarray:
    """Multi-start bounded Nelder-Mead minimisation of L_n over the box."""
    if data.n < 1:
        raise UndefinedLossError("undefined empirical loss: empty dataset")
    total = model.total_log_likelihood(data.observations)
    n = data.n
    lo, hi = model.lower, model.upper

    def obj(th):
        return float(-total(np.clip(th, lo, hi)[None, :])[0] / n)

    pts = qmc.Halton(d=model.d, scramble=False).random(starts + 1)[1:]
    pts = lo + (hi - lo) * pts
    best_x, best_f = None, math.inf
    opts = {"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000 * model.d, "maxfev": 8000 * model.d}
    for p in pts:
        res = minimize(obj, p, method="Nelder-Mead", bounds=list(zip(lo, hi)), options=opts)
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    # restart from the incumbent to shrink the final simplex
    res = minimize(obj, best_x, method="Nelder-Mead", bounds=list(zip(lo, hi)), options=opts)
    if res.fun <= best_f:
        best_x = res.x
    return np.clip(np.asarray(best_x, dtype=float), lo, hi)


def sbic(model: ModelSpec, data: Dataset, lambda_hat: float, theta_hat=None) -> float:
    """n L_n(theta_hat) + lambda_hat log n with theta_hat the maximum likelihood fit."""
    if not lambda_hat > 0:
        raise ValueError("lambda_hat must be positive")
    th = mle_fit(model, data) if theta_hat is None else np.asarray(theta_hat, dtype=float)
    return data.n * empirical_loss(model, data, th) + float(lambda_hat) * math.log(data.n)


# ---------------------------------------------------------------------------
# report


@dataclass
class CriteriaReport:
    n: int
    T_n: float
    C_n: float
    W_n: float
    functional_variance: float
    nu_hat: float
    G_n: Optional[float] = None
    WBIC: Optional[float] = None
    F_TI: Optional[float] = None
    sBIC: Optional[float] = None
    T_mcse: float = 0.0
    C_mcse: float = 0.0
    W_mcse: float = 0.0
    V_mcse: float = 0.0
    nu_mcse: float = 0.0
    G_mcse: Optional[float] = None
    WBIC_mcse: Optional[float] = None
    F_TI_mcse: Optional[float] = None
    loo_unstable: bool = False
    Ln_theta0: Optional[float] = None
    L_theta0: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append("" if v is None else (str(v) if isinstance(v, (bool, int)) else repr(float(v))))
        return out


def criteria_report(
    model: ModelSpec,
    data: Dataset,
    config: McmcConfig | None = None,
    *,
    chains: ChainSet | None = None,
    test_n: int | None = 100_000,
    test_seed: int | None = None,
    with_wbic: bool = True,
    ladder: Sequence[float] | None = None,
    with_ti: bool = False,
    lambda_hat: float | None = None,
) -> CriteriaReport:
    """Compute every criterion for one dataset from a single posterior run (plus WBIC/TI runs)."""
    config = config or McmcConfig()
    if chains is None:
        chains = run_mcmc(model, data, with_beta(config, 1.0))
    ll = loglik_matrix(chains, data)
    t = _training(chains, ll)
    loo = _loo(chains, ll)
    w, v = _waic_from(chains, ll)
    rep = CriteriaReport(
        n=data.n,
        T_n=t.value,
        C_n=loo.value,
        W_n=w.value,
        functional_variance=v.value,
        nu_hat=0.5 * data.n * v.value,
        T_mcse=t.mcse,
        C_mcse=loo.mcse,
        W_mcse=w.mcse,
        V_mcse=v.mcse,
        nu_mcse=0.5 * data.n * v.mcse,
        loo_unstable=loo.unstable,
        Ln_theta0=empirical_loss(model, data, model.theta0),
        L_theta0=model.analytic_L0,
    )
    if test_n:
        g = generalization_loss_estimate(
            chains, model, test_n, config.seed + 104729 if test_seed is None else test_seed
        )
        rep.G_n, rep.G_mcse = g.value, g.mcse
    if with_wbic and data.n >= 3:
        wb = wbic_estimate(model, data, config)
        rep.WBIC, rep.WBIC_mcse = wb.value, wb.mcse
    if with_ti:
        fe = free_energy_ti_details(model, data, ladder, config)
        rep.F_TI, rep.F_TI_mcse = fe.value, fe.mcse
    lam = lambda_hat if lambda_hat is not None else model.known_lambda
    if lam is not None:
        rep.sBIC = sbic(model, data, float(lam))
    return rep
