"""Model/prior/truth triples with analytic ground truth where it exists.

Every model works on a compact box with the prior renormalised over the box.
Likelihood functions are vectorised: ``log_likelihood(x, theta)`` takes
observations of shape ``(n, N)`` and parameters of shape ``(S, d)`` and
returns the ``(S, n)`` matrix of ``log p(x_i | theta_s)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, roots_hermitenorm

LOG_2PI = math.log(2.0 * math.pi)

Array = np.ndarray


def _as_theta(theta) -> np.ndarray:
    return np.atleast_2d(np.asarray(theta, dtype=float))


def _as_obs(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class ModelSpec:
    """A statistical model p(x|theta), a prior pi(theta) on a box and a truth q(x).

    Attributes
    ----------
    name, params
        Registry name and constructor arguments; ``make_model(name, **params)``
        rebuilds an equal model (used by worker processes and manifests).
    d, N
        Parameter and observation dimensions.
    lower, upper
        Box bounds of the parameter domain.
    theta0
        Canonical representative of the optimal set.
    analytic_L0
        L(theta0) = -E_q[log p(X|theta0)], when known in closed form.
    analytic_K
        K(theta) = E_q[log p(X|theta0)/p(X|theta)], vectorised over ``(S, d)``.
    """

    name: str
    params: dict
    d: int
    N: int
    lower: np.ndarray
    upper: np.ndarray
    log_likelihood: Callable[[Array, Array], Array]
    log_prior: Callable[[Array], Array]
    sample_prior: Callable[[np.random.Generator, int], Array]
    sample_q: Callable[[np.random.Generator, int], Array]
    theta0: np.ndarray
    analytic_L0: Optional[float] = None
    analytic_K: Optional[Callable[[Array], Array]] = None
    known_lambda: Optional[Fraction] = None
    known_m: Optional[int] = None
    uniform_prior: bool = False
    # builds a fast theta -> sum_i log p(x_i|theta) for fixed data
    total_factory: Optional[Callable[[Array], Callable[[Array], Array]]] = field(
        default=None, repr=False
    )

    def contains(self, theta) -> np.ndarray:
        th = _as_theta(theta)
        return np.all((th >= self.lower) & (th <= self.upper), axis=-1)

    def total_log_likelihood(self, x) -> Callable[[Array], Array]:
        """Return ``theta (S, d) -> sum_i log p(x_i|theta)`` for the fixed data ``x``."""
        x = _as_obs(x)
        if self.total_factory is not None:
            return self.total_factory(x)
        return lambda theta: self.log_likelihood(x, _as_theta(theta)).sum(axis=1)

    def f(self, x, theta) -> np.ndarray:
        """Log density ratio f(x, theta) = log p(x|theta0) - log p(x|theta), shape (S, n)."""
        x = _as_obs(x)
        return self.log_likelihood(x, self.theta0[None, :]) - self.log_likelihood(
            x, _as_theta(theta)
        )


@dataclass(frozen=True)
class Dataset:
    """n i.i.d. observations from the model's truth, with the seed that made them."""

    observations: np.ndarray
    seed: int
    model: str = ""

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float, copy=True)
        if obs.ndim == 1:
            obs = obs[:, None]
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def n(self) -> int:
        return int(self.observations.shape[0])

    @property
    def N(self) -> int:
        return int(self.observations.shape[1])


class UndefinedLossError(ValueError):
    pass


def generate_data(model: ModelSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` observations from q, deterministically in ``seed``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(int(seed))
    if n == 0:
        obs = np.empty((0, model.N))
    else:
        obs = model.sample_q(rng, n)
    return Dataset(obs, int(seed), model.name)


def empirical_loss(model: ModelSpec, data: Dataset, theta) -> float | np.ndarray:
    """L_n(theta) = -(1/n) sum_i log p(X_i|theta).

    Returns a float for a single parameter vector and an array for a batch.
    """
    if data.n == 0:
        raise UndefinedLossError("undefined empirical loss: empty dataset")
    th = np.asarray(theta, dtype=float)
    tot = model.total_log_likelihood(data.observations)(_as_theta(th))
    out = -tot / data.n
    return float(out[0]) if th.ndim == 1 else out


def empirical_K(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """K_n(theta) = (1/n) sum_i f(X_i, theta), shape (S,)."""
    if data.n == 0:
        raise UndefinedLossError("undefined empirical loss: empty dataset")
    return model.f(data.observations, theta).mean(axis=1)


# ---------------------------------------------------------------------------
# dataset I/O


def save_dataset(data: Dataset, path) -> tuple[Path, Path]:
    """Write ``path`` as CSV (header x1..xN) and a ``{model, n, seed}`` manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(data.N)])
        for row in data.observations:
            w.writerow([repr(float(v)) for v in row])
    manifest = path.with_suffix(".json")
    manifest.write_text(
        json.dumps({"model": data.model, "n": data.n, "seed": data.seed}, indent=2) + "\n"
    )
    return path, manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    obs = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(
        len(body), len(header)
    )
    meta = {"model": "", "seed": 0}
    mpath = path.with_suffix(".json")
    if mpath.exists():
        meta.update(json.loads(mpath.read_text()))
    return Dataset(obs, int(meta["seed"]), str(meta["model"]))


# ---------------------------------------------------------------------------
# zoo constructors


def _gaussian_total_factory(mean_fn: Callable[[Array], Array]):
    """Sufficient-statistic fast path for p(x|theta) = N(x; mean_fn(theta), I)."""

    def factory(x: Array):
        n, N = x.shape
        s1 = x.sum(axis=0)
        s2 = float(np.sum(x * x))
        const = -0.5 * n * N * LOG_2PI

        def total(theta):
            mu = mean_fn(_as_theta(theta))
            return const - 0.5 * (s2 - 2.0 * mu @ s1 + n * np.sum(mu * mu, axis=-1))

        return total

    return factory


def _gaussian_loglik(mean_fn: Callable[[Array], Array]):
    def loglik(x, theta):
        x = _as_obs(x)
        mu = mean_fn(_as_theta(theta))  # (S, N)
        diff = x[None, :, :] - mu[:, None, :]
        return -0.5 * x.shape[1] * LOG_2PI - 0.5 * np.sum(diff * diff, axis=-1)

    return loglik


def _uniform_box(lower, upper):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    log_vol = float(np.sum(np.log(upper - lower)))

    def log_prior(theta):
        th = _as_theta(theta)
        inside = np.all((th >= lower) & (th <= upper), axis=-1)
        return np.where(inside, -log_vol, -np.inf)

    def sample(rng, size):
        return lower + (upper - lower) * rng.random((size, lower.size))

    return log_prior, sample


def regular_gaussian(d: int = 2, theta_star=None, half_width: float = 3.0) -> ModelSpec:
    """p(x|theta) = N(x; theta, I_d), q = N(theta_star, I_d), uniform prior on a box.

    Observations live in R^d (one coordinate per parameter).
    """
    d = int(d)
    star = np.zeros(d) if theta_star is None else np.asarray(theta_star, dtype=float).reshape(d)
    lower, upper = star - half_width, star + half_width
    log_prior, sample_prior = _uniform_box(lower, upper)
    mean_fn = lambda th: th  # noqa: E731

    def sample_q(rng, n):
        return star + rng.standard_normal((n, d))

    def K(theta):
        th = _as_theta(theta)
        return 0.5 * np.sum((th - star) ** 2, axis=-1)

    return ModelSpec(
        name="regular",
        params={"d": d, "theta_star": star.tolist(), "half_width": float(half_width)},
        d=d,
        N=d,
        lower=lower,
        upper=upper,
        log_likelihood=_gaussian_loglik(mean_fn),
        log_prior=log_prior,
        sample_prior=sample_prior,
        sample_q=sample_q,
        theta0=star.copy(),
        analytic_L0=0.5 * d * (LOG_2PI + 1.0),
        analytic_K=K,
        known_lambda=Fraction(d, 2),
        known_m=1,
        uniform_prior=True,
        total_factory=_gaussian_total_factory(mean_fn),
    )


def product_mean(scale: float = 1.0, half_width: float = 2.0) -> ModelSpec:
    """p(x|a,b) = N(x; scale*a*b, 1), q = N(0,1), uniform prior on [-2,2]^2.

    K(a,b) = scale^2 (ab)^2 / 2 vanishes on the whole cross ab = 0.
    """
    scale = float(scale)
    lower = np.full(2, -half_width)
    upper = np.full(2, half_width)
    log_prior, sample_prior = _uniform_box(lower, upper)

    def mean_fn(th):
        return scale * (th[:, 0] * th[:, 1])[:, None]

    def K(theta):
        th = _as_theta(theta)
        return 0.5 * (scale * th[:, 0] * th[:, 1]) ** 2

    return ModelSpec(
        name="product",
        params={"scale": scale, "half_width": float(half_width)},
        d=2,
        N=1,
        lower=lower,
        upper=upper,
        log_likelihood=_gaussian_loglik(mean_fn),
        log_prior=log_prior,
        sample_prior=sample_prior,
        sample_q=lambda rng, n: rng.standard_normal((n, 1)),
        theta0=np.zeros(2),
        analytic_L0=0.5 * (LOG_2PI + 1.0),
        analytic_K=K,
        known_lambda=Fraction(1, 2),
        known_m=2,
        uniform_prior=True,
        total_factory=_gaussian_total_factory(mean_fn),
    )


_GH_X, _GH_W = roots_hermitenorm(80)
_GH_W = _GH_W / _GH_W.sum()


def gaussian_mixture2(b_max: float = 3.0) -> ModelSpec:
    """p(x|w,b) = (1-w) N(x;0,1) + w N(x;b,1), q = N(0,1), w in [0,1], b in [-b_max, b_max].

    The RLCT is not supplied; K is evaluated by 80-point Gauss-Hermite quadrature.
    """
    lower = np.array([0.0, -b_max])
    upper = np.array([1.0, b_max])
    log_prior, sample_prior = _uniform_box(lower, upper)

    def loglik(x, theta):
        x = _as_obs(x)[:, 0]
        th = _as_theta(theta)
        w = th[:, 0:1]
        b = th[:, 1:2]
        # log[(1-w) + w exp(b x - b^2/2)] + log N(x;0,1)
        z = b * x[None, :] - 0.5 * b * b
        with np.errstate(divide="ignore"):
            mix = np.logaddexp(np.log(np.clip(1 - w, 0, None)), np.log(np.clip(w, 0, None)) + z)
        return mix - 0.5 * LOG_2PI - 0.5 * x[None, :] ** 2

    def K(theta):
        th = _as_theta(theta)
        w = th[:, 0:1]
        b = th[:, 1:2]
        z = b * _GH_X[None, :] - 0.5 * b * b
        with np.errstate(divide="ignore"):
            r = np.logaddexp(np.log(np.clip(1 - w, 0, None)), np.log(np.clip(w, 0, None)) + z)
        return -(r @ _GH_W)

    return ModelSpec(
        name="mixture",
        params={"b_max": float(b_max)},
        d=2,
        N=1,
        lower=lower,
        upper=upper,
        log_likelihood=loglik,
        log_prior=log_prior,
        sample_prior=sample_prior,
        sample_q=lambda rng, n: rng.standard_normal((n, 1)),
        theta0=np.zeros(2),
        analytic_L0=0.5 * (LOG_2PI + 1.0),
        analytic_K=K,
        uniform_prior=True,
    )


@dataclass(frozen=True)
class ConjugateClosedForm:
    """Exact tempered posterior, predictive and evidence for the conjugate normal model."""

    sigma0: float
    true_mean: float

    def posterior(self, x, beta: float = 1.0) -> tuple[float, float]:
        x = np.asarray(x, dtype=float).ravel()
        prec = 1.0 / self.sigma0**2 + beta * x.size
        return float(beta * x.sum() / prec), float(1.0 / prec)

    def tempered_free_energy(self, x, beta: float = 1.0) -> float:
        """-log int prod p(x_i|theta)^beta pi(theta) dtheta (untruncated prior)."""
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        s1, s2 = x.sum(), float(np.sum(x * x))
        s0 = self.sigma0**2
        return float(
            0.5 * beta * n * LOG_2PI
            + 0.5 * math.log1p(beta * n * s0)
            + 0.5 * (beta * s2 - beta**2 * s1**2 / (beta * n + 1.0 / s0))
        )

    def free_energy(self, x) -> float:
        return self.tempered_free_energy(x, 1.0)

    def tempered_mean_deviance(self, x, beta: float) -> float:
        """E_beta[n L_n(theta)] under the exact tempered posterior."""
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        m, v = self.posterior(x, beta)
        return float(0.5 * n * LOG_2PI + 0.5 * (np.sum((x - m) ** 2) + n * v))

    def predictive_logpdf(self, xnew, x) -> np.ndarray:
        m, v = self.posterior(x)
        xnew = np.asarray(xnew, dtype=float)
        return -0.5 * np.log(2 * math.pi * (1 + v)) - 0.5 * (xnew - m) ** 2 / (1 + v)

    def generalization_loss(self, x) -> float:
        """G_n = -E_q log p(X|X^n) with q = N(true_mean, 1)."""
        m, v = self.posterior(x)
        return float(
            0.5 * math.log(2 * math.pi * (1 + v)) + 0.5 * (1 + (self.true_mean - m) ** 2) / (1 + v)
        )

    def training_loss(self, x) -> float:
        return float(-np.mean(self.predictive_logpdf(x, x)))

    def loocv(self, x) -> float:
        """Importance-sampling LOOCV (1/n) sum log E[1/p(X_i|theta)] under the exact posterior."""
        x = np.asarray(x, dtype=float).ravel()
        m, v = self.posterior(x)
        if v >= 1.0:
            return math.inf
        # E[exp((X-theta)^2/2)] for theta ~ N(m, v)
        val = 0.5 * LOG_2PI - 0.5 * math.log1p(-v) + 0.5 * (x - m) ** 2 / (1 - v)
        return float(np.mean(val))

    def loocv_refit(self, x) -> float:
        """-(1/n) sum log p(X_i | X^n without X_i) from n exact leave-one-out posteriors."""
        x = np.asarray(x, dtype=float).ravel()
        out = 0.0
        for i in range(x.size):
            rest = np.delete(x, i)
            out += float(self.predictive_logpdf(x[i], rest))
        return -out / x.size

    def functional_variance(self, x) -> float:
        """(1/n) sum_i V_theta[log p(X_i|theta)] under the exact posterior."""
        x = np.asarray(x, dtype=float).ravel()
        m, v = self.posterior(x)
        mu = m - x
        return float(np.mean(mu * mu * v + 0.5 * v * v))

    def waic(self, x) -> float:
        return self.training_loss(x) + self.functional_variance(x)


def conjugate_normal(sigma0: float = 1.0, true_mean: float = 0.3, half_width: float = 20.0) -> ModelSpec:
    """p(x|theta) = N(x; theta, 1) with prior N(theta; 0, sigma0^2) truncated to a wide box.

    The box is wide enough that the truncation is below double precision for
    every quantity the closed forms in :class:`ConjugateClosedForm` describe.
    """
    sigma0 = float(sigma0)
    half = float(half_width) * max(1.0, sigma0)
    lower, upper = np.array([-half]), np.array([half])
    log_mass = float(np.log(ndtr(half / sigma0) - ndtr(-half / sigma0)))

    def log_prior(theta):
        th = _as_theta(theta)[:, 0]
        lp = -0.5 * LOG_2PI - math.log(sigma0) - 0.5 * (th / sigma0) ** 2 - log_mass
        return np.where((th >= -half) & (th <= half), lp, -np.inf)

    def sample_prior(rng, size):
        out = np.empty(size)
        filled = 0
        while filled < size:
            z = sigma0 * rng.standard_normal(size - filled)
            z = z[np.abs(z) <= half]
            out[filled : filled + z.size] = z
            filled += z.size
        return out[:, None]

    mean_fn = lambda th: th  # noqa: E731
    spec = ModelSpec(
        name="conjugate",
        params={"sigma0": sigma0, "true_mean": float(true_mean), "half_width": float(half_width)},
        d=1,
        N=1,
        lower=lower,
        upper=upper,
        log_likelihood=_gaussian_loglik(mean_fn),
        log_prior=log_prior,
        sample_prior=sample_prior,
        sample_q=lambda rng, n: true_mean + rng.standard_normal((n, 1)),
        theta0=np.array([float(true_mean)]),
        analytic_L0=0.5 * (LOG_2PI + 1.0),
        analytic_K=lambda theta: 0.5 * (_as_theta(theta)[:, 0] - true_mean) ** 2,
        known_lambda=Fraction(1, 2),
        known_m=1,
        total_factory=_gaussian_total_factory(mean_fn),
    )
    return spec


def conjugate_closed_form(model: ModelSpec) -> ConjugateClosedForm:
    if model.name != "conjugate":
        raise ValueError("closed forms exist only for the conjugate model")
    return ConjugateClosedForm(model.params["sigma0"], model.params["true_mean"])


_REGISTRY = {
    "regular": regular_gaussian,
    "product": product_mean,
    "mixture": gaussian_mixture2,
    "conjugate": conjugate_normal,
}

ALIASES = {
    "RegularGaussian": "regular",
    "ProductMean": "product",
    "GaussianMixture2": "mixture",
    "ConjugateNormal": "conjugate",
}


def model_names() -> list[str]:
    return sorted(_REGISTRY)


def make_model(name: str, **params) -> ModelSpec:
    key = ALIASES.get(name, name)
    try:
        ctor = _REGISTRY[key]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {model_names()}") from None
    return ctor(**params)


def ln_theta0(model: ModelSpec, data: Dataset) -> float:
    """L_n at the canonical optimal parameter."""
    return empirical_loss(model, data, model.theta0)


__all__ = [
    "ModelSpec",
    "Dataset",
    "UndefinedLossError",
    "generate_data",
    "empirical_loss",
    "empirical_K",
    "save_dataset",
    "load_dataset",
    "regular_gaussian",
    "product_mean",
    "gaussian_mixture2",
    "conjugate_normal",
    "conjugate_closed_form",
    "ConjugateClosedForm",
    "make_model",
    "model_names",
    "ln_theta0",
]
