import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import qmc

from sltkit import zoo
from sltkit.zoo import empirical_K, empirical_loss, generate_data, make_model

MODELS = ["regular", "product", "mixture", "conjugate"]


def test_empty_dataset():
    data = generate_data(zoo.regular_gaussian(1), 0, 7)
    assert data.n == 0 and data.observations.shape == (0, 1)


def test_product_mean_data_moments():
    x = generate_data(zoo.product_mean(), 100_000, 1).observations.ravel()
    assert abs(x.mean()) < 3 / math.sqrt(x.size)
    assert abs(x.var(ddof=1) - 1) < 0.02


@pytest.mark.parametrize("name", MODELS)
def test_generate_deterministic(name):
    m = make_model(name)
    a = generate_data(m, 50, 3).observations
    b = generate_data(m, 50, 3).observations
    assert a.tobytes() == b.tobytes()


def test_empirical_loss_standard_normal_at_zero():
    m = zoo.regular_gaussian(1)
    data = zoo.Dataset(np.array([[0.0]]), seed=0)
    assert empirical_loss(m, data, [0.0]) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


def test_empirical_loss_empty_raises():
    m = zoo.product_mean()
    with pytest.raises(ValueError, match="undefined empirical loss"):
        empirical_loss(m, generate_data(m, 0, 0), [0.0, 0.0])


def test_product_mean_hyperbola_optimal():
    m = zoo.product_mean()
    data = generate_data(m, 30, 2)
    L0 = empirical_loss(m, data, m.theta0)
    for th in ([0.0, 1.7], [-1.3, 0.0], [0.0, -2.0]):
        assert empirical_loss(m, data, th) == L0


@pytest.mark.parametrize("name", MODELS)
def test_loss_decomposition(name):
    m = make_model(name)
    data = generate_data(m, 40, 5)
    rng = np.random.default_rng(0)
    th = m.sample_prior(rng, 100)
    direct = np.array([empirical_loss(m, data, t) for t in th])
    decomposed = empirical_loss(m, data, m.theta0) + empirical_K(m, data, th)
    np.testing.assert_allclose(direct, decomposed, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["regular", "product", "mixture", "conjugate"])
def test_K_nonnegative_and_zero_on_optimum(name):
    m = make_model(name)
    pts = qmc.Halton(d=m.d, seed=0).random(10_000)
    th = m.lower + (m.upper - m.lower) * pts
    assert np.all(m.analytic_K(th) >= -1e-12)
    assert m.analytic_K(m.theta0[None, :])[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("name", ["regular", "product", "mixture", "conjugate"])
def test_empirical_K_converges(name):
    m = make_model(name)
    data = generate_data(m, 100_000, 11)
    th = m.sample_prior(np.random.default_rng(4), 5)
    f = m.f(data.observations, th)  # (S, n)
    Kn = f.mean(axis=1)
    se = f.std(axis=1, ddof=1) / math.sqrt(data.n)
    K = m.analytic_K(th)
    assert np.all(np.abs(Kn - K) < 5 * se + 1e-12)


@pytest.mark.parametrize("name", MODELS)
def test_L_equals_L0_plus_K(name):
    m = make_model(name)
    x = m.sample_q(np.random.default_rng(9), 200_000)
    th = m.sample_prior(np.random.default_rng(10), 4)
    ll = m.log_likelihood(x, th)
    L = -ll.mean(axis=1)
    se = ll.std(axis=1, ddof=1) / math.sqrt(x.shape[0])
    assert np.all(np.abs(L - (m.analytic_L0 + m.analytic_K(th))) < 5 * se)


def test_relatively_finite_variance_product_mean():
    m = zoo.product_mean()
    rng = np.random.default_rng(3)
    th = m.sample_prior(rng, 1000)
    K = m.analytic_K(th)
    th, K = th[K > 1e-8], K[K > 1e-8]
    # E_X f^2 for f = c(c - 2x)/2 with c = ab, X ~ N(0,1), evaluated by Gauss-Hermite
    x, w = np.polynomial.hermite_e.hermegauss(40)
    w = w / w.sum()
    f = m.f(x[:, None], th)
    ratio = (f**2 @ w) / K
    c = th[:, 0] * th[:, 1]
    np.testing.assert_allclose(ratio, 2 + c**2 / 2, rtol=1e-10)
    assert ratio.max() <= 10.0


@pytest.mark.parametrize("name", MODELS)
def test_prior_normalized(name):
    m = make_model(name)
    if m.d == 1:
        val, _ = integrate.quad(lambda t: math.exp(m.log_prior(np.array([[t]]))[0]), m.lower[0], m.upper[0], points=[0.0], limit=200)
    else:
        val, _ = integrate.dblquad(
            lambda b, a: math.exp(m.log_prior(np.array([[a, b]]))[0]),
            m.lower[0], m.upper[0], m.lower[1], m.upper[1],
        )
    assert 0.999 <= val <= 1.001


def test_dataset_roundtrip(tmp_path):
    m = zoo.product_mean()
    data = generate_data(m, 25, 8)
    csv_path, meta = zoo.save_dataset(data, tmp_path / "d.csv")
    assert csv_path.read_text().splitlines()[0] == "x1"
    back = zoo.load_dataset(csv_path)
    assert back.observations.tobytes() == data.observations.tobytes()
    assert back.seed == 8 and back.model == data.model


def test_known_invariants():
    assert zoo.regular_gaussian(3).known_lambda == 1.5
    pm = zoo.product_mean()
    assert pm.known_lambda == 0.5 and pm.known_m == 2
    assert zoo.gaussian_mixture2().known_lambda is None


def test_unknown_model():
    with pytest.raises(ValueError, match="unknown model"):
        make_model("nope")
