import math
from dataclasses import replace

import numpy as np
import pytest

import oracles as orc
from sltkit import sampler, zoo
from sltkit.sampler import ChainSet, McmcConfig, diagnostics, posterior_expectation, run_mcmc
from sltkit.zoo import generate_data


def _cfg(**kw):
    base = dict(chains=4, draws_per_chain=2000, seed=1)
    base.update(kw)
    return McmcConfig(**base)


def test_conjugate_posterior_moments():
    m = zoo.conjugate_normal()
    data = generate_data(m, 50, 2)
    ch = run_mcmc(m, data, _cfg())
    mean, se = posterior_expectation(ch, lambda th: th[:, 0])
    pm, pv = orc.conj_posterior(data.observations)
    assert abs(mean - pm) < 4 * se
    var = ch.flat()[:, 0].var()
    assert abs(var / pv - 1) < 0.10


def test_same_seed_identical_draws():
    m = zoo.product_mean()
    data = generate_data(m, 30, 4)
    a = run_mcmc(m, data, _cfg(draws_per_chain=300))
    b = run_mcmc(m, data, _cfg(draws_per_chain=300))
    assert a.draws.tobytes() == b.draws.tobytes()


def test_draws_inside_box_and_counts():
    m = zoo.product_mean()
    ch = run_mcmc(m, generate_data(m, 20, 1), _cfg(draws_per_chain=500))
    assert ch.draws.shape == (4, 500, 2)
    assert np.all(ch.draws >= m.lower) and np.all(ch.draws <= m.upper)


def test_product_mean_K_order_one_over_n():
    m = zoo.product_mean()
    n = 200
    ch = run_mcmc(m, generate_data(m, n, 6), _cfg())
    k, _ = posterior_expectation(ch, m.analytic_K)
    assert k < 10 / n


def test_constant_function_and_point_mass():
    m = zoo.product_mean()
    data = generate_data(m, 5, 0)
    ch = run_mcmc(m, data, _cfg(draws_per_chain=100))
    assert posterior_expectation(ch, lambda th: np.ones(th.shape[0])) == (1.0, 0.0)
    pt = ChainSet.point_mass([0.4, -0.3], m)
    x1 = data.observations[:1]
    val, se = posterior_expectation(pt, lambda th: m.log_likelihood(x1, th)[:, 0])
    assert val == m.log_likelihood(x1, np.array([[0.4, -0.3]]))[0, 0] and se == 0.0


def test_empty_chainset_raises():
    empty = ChainSet(np.empty((2, 0, 1)), np.zeros(2), 1.0, 0)
    with pytest.raises(ValueError):
        posterior_expectation(empty, lambda th: th[:, 0])


def test_reflection_is_symmetric_fold():
    x = np.array([-0.5, 0.2, 1.3, 2.6, -3.1])
    r = sampler.reflect(x, 0.0, 1.0)
    assert np.all((r >= 0) & (r <= 1))
    np.testing.assert_allclose(r, [0.5, 0.2, 0.7, 0.6, 0.9], atol=1e-12)


def test_detailed_balance_three_states():
    # Metropolis on {0,1,2} with uniform proposals among the other two states
    pi = np.array([0.2, 0.3, 0.5])
    rng = np.random.default_rng(123)
    steps = 1_000_000
    walkers = 1000
    state = rng.choice(3, size=walkers, p=pi)
    counts = np.zeros((3, 3))
    for _ in range(steps // walkers):
        prop = (state + rng.integers(1, 3, size=walkers)) % 3
        acc = sampler.metropolis_accept(np.log(pi[state]), np.log(pi[prop]), np.log(rng.random(walkers)))
        new = np.where(acc, prop, state)
        np.add.at(counts, (state, new), 1)
        state = new
    P = np.array([[0 if i == j else 0.5 * min(1, pi[j] / pi[i]) for j in range(3)] for i in range(3)])
    P[np.diag_indices(3)] = 1 - P.sum(axis=1)
    expected = steps * pi[:, None] * P
    sd = np.sqrt(expected * (1 - expected / steps))
    assert np.all(np.abs(counts - expected) < 3 * sd + 1)
    # flows balance in both directions
    assert np.all(np.abs(counts - counts.T) < 3 * np.sqrt(counts + counts.T) + 1)


def test_rhat_iid_and_ess_bound():
    rng = np.random.default_rng(0)
    ch = ChainSet(rng.standard_normal((4, 1000, 2)), np.ones(4), 1.0, 0)
    diag = diagnostics(ch)
    assert np.all((diag.rhat >= 0.99) & (diag.rhat <= 1.02))
    assert np.all(diag.ess <= 4000 + 1e-9)
    assert not diag.flagged


def test_rhat_flags_disjoint_modes():
    m = zoo.product_mean()
    x = generate_data(m, 200, 3).observations + 1.5
    data = zoo.Dataset(x, seed=3)
    init = np.array([[1.2, 1.2], [-1.2, -1.2]])
    ch = run_mcmc(m, data, McmcConfig(chains=2, draws_per_chain=1000, seed=0), initial=init)
    diag = diagnostics(ch)
    assert diag.flagged and np.max(diag.rhat) > 1.1


def test_diagnostics_preconditions():
    with pytest.raises(ValueError):
        diagnostics(ChainSet(np.zeros((1, 100, 1)), np.ones(1), 1.0, 0))
    with pytest.raises(ValueError):
        diagnostics(ChainSet(np.zeros((2, 5, 1)), np.ones(2), 1.0, 0))


def test_adaptation_failure():
    base = zoo.product_mean()

    def spike(x, th):
        ok = np.all(np.abs(th - 0.5) < 1e-12, axis=1)
        return np.where(ok, 0.0, -np.inf)[:, None] + np.zeros((1, x.shape[0]))

    m = replace(base, log_likelihood=spike, total_factory=None)
    data = generate_data(base, 10, 0)
    init = np.full((2, 2), 0.5)
    with pytest.raises(sampler.SamplerError, match="adaptation failure"):
        run_mcmc(m, data, McmcConfig(chains=2, draws_per_chain=20, warmup=10, seed=0), initial=init)
    assert run_mcmc(base, data, McmcConfig(chains=2, draws_per_chain=50, seed=0)).draws.shape == (2, 50, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(chains=1)
    with pytest.raises(ValueError):
        McmcConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        McmcConfig(beta=0.5, ladder=(0.25, 1.0))
    with pytest.raises(ValueError):
        McmcConfig(beta=1.0, ladder=(0.5, 0.25, 1.0))
    assert McmcConfig(draws_per_chain=100).n_warmup == 50


@pytest.mark.parametrize("name,n", [("regular1", 100), ("product", 200), ("mixture", 200), ("conjugate", 150)])
def test_grid_quadrature_oracle(name, n):
    if name == "regular1":
        m = zoo.regular_gaussian(1)
    else:
        m = zoo.make_model(name)
    data = generate_data(m, n, 17)
    x = data.observations.ravel()
    if name == "product":
        logdens = lambda g: orc.gaussian_mean_loglik(g[:, 0] * g[:, 1], x)
        pts = 1201
    elif name == "mixture":
        logdens = lambda g: orc.mixture_loglik(g, x)
        pts = 301
    elif name == "conjugate":
        logdens = lambda g: orc.gaussian_mean_loglik(g[:, 0], x) - 0.5 * g[:, 0] ** 2
        pts = 20001
    else:
        logdens = lambda g: orc.gaussian_mean_loglik(g[:, 0], x)
        pts = 20001
    grid, w = orc.grid_posterior(logdens, m.lower, m.upper, points=pts)
    ch = run_mcmc(m, data, _cfg(draws_per_chain=4000, seed=5))
    fns = [lambda th, j=j: th[:, j] for j in range(m.d)] + [m.analytic_K]
    for f in fns:
        exact = float(np.dot(w, f(grid)))
        est, se = posterior_expectation(ch, f)
        assert abs(est - exact) < 4 * se + 1e-4 * abs(exact), (name, est, exact, se)


def test_exchange_preserves_top_marginal():
    m = zoo.conjugate_normal()
    data = generate_data(m, 40, 8)
    cfg = McmcConfig(chains=4, draws_per_chain=3000, seed=2, beta=1.0, ladder=(0.25, 0.5, 1.0))
    ch = run_mcmc(m, data, cfg)
    pm, pv = orc.conj_posterior(data.observations)
    mean, se = posterior_expectation(ch, lambda th: th[:, 0])
    assert abs(mean - pm) < 4 * se
    var, vse = posterior_expectation(ch, lambda th: (th[:, 0] - pm) ** 2)
    assert abs(var - pv) < 4 * vse


def test_tempered_rungs_match_closed_form():
    m = zoo.conjugate_normal()
    data = generate_data(m, 40, 8)
    lad = (0.1, 0.3, 1.0)
    sets = sampler.run_tempered(m, data, McmcConfig(chains=4, draws_per_chain=3000, seed=9, ladder=lad))
    for beta, s in zip(lad, sets):
        pm, _ = orc.conj_posterior(data.observations, beta=beta)
        mean, se = posterior_expectation(s, lambda th: th[:, 0])
        assert s.beta == beta
        assert abs(mean - pm) < 4 * se


def test_chain_csv_roundtrip(tmp_path):
    m = zoo.product_mean()
    ch = run_mcmc(m, generate_data(m, 10, 1), _cfg(draws_per_chain=50))
    p = sampler.save_chains_csv(ch, tmp_path / "c.csv")
    assert p.read_text().splitlines()[0] == "chain,iter,theta1,theta2"
    back = sampler.load_chains_csv(p)
    assert back.draws.tobytes() == ch.draws.tobytes()
    d = sampler.diagnostics_json(ch)
    assert set(d) >= {"rhat", "ess", "accept_rate"}
