"""Replicate-level law examples for the criteria, RLCT and renormalized operations (slow)."""

import math

import numpy as np
import pytest

from conftest import MASTER_SEED, run_config
from sltkit import harness, renormalized, rlct, zoo
from sltkit.sampler import McmcConfig, run_mcmc

pytestmark = pytest.mark.slow


def _col(raw, est, n=None):
    return np.array([float(r["value"]) for r in raw if r["estimator"] == est and (n is None or int(r["n"]) == n)])


def _ms(v):
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _t_law_gap(raw, lam):
    # n(T - Ln0) + 2 nu should equal lam; the pairing keeps the per-replicate correlation
    d = _col(raw, "nT_excess") + 2 * _col(raw, "nu")
    m, se = _ms(d)
    return abs(m - lam) / se


def test_product_training_law(product400):
    _, raw = product400
    assert _t_law_gap(raw, 0.5) < 2


def test_product_loo_law(product400):
    _, raw = product400
    m, _ = _ms(_col(raw, "nC_excess"))
    assert 0.35 <= m <= 0.65


def test_product_generalization_within_30pct(product400):
    _, raw = product400
    m, _ = _ms(_col(raw, "nG_excess"))
    assert 0.35 <= m <= 0.65


def test_loo_waic_gap(product400):
    _, raw = product400
    gap = np.abs(_col(raw, "nC_excess") - _col(raw, "nW_excess")).mean()
    assert gap < 0.2


def test_g_c_w_means_pairwise(product400):
    _, raw = product400
    means = [_col(raw, e).mean() for e in ("nG_excess", "nC_excess", "nW_excess")]
    assert max(means) - min(means) < 0.5


def test_regular_nu_matches_training_law(tmp_path_factory):
    _, raw = run_config(
        tmp_path_factory, "reg1_nu", model={"name": "regular", "params": {"d": 1}}, n_values=[400],
        replicates=200, estimators=["T", "nu"],
    )
    assert _t_law_gap(raw, 0.5) < 2


def test_product_nu_stable_in_n(tmp_path_factory):
    _, raw = run_config(tmp_path_factory, "prod_nu", model="product", n_values=[200, 800], replicates=100, estimators=["nu"])
    a, b = _col(raw, "nu", 200).mean(), _col(raw, "nu", 800).mean()
    assert abs(b / a - 1) < 0.25


@pytest.mark.parametrize(
    "model, lo, hi",
    [(zoo.regular_gaussian(d=2), 0.85, 1.15), (zoo.product_mean(), 0.38, 0.62)],
    ids=["regular_d2", "product"],
)
def test_two_temperature_lambda_bands(model, lo, hi):
    lam, _ = rlct.estimate_rlct_wbic(model, 1000, 50, McmcConfig(seed=MASTER_SEED))
    assert lo <= lam <= hi


def test_bridge_to_sampled_posterior():
    m = zoo.product_mean()
    n = 1600
    grid = renormalized.product_mean_grid()
    sampled, renorm = [], []
    for r in range(100):
        seed = harness.replicate_seed(MASTER_SEED, n, r)
        data = zoo.generate_data(m, n, seed)
        ch = run_mcmc(m, data, McmcConfig(seed=harness.substream(seed, 1)))
        sampled.append(n * float(np.mean(m.analytic_K(ch.draws.reshape(-1, m.d)))))
        renorm.append(float(renormalized.moments([[renormalized.matched_xi(data.observations)]], grid, [1.0])[0, 0]))
    # exact finite-n expectation of this ratio is ~1.25: the m = 2 log factor decays like 1/log n
    ratio = np.mean(sampled) / np.mean(renorm)
    assert abs(ratio - 1) < 0.25
