import numpy as np
import pytest

from crppos.dataset import CompetingRiskDataset
from crppos.fitting import StratumSpec, fit_stratum
from crppos.hazards import PchPriors
from crppos.priors import Beta, Flat
from crppos.sampler import (PosteriorDraws, SamplerConfig, beta_conjugate_update, diagnostics,
                            effective_sample_size, sample_posterior, split_rhat)


def _std_normal(x):
    return -0.5 * float(np.dot(x, x))


def test_standard_normal_target():
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=1000, seed=3)
    d = sample_posterior(_std_normal, np.zeros(1), cfg, names=["x"])
    x = d.column("x")
    assert d.chains.shape == (4, 1000, 1)
    assert abs(x.mean()) < 4 / np.sqrt(d.ess[0])
    assert abs(x.std() - 1) < 0.1


def test_vectorized_target_two_dims():
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    prec = np.linalg.inv(cov)

    def target(X):
        return -0.5 * np.einsum("ij,jk,ik->i", X, prec, X)

    d = sample_posterior(target, np.zeros(2), SamplerConfig(seed=8), vectorized=True)
    assert np.allclose(np.cov(d.draws, rowvar=False), cov, atol=0.15)
    assert d.converged


def test_same_seed_identical_draws():
    cfg = SamplerConfig(n_chains=2, n_warmup=200, n_draws=200, seed=17)
    a = sample_posterior(_std_normal, np.zeros(2), cfg)
    b = sample_posterior(_std_normal, np.zeros(2), cfg)
    assert np.array_equal(a.chains, b.chains)
    c = sample_posterior(_std_normal, np.zeros(2), cfg.replace(seed=18))
    assert not np.array_equal(a.chains, c.chains)


def test_infinite_init_rejected():
    with pytest.raises(Exception):
        sample_posterior(lambda x: -np.inf, np.zeros(1), SamplerConfig(n_warmup=10, n_draws=10))


def test_gamma_oracle_single_interval():
    rng = np.random.default_rng(12)
    n = 80
    t = rng.exponential(1 / 0.4, n)
    c = rng.uniform(0.5, 4.0, n)
    time = np.minimum(t, c)
    event = np.where(t <= c, 1, 0)
    data = CompetingRiskDataset([str(i) for i in range(n)], time, event, np.zeros(n, int))
    spec = StratumSpec(1, 0, "pch", priors=PchPriors(Flat()))
    fit = fit_stratum(spec, data, SamplerConfig(seed=5))
    rate = np.exp(fit.draws.column("level[1]"))
    d, e = int(event.sum()), float(time.sum())
    mc_se = np.sqrt(d) / e / np.sqrt(effective_sample_size(np.exp(fit.draws.chains[:, :, 0])))
    assert abs(rate.mean() - d / e) < 3 * mc_se


def test_rhat_iid_chains():
    x = np.random.default_rng(0).normal(size=(4, 2000))
    assert 0.99 <= split_rhat(x) <= 1.01
    assert effective_sample_size(x) == pytest.approx(8000, rel=0.2)


def test_rhat_disjoint_chains_flagged():
    rng = np.random.default_rng(1)
    x = np.stack([rng.normal(-5, 1, 500), rng.normal(5, 1, 500)])
    assert split_rhat(x) > 1.1
    draws = PosteriorDraws(("a",), x[:, :, None], np.array([1000.0]), np.array([1.0]), 0)
    assert diagnostics(draws)["a"]["flagged"]


def test_constant_chain_flagged():
    x = np.ones((4, 300, 1))
    draws = PosteriorDraws(("c",), x, np.array([np.nan]), np.array([np.nan]), 0)
    out = diagnostics(draws)["c"]
    assert np.isnan(out["ess"])
    assert out["flagged"]
    assert draws.flagged() == ["c"]


def test_thinned_iid_ess():
    x = np.random.default_rng(4).normal(size=(4, 4000))[:, ::4]
    assert effective_sample_size(x) == pytest.approx(x.size, rel=0.2)


def test_diagnostics_thresholds():
    x = np.random.default_rng(2).normal(size=(4, 100, 1))
    draws = PosteriorDraws(("a",), x, np.array([400.0]), np.array([1.0]), 0)
    assert diagnostics(draws, ess_min=50)["a"]["flagged"] is False
    assert diagnostics(draws, ess_min=10_000)["a"]["flagged"] is True


def test_beta_conjugate_update():
    assert beta_conjugate_update(Beta(1, 1), 0, 0) == Beta(1, 1)
    assert beta_conjugate_update(Beta(1, 1), 3, 10) == Beta(4, 8)
    with pytest.raises(ValueError):
        beta_conjugate_update(Beta(1, 1), 5, 3)


def test_summary_rows():
    cfg = SamplerConfig(n_chains=2, n_warmup=100, n_draws=100, seed=1)
    d = sample_posterior(_std_normal, np.zeros(2), cfg, names=["a", "b"])
    rows = d.summary()
    assert [r["parameter"] for r in rows] == ["a", "b"]
    assert set(rows[0]) == {"parameter", "mean", "sd", "q2.5", "median", "q97.5", "ess", "rhat"}
