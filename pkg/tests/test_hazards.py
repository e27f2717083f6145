import math

import numpy as np
import pytest
from scipy import integrate

from crppos.dataset import CompetingRiskDataset
from crppos.fitting import StratumPosterior, StratumSpec
from crppos.hazards import (CauseModelSet, ModelError, PchCsModel, PchPriors, WeibullCsModel, WeibullPriors,
                            cause_probability, cif, cum_hazard, hazard, log_hazard, log_likelihood, log_prior,
                            loglik_contributions, survival)
from crppos.priors import Exponential, Normal, RandomWalk1


def _const(rate1, rate2):
    return CauseModelSet({(1, None): WeibullCsModel(math.log(rate1), 1.0),
                          (2, None): WeibullCsModel(math.log(rate2), 1.0)})


def test_log_hazard_values():
    assert log_hazard(WeibullCsModel(0.0, 1.0), 7.3) == pytest.approx(0.0, abs=1e-15)
    assert log_hazard(WeibullCsModel(math.log(2), 1.0), 3.0) == pytest.approx(math.log(2), abs=1e-15)
    m = PchCsModel((1.0,), (math.log(1), math.log(2)))
    assert log_hazard(m, 1.5) == pytest.approx(math.log(2), abs=1e-15)
    # right-closed intervals: t = knot belongs to the first interval
    assert log_hazard(m, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_cum_hazard_values():
    assert cum_hazard(WeibullCsModel(math.log(2), 1.0), 0.5) == pytest.approx(1.0, abs=1e-15)
    assert cum_hazard(PchCsModel((1.0,), (0.0, math.log(2))), 1.5) == pytest.approx(2.0, abs=1e-14)
    for m in (WeibullCsModel(0.3, 1.7, (0.2,), ("x",)), PchCsModel((1.0, 2.0), (0.1, -1.0, 0.4))):
        assert cum_hazard(m, 0.0, {"x": 1.0}) == 0.0
    with pytest.raises(ModelError):
        cum_hazard(WeibullCsModel(0.0, 1.0), -1.0)


def test_cum_hazard_is_integral_of_hazard():
    m = WeibullCsModel(-0.7, 1.4, (0.5,), ("x",))
    z = {"x": 0.3}
    val, _ = integrate.quad(lambda u: float(hazard(m, u, z)), 0, 2.3)
    assert float(cum_hazard(m, 2.3, z)) == pytest.approx(val, rel=1e-10)


def test_log_likelihood_single_subject():
    models = _const(1.0, 1.0)
    event = CompetingRiskDataset(["a"], [1.0], [1], [0])
    cens = CompetingRiskDataset(["a"], [1.0], [0], [0])
    assert log_likelihood(models, event) == pytest.approx(-2.0, abs=1e-14)
    assert log_likelihood(models, cens) == pytest.approx(-2.0, abs=1e-14)


def test_log_likelihood_additive():
    rng = np.random.default_rng(5)
    n = 10
    d = CompetingRiskDataset([str(i) for i in range(n)], rng.exponential(2, n) + 0.01, rng.integers(0, 3, n),
                             rng.integers(0, 2, n), {"x": rng.normal(size=n)})
    models = CauseModelSet({(1, 0): WeibullCsModel(-0.3, 1.2, (0.4,), ("x",)),
                            (1, 1): WeibullCsModel(-0.6, 0.9, (0.1,), ("x",)),
                            (2, None): PchCsModel((0.5, 1.5), (-1.0, -0.5, 0.2), (0.3, -0.2), ("arm", "x"))})
    total = log_likelihood(models, d)
    parts = [log_likelihood(models, d.subset([i])) for i in range(n)]
    assert total == pytest.approx(sum(parts), rel=1e-13)
    assert loglik_contributions(models, d).shape == (n,)


def test_log_prior_closed_forms():
    key = (1, None)
    pri = {key: WeibullPriors(), (2, None): WeibullPriors()}
    models = CauseModelSet({key: WeibullCsModel(0.0, 1.0), (2, None): WeibullCsModel(0.0, 1.0)})
    # alpha=0 under Normal(0, 20) plus nu=1 under Exponential(1), twice
    one = -math.log(20 * math.sqrt(2 * math.pi)) + (0.0 - 1.0)
    assert log_prior(models, pri) == pytest.approx(2 * one, abs=1e-13)
    assert float(Normal(0, 20).logpdf(0.0)) == pytest.approx(-math.log(20 * math.sqrt(2 * math.pi)), abs=1e-15)
    assert float(Exponential(1.0).logpdf(-1.0)) == -math.inf


def test_log_prior_outside_support():
    with pytest.raises(ModelError):
        WeibullCsModel(0.0, -1.0)
    pri = WeibullPriors(shape=Exponential(1.0))
    assert float(pri.shape.logpdf(-1.0)) == -math.inf


def test_random_walk_equal_levels():
    rw = RandomWalk1(Normal(0.0, 20.0), 1.0)
    tau = 0.7
    levels = np.full(5, -2.0)
    expected = (float(Normal(0.0, 20.0).logpdf(-2.0)) + 4 * float(Normal(0.0, tau).logpdf(0.0))
                + float(Exponential(1.0).logpdf(tau)))
    assert float(rw.logpdf(levels, tau)) == pytest.approx(expected, abs=1e-13)
    models = {k: PchCsModel((1.0, 2.0, 3.0, 4.0), tuple(levels)) for k in [(c, a) for c in (1, 2) for a in (0, 1)]}
    priors = {k: PchPriors(rw) for k in models}
    hyper = {k: tau for k in models}
    assert log_prior(CauseModelSet(models), priors, hyper) == pytest.approx(4 * expected, abs=1e-12)
    with pytest.raises(ModelError):
        log_prior(CauseModelSet(models), priors)


def test_cause_probability():
    pair = _const(1.0, 3.0).pair(0)
    assert float(cause_probability(pair, 2.0)) == pytest.approx(0.25, abs=1e-15)
    zero = (WeibullCsModel(0.0, 1.0), WeibullCsModel(-np.inf, 1.0))
    assert float(cause_probability(zero, 0.4)) == 1.0
    w = (WeibullCsModel(-0.2, 1.3), WeibullCsModel(-0.2, 1.3))
    assert np.allclose(cause_probability(w, np.array([0.1, 1.0, 9.0])), 0.5)
    both_zero = (WeibullCsModel(-np.inf, 1.0), WeibullCsModel(-np.inf, 1.0))
    with pytest.raises(ModelError):
        cause_probability(both_zero, 1.0)


def test_cif_exponential_closed_form():
    pair = _const(1.0, 1.0).pair(0)
    assert cif(pair, 0.0) == 0.0
    assert cif(pair, 1.0) == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-10)
    assert round(cif(pair, 1.0), 6) == 0.432332


def test_cif_pch_matches_quadrature():
    m1 = PchCsModel((1.0, 2.5), (-1.0, -0.3, -2.0))
    m2 = PchCsModel((0.5,), (-1.5, -0.8))
    for t in (0.3, 1.0, 2.0, 4.0):
        val, _ = integrate.quad(lambda u: float(m1.hazard(u) * survival((m1, m2), u)), 0, t,
                                points=[0.5, 1.0, 2.5], epsabs=1e-12)
        assert cif((m1, m2), t) == pytest.approx(val, abs=1e-10)


@pytest.mark.parametrize("pair", [
    (WeibullCsModel(math.log(0.3), 1.2), WeibullCsModel(math.log(0.1), 0.8)),
    (PchCsModel((1.0, 2.0), (-1.0, -0.5, -1.2)), PchCsModel((1.5,), (-2.0, -0.7))),
])
def test_cif_components_sum_to_one(pair):
    for t in (0.2, 1.0, 3.0, 7.5):
        total = cif(pair, t, cause=1) + cif(pair, t, cause=2) + float(survival(pair, t))
        assert total == pytest.approx(1.0, abs=1e-9)


def test_cif_nondecreasing():
    pair = (WeibullCsModel(math.log(0.3), 1.2), WeibullCsModel(math.log(0.1), 0.8))
    vals = [cif(pair, t) for t in np.linspace(0, 5, 11)]
    assert np.all(np.diff(vals) >= 0)


def _toy_data(n=60, seed=2):
    rng = np.random.default_rng(seed)
    return CompetingRiskDataset([str(i) for i in range(n)], rng.exponential(2, n) + 0.05,
                                rng.choice([0, 1, 1, 2], n), rng.integers(0, 2, n), {"x": rng.normal(size=n)})


@pytest.mark.parametrize("spec", [
    StratumSpec(1, None, "weibull", ("arm", "x")),
    StratumSpec(2, 1, "weibull", ("x",)),
    StratumSpec(1, None, "pch", ("arm",), knots=(1.0, 2.0)),
    StratumSpec(2, 0, "pch", ("x",), knots=(0.5, 1.0, 3.0), priors=PchPriors(RandomWalk1(Normal(-1.0, 5.0)))),
])
@pytest.mark.parametrize("noncentered", [False, True])
def test_gradient_matches_finite_differences(spec, noncentered):
    target = StratumPosterior(spec, _toy_data(), noncentered=noncentered if spec.hierarchical else None)
    u = target.crude_init() + np.random.default_rng(1).normal(scale=0.1, size=len(spec.param_names))
    g = target.grad(u)
    h = 1e-6
    fd = np.array([(target.log_density((u + h * e)[None])[0] - target.log_density((u - h * e)[None])[0]) / (2 * h)
                   for e in np.eye(len(u))])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-5)
