"""Parametric cause-specific hazard models.

Two families are supported for each (cause, arm) stratum:

* Weibull: ``lambda(t | z) = u(z) * nu * t**(nu - 1)`` with
  ``log u(z) = alpha + gamma' z``; cumulative hazard ``u(z) * t**nu``.
* Piecewise constant (PCH): ``log lambda(t | z) = beta_l + gamma' z`` for
  ``q_{l-1} < t <= q_l`` with boundary knots 0 and +inf.

Covariates ``z`` can be given as a mapping name -> value(s) (preferred, each
model picks its own columns), as a 1-d row aligned with ``model.covariates``,
or as an (n, p) matrix.  The pseudo-covariate ``"arm"`` carries the
treatment indicator when arms share one proportional-hazards model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
from scipy import integrate

from .priors import Exponential, Normal, RandomWalk1

__all__ = [
    "ModelError",
    "LikelihoodError",
    "WeibullCsModel",
    "PchCsModel",
    "WeibullPriors",
    "PchPriors",
    "CauseModelSet",
    "log_hazard",
    "hazard",
    "cum_hazard",
    "log_likelihood",
    "loglik_contributions",
    "log_prior",
    "cause_probability",
    "survival",
    "cif",
]

CAUSES = (1, 2)
DEFAULT_COEF_PRIOR = Normal(0.0, math.sqrt(0.5))


class ModelError(ValueError):
    pass


class LikelihoodError(ModelError):
    pass


def _linear_predictor(base, coefs, covariates, z):
    if not covariates:
        return np.asarray(base, dtype=float)
    if z is None:
        raise ModelError(f"covariates {list(covariates)} required")
    if isinstance(z, Mapping):
        try:
            cols = [np.asarray(z[name], dtype=float) for name in covariates]
        except KeyError as exc:
            raise ModelError(f"missing covariate {exc.args[0]!r}") from None
        lp = base
        for c, b in zip(cols, coefs):
            lp = lp + b * c
        return np.asarray(lp, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != len(covariates):
        raise ModelError(f"covariate row has {z.shape[-1]} values, model expects {len(covariates)}")
    return base + z @ np.asarray(coefs, dtype=float)


@dataclass(frozen=True)
class WeibullCsModel:
    """Weibull cause-specific hazard; ``intercept`` is alpha (log-scale of u)."""

    intercept: float
    shape: float
    coefs: tuple = ()
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "coefs", tuple(float(c) for c in self.coefs))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.coefs) != len(self.covariates):
            raise ModelError("one coefficient per covariate required")
        if not (self.shape > 0 and math.isfinite(self.shape)):
            raise ModelError(f"Weibull shape must be positive, got {self.shape}")

    family = "weibull"

    def log_scale(self, z=None):
        return _linear_predictor(self.intercept, self.coefs, self.covariates, z)

    def log_hazard(self, t, z=None):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ModelError("log_hazard requires t > 0")
        return self.log_scale(z) + math.log(self.shape) + (self.shape - 1.0) * np.log(t)

    def hazard(self, t, z=None):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.exp(self.log_scale(z)) * self.shape * np.power(t, self.shape - 1.0)

    def cum_hazard(self, t, z=None):
        t = np.asarray(t, dtype=float)
        return np.exp(self.log_scale(z)) * np.power(t, self.shape)


@dataclass(frozen=True)
class PchCsModel:
    """Piecewise-constant cause-specific hazard.

    ``knots`` are the internal knots; ``levels`` holds the log-hazard of each of
    the ``len(knots) + 1`` intervals (the last extends to infinity).
    """

    knots: tuple
    levels: tuple
    coefs: tuple = ()
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        object.__setattr__(self, "levels", tuple(float(b) for b in self.levels))
        object.__setattr__(self, "coefs", tuple(float(c) for c in self.coefs))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        q = np.asarray(self.knots)
        if q.size and (q[0] <= 0 or np.any(np.diff(q) <= 0) or not np.all(np.isfinite(q))):
            raise ModelError("internal knots must be positive, finite and strictly increasing")
        if len(self.levels) != len(self.knots) + 1:
            raise ModelError(f"{len(self.knots)} knots need {len(self.knots) + 1} levels, got {len(self.levels)}")
        if len(self.coefs) != len(self.covariates):
            raise ModelError("one coefficient per covariate required")

    family = "pch"

    @property
    def bounds(self) -> np.ndarray:
        return np.concatenate([[0.0], self.knots, [np.inf]])

    def interval(self, t):
        """Index l of the interval (q_{l-1}, q_l] containing t."""
        return np.searchsorted(np.asarray(self.knots), np.asarray(t, dtype=float), side="left")

    def log_hazard(self, t, z=None):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ModelError("log_hazard requires t > 0")
        return np.asarray(self.levels)[self.interval(t)] + _linear_predictor(0.0, self.coefs, self.covariates, z)

    def hazard(self, t, z=None):
        t = np.asarray(t, dtype=float)
        base = np.exp(np.asarray(self.levels))[self.interval(t)]
        return base * np.exp(_linear_predictor(0.0, self.coefs, self.covariates, z))

    def exposures(self, t):
        """Time spent in each interval up to ``t``: shape t.shape + (L,)."""
        b = self.bounds
        t = np.asarray(t, dtype=float)[..., None]
        return np.clip(np.minimum(t, b[1:]) - b[:-1], 0.0, None)

    def cum_hazard(self, t, z=None):
        base = self.exposures(t) @ np.exp(np.asarray(self.levels))
        return base * np.exp(_linear_predictor(0.0, self.coefs, self.covariates, z))


HazardModel = Union[WeibullCsModel, PchCsModel]


def log_hazard(model: HazardModel, t, z=None):
    return model.log_hazard(t, z)


def hazard(model: HazardModel, t, z=None):
    return model.hazard(t, z)


def cum_hazard(model: HazardModel, t, z=None):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ModelError("cum_hazard requires t >= 0")
    return model.cum_hazard(t, z)


# -- priors -------------------------------------------------------------------


@dataclass(frozen=True)
class WeibullPriors:
    intercept: object = Normal(0.0, 20.0)
    shape: object = Exponential(1.0)
    coefs: Mapping = field(default_factory=dict)
    default_coef: object = DEFAULT_COEF_PRIOR

    def coef(self, name):
        return self.coefs.get(name, self.default_coef)


@dataclass(frozen=True)
class PchPriors:
    """``levels`` is a RandomWalk1 or a prior applied to each level independently."""

    levels: object = RandomWalk1(Normal(-10.0, 20.0), 1.0)
    coefs: Mapping = field(default_factory=dict)
    default_coef: object = DEFAULT_COEF_PRIOR

    def coef(self, name):
        return self.coefs.get(name, self.default_coef)

    @property
    def hierarchical(self) -> bool:
        return isinstance(self.levels, RandomWalk1)


# -- model sets -----------------------------------------------------------------


@dataclass(frozen=True)
class CauseModelSet:
    """One hazard model per stratum.

    Stratum keys are ``(cause, arm)`` when arms are stratified, or
    ``(cause, None)`` when a single model (with an ``"arm"`` covariate)
    covers both arms.
    """

    strata: Mapping

    def __post_init__(self):
        for cause in CAUSES:
            for arm in (0, 1):
                self.model(cause, arm)

    def model(self, cause: int, arm: int) -> HazardModel:
        m = self.strata.get((cause, arm))
        if m is None:
            m = self.strata.get((cause, None))
        if m is None:
            raise ModelError(f"no model for cause {cause}, arm {arm}")
        return m

    def pair(self, arm: int):
        return self.model(1, arm), self.model(2, arm)


def _covariate_map(data, idx=None):
    cols = {"arm": data.arm.astype(float)}
    cols.update(data.covariates)
    if idx is not None:
        cols = {k: v[idx] for k, v in cols.items()}
    return cols


def loglik_contributions(models: CauseModelSet, data) -> np.ndarray:
    """Per-subject cause-specific log-likelihood contributions.

    Subject s contributes ``sum_i 1(event_s = i) log lambda_i(y_s) - sum_i Lambda_i(y_s)``.
    """
    out = np.zeros(len(data))
    for arm in (0, 1):
        idx = np.flatnonzero(data.arm == arm)
        if idx.size == 0:
            continue
        z = _covariate_map(data, idx)
        y = data.time[idx]
        ev = data.event[idx]
        for cause, m in zip(CAUSES, models.pair(arm)):
            contrib = -m.cum_hazard(y, z)
            hit = ev == cause
            if hit.any():
                zh = {k: v[hit] for k, v in z.items()}
                with np.errstate(divide="ignore", invalid="ignore"):
                    if np.any(y[hit] <= 0):
                        lh = np.full(hit.sum(), -np.inf)
                        ok = y[hit] > 0
                        lh[ok] = m.log_hazard(y[hit][ok], {k: v[ok] for k, v in zh.items()})
                    else:
                        lh = m.log_hazard(y[hit], zh)
                contrib = np.array(np.broadcast_to(contrib, y.shape), dtype=float)
                contrib[hit] += lh
            out[idx] += contrib
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise LikelihoodError(f"non-finite likelihood contribution for subject {data.subject_id[bad[0]]!r}")
    return out


def log_likelihood(models: CauseModelSet, data) -> float:
    return float(loglik_contributions(models, data).sum())


def _stratum_log_prior(model, priors, tau=None):
    lp = 0.0
    if isinstance(model, WeibullCsModel):
        lp += float(priors.intercept.logpdf(model.intercept))
        lp += float(priors.shape.logpdf(model.shape))
    else:
        if isinstance(priors.levels, RandomWalk1):
            if tau is None:
                raise ModelError("RandomWalk1 level prior needs tau")
            lp += float(priors.levels.logpdf(np.asarray(model.levels), tau))
        else:
            lp += float(np.sum(priors.levels.logpdf(np.asarray(model.levels))))
    for name, c in zip(model.covariates, model.coefs):
        lp += float(priors.coef(name).logpdf(c))
    return lp


def log_prior(models: CauseModelSet, priors: Mapping, hyper: Mapping | None = None) -> float:
    """Sum of prior log densities over all strata.

    ``priors`` and the optional ``hyper`` (RandomWalk1 tau values) are keyed
    like ``models.strata``.  Returns ``-inf`` when any parameter is outside
    its prior's support.
    """
    hyper = hyper or {}
    total = 0.0
    for key, model in models.strata.items():
        if key not in priors:
            raise ModelError(f"no prior for stratum {key}")
        total += _stratum_log_prior(model, priors[key], hyper.get(key))
    return total


# -- all-cause quantities ---------------------------------------------------------


def cause_probability(pair, t, z=None):
    """Pr(event type 1 | event at t, z) = lambda_1 / (lambda_1 + lambda_2)."""
    h1 = np.asarray(pair[0].hazard(t, z), dtype=float)
    h2 = np.asarray(pair[1].hazard(t, z), dtype=float)
    tot = h1 + h2
    if np.any(tot <= 0):
        raise ModelError("both cause-specific hazards are zero; event type undefined")
    return h1 / tot


def survival(pair, t, z=None):
    return np.exp(-(pair[0].cum_hazard(t, z) + pair[1].cum_hazard(t, z)))


def _pch_cif(pair, t, z, cause):
    m1, m2 = pair
    knots = np.union1d(m1.knots, m2.knots)
    bounds = np.concatenate([[0.0], knots, [np.inf]])
    mid = np.concatenate([(bounds[:-2] + bounds[1:-1]) / 2, [bounds[-2] + 1.0]])
    r1 = m1.hazard(mid, z)
    r2 = m2.hazard(mid, z)
    rate = r1 + r2
    ri = r1 if cause == 1 else r2
    lo = bounds[:-1]
    length = np.clip(np.minimum(t, bounds[1:]) - lo, 0.0, None)
    full = np.minimum(bounds[1:], 1e300) - lo
    # survival at the start of each interval
    s_start = np.exp(-np.concatenate([[0.0], np.cumsum(rate[:-1] * full[:-1])]))
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(rate > 0, ri / rate * -np.expm1(-rate * length), 0.0)
    return float(np.sum(s_start * frac))


def cif(pair, t, z=None, cause: int = 1, *, tol: float = 1e-11) -> float:
    """Cumulative incidence F_i(t) = int_0^t lambda_i(u) S(u) du for one covariate row.

    Exact when both hazards are piecewise constant; otherwise adaptive
    Gauss-Kronrod quadrature.
    """
    if cause not in CAUSES:
        raise ModelError("cause must be 1 or 2")
    t = float(t)
    if t < 0:
        raise ModelError("cif requires t >= 0")
    if t == 0:
        return 0.0
    if all(isinstance(m, PchCsModel) for m in pair):
        return _pch_cif(pair, t, z, cause)
    mi = pair[cause - 1]

    def integrand(u):
        if u <= 0:
            return 0.0
        return float(mi.hazard(u, z) * survival(pair, u, z))

    val, err = integrate.quad(integrand, 0.0, t, epsabs=tol, epsrel=tol, limit=500)
    if not math.isfinite(val) or err > 1e-8:
        raise ModelError(f"CIF quadrature did not converge (error estimate {err:.2e})")
    return float(val)
