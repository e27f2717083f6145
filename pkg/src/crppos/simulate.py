"""Prediction phase: simulate outcomes for at-risk and newly enrolled subjects.

Event times come from inverting the all-cause cumulative hazard,
``Lambda(t) = Lambda(c) + E`` with ``E ~ Exp(1)``, which conditions on
survival past the interim censoring time ``c``.  The event type is then a
Bernoulli draw with probability ``lambda_1(t) / (lambda_1(t) + lambda_2(t))``.

Random numbers are consumed in a fixed order per block of subjects: one
exponential deviate per subject, then one uniform per subject.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import CompetingRiskDataset, DatasetError, administrative_censor, stack
from .hazards import (CauseModelSet, ModelError, PchCsModel, WeibullCsModel, _linear_predictor,
                      cause_probability)
from .priors import Beta

__all__ = [
    "ImmortalTailError",
    "all_cause_cum_hazard",
    "invert_cum_hazard",
    "draw_event_time",
    "draw_event_type",
    "simulate_outcomes",
    "EnrollmentSpec",
    "simulate_enrollment",
    "covariate_posteriors",
    "CensoringRule",
    "predict_final_dataset",
]

BISECT_TOL = 1e-10
MAX_DOUBLINGS = 2000
MAX_BISECTIONS = 400


class ImmortalTailError(ModelError):
    """The all-cause cumulative hazard never reaches the requested value."""


def _rows(z, n):
    """Broadcast a covariate mapping to length-n arrays (None passes through)."""
    if z is None or not isinstance(z, Mapping):
        return z
    return {k: np.broadcast_to(np.asarray(v, dtype=float), (n,)) for k, v in z.items()}


def all_cause_cum_hazard(pair, t, z=None):
    return pair[0].cum_hazard(t, z) + pair[1].cum_hazard(t, z)


def _pch_rates(pair, z, n):
    """Union-knot bounds and per-subject all-cause rates, shape (n, U)."""
    m1, m2 = pair
    knots = np.union1d(m1.knots, m2.knots)
    bounds = np.concatenate([[0.0], knots, [np.inf]])
    mid = np.concatenate([(bounds[:-2] + bounds[1:-1]) / 2, [bounds[-2] + 1.0]])
    rates = np.zeros((n, len(mid)))
    for m in pair:
        base = np.exp(np.asarray(m.levels))[m.interval(mid)]
        scale = np.exp(np.broadcast_to(_linear_predictor(0.0, m.coefs, m.covariates, z), (n,)))
        rates += scale[:, None] * base[None, :]
    return bounds, rates


def _invert_pch(pair, z, target):
    n = target.shape[0]
    bounds, rates = _pch_rates(pair, z, n)
    width = np.diff(bounds)[:-1]
    cum = np.zeros_like(rates)
    if width.size:
        cum[:, 1:] = np.cumsum(rates[:, :-1] * width, axis=1)
    idx = (cum < target[:, None]).sum(axis=1) - 1
    rows = np.arange(n)
    r = rates[rows, idx]
    if np.any(r <= 0):
        raise ImmortalTailError("all-cause hazard is zero beyond the reachable range (immortal tail)")
    return bounds[idx] + (target - cum[rows, idx]) / r


def _invert_bisect(pair, z, target):
    """Bracket by doubling, then bisect until |Lambda(t) - target| <= 1e-10."""
    n = target.shape[0]

    def H(t, sel):
        zz = z if not isinstance(z, Mapping) else {k: v[sel] for k, v in z.items()}
        return all_cause_cum_hazard(pair, t, zz)

    lo = np.zeros(n)
    hi = np.ones(n)
    for _ in range(MAX_DOUBLINGS):
        short = H(hi, slice(None)) < target
        if not short.any():
            break
        hi = np.where(short, hi * 2.0, hi)
        lo = np.where(short, hi / 2.0, lo)
        if not np.all(np.isfinite(hi)):
            raise ImmortalTailError("all-cause cumulative hazard is bounded below the target (immortal tail)")
    else:
        raise ImmortalTailError("could not bracket the target (immortal tail)")
    t = 0.5 * (lo + hi)
    todo = np.ones(n, dtype=bool)
    for _ in range(MAX_BISECTIONS):
        idx = np.flatnonzero(todo)
        if idx.size == 0:
            break
        mid = 0.5 * (lo[idx] + hi[idx])
        h = H(mid, idx)
        t[idx] = mid
        diff = h - target[idx]
        done = (np.abs(diff) <= BISECT_TOL) | (hi[idx] - lo[idx] <= 4 * np.spacing(hi[idx]))
        below = diff < 0
        lo[idx] = np.where(below, mid, lo[idx])
        hi[idx] = np.where(below, hi[idx], mid)
        todo[idx[done]] = False
    return t


def invert_cum_hazard(pair, z, target):
    """Time ``t`` with all-cause ``Lambda(t | z) = target``.

    Exact piecewise-linear inversion when both hazards are piecewise constant,
    otherwise bracketed bisection in ``Lambda``-space.  ``z`` may hold one row
    or arrays aligned with ``target``.
    """
    scalar = np.ndim(target) == 0
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if np.any(~(target > 0)) or not np.all(np.isfinite(target)):
        raise ModelError("inversion target must be positive and finite")
    n = target.shape[0]
    z = _rows(z, n)
    m1, m2 = pair
    if isinstance(m1, PchCsModel) and isinstance(m2, PchCsModel):
        t = _invert_pch(pair, z, target)
    elif isinstance(m1, WeibullCsModel) and isinstance(m2, WeibullCsModel) and m1.shape == m2.shape:
        u = np.exp(m1.log_scale(z)) + np.exp(m2.log_scale(z))
        if np.any(u <= 0):
            raise ImmortalTailError("both hazards are identically zero (immortal tail)")
        t = np.broadcast_to((target / u) ** (1.0 / m1.shape), (n,)).copy()
    else:
        t = _invert_bisect(pair, z, target)
    return float(t[0]) if scalar else t


def draw_event_time(pair, z, c, rng):
    """One event time from the all-cause distribution conditioned on T > c."""
    if c < 0:
        raise ModelError("truncation time must be >= 0")
    e = rng.standard_exponential()
    base = float(all_cause_cum_hazard(pair, float(c), z)) if c > 0 else 0.0
    return invert_cum_hazard(pair, z, base + e)


def draw_event_type(pair, t, z, rng):
    """1 with probability lambda_1(t) / (lambda_1(t) + lambda_2(t)), else 2."""
    if t <= 0:
        raise ModelError("event type requires t > 0")
    p1 = float(cause_probability(pair, t, z))
    return 1 if rng.random() < p1 else 2


def simulate_outcomes(pair, z, c, rng):
    """Vectorised event times (> c) and types for one arm.

    Consumes ``len(c)`` exponentials, then ``len(c)`` uniforms.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    if np.any(c < 0):
        raise ModelError("truncation times must be >= 0")
    e = rng.standard_exponential(n)
    u = rng.random(n)
    z = _rows(z, n)
    base = np.where(c > 0, all_cause_cum_hazard(pair, c, z), 0.0)
    t = invert_cum_hazard(pair, z, base + e)
    t = np.maximum(t, np.nextafter(c, np.inf))
    p1 = cause_probability(pair, t, z)
    return t, np.where(u < p1, 1, 2).astype(np.int64)


# -- enrollment ---------------------------------------------------------------------


@dataclass(frozen=True)
class EnrollmentSpec:
    """Future enrollment.

    The fixed arm receives exactly ``n_new_fixed_arm`` subjects; the other arm
    receives the number of failures before the ``n_new_fixed_arm``-th success
    with success probability ``randomization_prob``.  Binary covariates are
    Bernoulli(eta) with eta drawn from its conjugate posterior.
    """

    n_new_fixed_arm: int
    randomization_prob: float
    fixed_arm: int = 1
    binary_covariates: tuple = ()
    covariate_prior: Beta = Beta(1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "binary_covariates", tuple(self.binary_covariates))
        if self.n_new_fixed_arm < 0:
            raise ModelError("n_new_fixed_arm must be >= 0")
        if not 0 < self.randomization_prob <= 1:
            raise ModelError("randomization_prob must lie in (0, 1]")
        if self.fixed_arm not in (0, 1):
            raise ModelError("fixed_arm must be 0 or 1")


def covariate_posteriors(spec: EnrollmentSpec, data: CompetingRiskDataset) -> dict:
    """Conjugate Beta posterior of each binary covariate's prevalence."""
    out = {}
    for name in spec.binary_covariates:
        if name not in data.covariates:
            raise DatasetError(f"enrollment covariate {name!r} not in dataset")
        col = data.covariates[name]
        s = int(np.sum(col == 1))
        out[name] = Beta(spec.covariate_prior.a + s, spec.covariate_prior.b + len(col) - s)
    return out


def simulate_enrollment(spec: EnrollmentSpec, eta: Mapping, rng):
    """Arms and binary covariates of newly enrolled subjects.

    Returns ``(arm, covariates)``: the fixed arm's rows first, then the other
    arm's.
    """
    n_fixed = int(spec.n_new_fixed_arm)
    if spec.randomization_prob >= 1 or n_fixed == 0:
        n_other = 0
    else:
        n_other = int(rng.negative_binomial(n_fixed, spec.randomization_prob))
    arm = np.concatenate([np.full(n_fixed, spec.fixed_arm), np.full(n_other, 1 - spec.fixed_arm)]).astype(np.int64)
    covs = {}
    for name in spec.binary_covariates:
        p = float(eta[name])
        covs[name] = rng.binomial(1, p, size=arm.size).astype(float)
    return arm, covs


# -- censoring ------------------------------------------------------------------------


@dataclass(frozen=True)
class CensoringRule:
    """Administrative censoring applied to the completed dataset.

    ``mode``: ``"none"``; ``"scalar"`` (``horizon`` is one time);
    ``"per_subject"`` (``horizon`` maps subject_id to a time); or
    ``"calendar"`` (``horizon`` is a calendar time and each subject's horizon
    is ``horizon - origin_offset``).
    """

    mode: str = "none"
    horizon: object = None

    def __post_init__(self):
        if self.mode not in ("none", "scalar", "per_subject", "calendar"):
            raise ModelError(f"unknown censoring mode {self.mode!r}")
        if self.mode in ("scalar", "calendar") and not float(self.horizon) > 0:
            raise ModelError("censoring horizon must be positive")
        if self.mode == "per_subject" and not isinstance(self.horizon, Mapping):
            raise ModelError("per-subject censoring needs a subject_id -> horizon mapping")

    def horizons(self, data: CompetingRiskDataset):
        if self.mode == "none":
            return None
        if self.mode == "scalar":
            return float(self.horizon)
        if self.mode == "per_subject":
            return self.horizon
        if data.origin_offset is None:
            raise DatasetError("calendar censoring requires origin_offset in the dataset")
        return float(self.horizon) - data.origin_offset

    def apply(self, data: CompetingRiskDataset) -> CompetingRiskDataset:
        h = self.horizons(data)
        return data if h is None else administrative_censor(data, h)


# -- assembly ---------------------------------------------------------------------------


def _covariate_rows(data: CompetingRiskDataset, idx):
    cols = {"arm": data.arm[idx].astype(float)}
    cols.update({k: v[idx] for k, v in data.covariates.items()})
    return cols


def _simulate_rows(models: CauseModelSet, data: CompetingRiskDataset, c, rng):
    """Outcomes for every row of ``data`` (arm by arm, one deviate block)."""
    n = len(data)
    e = rng.standard_exponential(n)
    u = rng.random(n)
    t = np.empty(n)
    x = np.empty(n, dtype=np.int64)
    for arm in (0, 1):
        idx = np.flatnonzero(data.arm == arm)
        if idx.size == 0:
            continue
        pair = models.pair(arm)
        z = _covariate_rows(data, idx)
        ci = c[idx]
        base = np.where(ci > 0, all_cause_cum_hazard(pair, ci, z), 0.0)
        ti = invert_cum_hazard(pair, z, base + e[idx])
        ti = np.maximum(ti, np.nextafter(ci, np.inf))
        t[idx] = ti
        x[idx] = np.where(u[idx] < cause_probability(pair, ti, z), 1, 2)
    return t, x


def predict_final_dataset(d_obs: CompetingRiskDataset, d_cens: CompetingRiskDataset, models: CauseModelSet,
                          rng, *, enrollment: EnrollmentSpec | None = None, eta: Mapping | None = None,
                          censoring: CensoringRule = CensoringRule(), new_id_prefix: str = "new-"):
    """Stack observed, re-simulated at-risk and newly enrolled subjects.

    At-risk subjects keep their covariates and get an event time beyond their
    interim censoring time.  The censoring rule is applied last.
    """
    new = None
    if enrollment is not None:
        arm, covs = simulate_enrollment(enrollment, eta or {}, rng)
        missing = [k for k in d_obs.schema.names if k not in covs]
        if missing:
            raise ModelError(f"no generating model for covariates {missing} of new enrollees")
        m = arm.size
        offsets = None
        if d_obs.origin_offset is not None:
            # enrolled after every interim subject
            latest = max(float(d_obs.origin_offset.max(initial=0.0)),
                         float(d_cens.origin_offset.max(initial=0.0)) if d_cens.origin_offset is not None else 0.0)
            offsets = np.full(m, latest)
        new = CompetingRiskDataset(np.array([f"{new_id_prefix}{i + 1}" for i in range(m)], dtype=object),
                                   np.zeros(m), np.zeros(m, dtype=np.int64), arm, covs,
                                   origin_offset=offsets, time_unit=d_obs.time_unit,
                                   schema=d_obs.schema, _validate=False)
    parts = [d_obs]
    if len(d_cens):
        t, x = _simulate_rows(models, d_cens, d_cens.time, rng)
        parts.append(d_cens.replace(time=t, event=x, _validate=False))
    if new is not None and len(new):
        t, x = _simulate_rows(models, new, np.zeros(len(new)), rng)
        parts.append(new.replace(time=t, event=x, _validate=False))
    out = stack(parts) if len(parts) > 1 else d_obs
    return censoring.apply(out)
