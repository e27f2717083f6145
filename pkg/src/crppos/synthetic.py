"""Synthetic interim datasets with known cause-specific hazards.

Subjects enter uniformly over an accrual period and are followed until the
earlier of a per-subject maximum follow-up and the calendar analysis time.
Outcomes are drawn with the same inversion sampler used for prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import rng as rngmod
from .dataset import CompetingRiskDataset, Schema
from .hazards import CauseModelSet, ModelError, PchCsModel, WeibullCsModel
from .simulate import _simulate_rows

__all__ = ["CovariateGen", "SyntheticSpec", "generate_synthetic", "ispy_like_spec", "sthlm3_like_spec",
           "ISPY_LIKE_SEED", "STHLM3_LIKE_SEED"]


@dataclass(frozen=True)
class CovariateGen:
    """``kind``: 'bernoulli' (p), 'uniform_int' (lo, hi inclusive), 'uniform' (lo, hi) or 'normal' (mean, sd)."""

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in np.atleast_1d(self.params)))
        need = {"bernoulli": 1, "uniform_int": 2, "uniform": 2, "normal": 2}
        if self.kind not in need:
            raise ModelError(f"unknown covariate generator {self.kind!r}")
        if len(self.params) != need[self.kind]:
            raise ModelError(f"{self.kind} needs {need[self.kind]} parameters")
        if self.kind == "bernoulli" and not 0 <= self.params[0] <= 1:
            raise ModelError("bernoulli probability must lie in [0, 1]")

    @property
    def schema_kind(self) -> str:
        return "binary" if self.kind == "bernoulli" else "real"

    def draw(self, rng, n):
        a = self.params
        if self.kind == "bernoulli":
            return rng.binomial(1, a[0], size=n).astype(float)
        if self.kind == "uniform_int":
            return rng.integers(int(a[0]), int(a[1]) + 1, size=n).astype(float)
        if self.kind == "uniform":
            return rng.uniform(a[0], a[1], size=n)
        return rng.normal(a[0], a[1], size=n)


@dataclass(frozen=True)
class SyntheticSpec:
    """True hazards, sample sizes, covariates and censoring for one dataset.

    ``n_per_arm`` is ``(n_arm0, n_arm1)``.  Follow-up ends at
    ``min(follow_up, analysis_time - entry)`` (either may be None).  With
    ``record_offset`` the entry times are stored as ``origin_offset``.
    """

    models: CauseModelSet
    n_per_arm: tuple
    covariates: Mapping = field(default_factory=dict)
    follow_up: float | None = None
    accrual: float = 0.0
    analysis_time: float | None = None
    record_offset: bool = False
    seed: int = 0
    time_unit: str = ""
    id_prefix: str = "S"

    def __post_init__(self):
        if len(self.n_per_arm) != 2 or min(self.n_per_arm) < 0 or sum(self.n_per_arm) == 0:
            raise ModelError("n_per_arm must be two nonnegative counts, not both zero")
        if self.accrual < 0:
            raise ModelError("accrual must be >= 0")
        if self.follow_up is not None and not self.follow_up > 0:
            raise ModelError("follow_up must be positive")
        if self.analysis_time is not None and not self.analysis_time >= self.accrual:
            raise ModelError("analysis_time must not precede the end of accrual")
        for cause in (1, 2):
            for arm in (0, 1):
                m = self.models.model(cause, arm)
                params = [m.shape] if isinstance(m, WeibullCsModel) else list(m.levels)
                if any(math.isnan(p) or p == math.inf for p in params):
                    raise ModelError(f"invalid hazard parameters for cause {cause}, arm {arm}")


def generate_synthetic(spec: SyntheticSpec) -> CompetingRiskDataset:
    """Simulate a dataset; identical specs give bit-identical output."""
    rng = rngmod.stream(spec.seed)
    n0, n1 = (int(n) for n in spec.n_per_arm)
    n = n0 + n1
    arm = rng.permutation(np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)]))
    covs = {name: gen.draw(rng, n) for name, gen in spec.covariates.items()}
    entry = rng.uniform(0.0, spec.accrual, size=n) if spec.accrual > 0 else np.zeros(n)
    schema = Schema({name: gen.schema_kind for name, gen in spec.covariates.items()})
    ids = np.array([f"{spec.id_prefix}{i + 1:0{len(str(n))}d}" for i in range(n)], dtype=object)
    shell = CompetingRiskDataset(ids, np.zeros(n), np.zeros(n, np.int64), arm, covs, schema=schema,
                                 time_unit=spec.time_unit, _validate=False)
    t, x = _simulate_rows(spec.models, shell, np.zeros(n), rng)
    cens = np.full(n, np.inf)
    if spec.follow_up is not None:
        cens = np.minimum(cens, spec.follow_up)
    if spec.analysis_time is not None:
        cens = np.minimum(cens, spec.analysis_time - entry)
    over = t > cens
    time_ = np.where(over, cens, t)
    event = np.where(over, 0, x)
    return CompetingRiskDataset(ids, time_, event, arm, covs, origin_offset=entry if spec.record_offset else None,
                                time_unit=spec.time_unit, schema=schema)


# -- presets -----------------------------------------------------------------------------

# seeds found by search so that the interim counts match the design targets
ISPY_LIKE_SEED = 10171
STHLM3_LIKE_SEED = 7


def ispy_like_models() -> CauseModelSet:
    """Recovery (cause 1) and death (cause 2), days; no true arm effect."""
    rec = WeibullCsModel(math.log(0.025), 1.15, (-0.55,), ("who_level",))
    death = WeibullCsModel(math.log(0.0055), 0.95, (0.8,), ("who_level",))
    return CauseModelSet({(1, None): rec, (2, None): death})


def ispy_like_spec(seed: int = ISPY_LIKE_SEED) -> SyntheticSpec:
    """58 + 75 subjects accrued over 105 days, interim at day 105, 60-day cap."""
    return SyntheticSpec(
        models=ispy_like_models(),
        n_per_arm=(75, 58),
        covariates={"who_level": CovariateGen("bernoulli", (0.45,))},
        follow_up=60.0,
        accrual=105.0,
        analysis_time=105.0,
        seed=seed,
        time_unit="days",
        id_prefix="P",
    )


STHLM3_PCM_KNOTS = (2.0, 3.0, 4.0, 5.0)
STHLM3_OTHER_KNOTS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5)


def sthlm3_like_models() -> CauseModelSet:
    """Prostate-cancer death (cause 1) and other-cause death (cause 2), years.

    Log-hazards are per year at age 60 shifted by the age coefficient times
    (age - 60).  Invitation halves the cancer-death hazard from three years
    after invitation onwards (screening benefit appears with a lag).
    """
    age_pcm, age_oth = 0.08, 0.09
    pcm_t = np.array([0.3, 1.0, 2.5, 4.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0])
    pcm_h = np.array([4e-4, 9e-4, 1.6e-3, 2.3e-3, 3.0e-3, 3.6e-3, 4.2e-3, 4.8e-3, 5.3e-3, 5.8e-3, 6.3e-3])
    knots = tuple(float(k) for k in np.arange(0.5, 20.0, 0.5))
    mids = np.concatenate([[0.25], np.asarray(knots) + 0.25])
    pcm0 = np.interp(mids, pcm_t, pcm_h)
    oth = 6e-3 * np.exp(0.04 * mids)
    base = -60.0
    out = {}
    benefit = np.where(mids < 3.0, 1.0, 0.5)
    for arm, mult in ((0, 1.0), (1, benefit)):
        out[(1, arm)] = PchCsModel(knots, tuple(np.log(pcm0 * mult) + base * age_pcm), (age_pcm,), ("age",))
        out[(2, arm)] = PchCsModel(knots, tuple(np.log(oth) + base * age_oth), (age_oth,), ("age",))
    return CauseModelSet(out)


def sthlm3_like_spec(seed: int = STHLM3_LIKE_SEED, n: int = 20000) -> SyntheticSpec:
    """Men aged 50-69, 70% invited, invitations over 2.7 years, interim at 6.7 years."""
    n1 = int(round(0.7 * n))
    return SyntheticSpec(
        models=sthlm3_like_models(),
        n_per_arm=(n - n1, n1),
        covariates={"age": CovariateGen("uniform_int", (50, 69))},
        accrual=2.7,
        analysis_time=6.7,
        record_offset=True,
        seed=seed,
        time_unit="years",
        id_prefix="M",
    )
