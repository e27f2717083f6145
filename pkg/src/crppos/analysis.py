"""Final-analysis statistics and decision rules.

Aalen-Johansen variance
-----------------------
With ``n_j`` at risk, ``d_j`` events of any cause and ``d_kj`` of cause k at
event time ``t_j``, and ``S(t_j-)`` the event-free survival just before it,
the counting-process (Aalen-type) plug-in variance is::

    Var F_k(t) = sum_{t_j <= t} [ (F_k(t) - F_k(t_j))^2 d_j / n_j^2
                                 + S(t_j-)^2 d_kj / n_j^2
                                 - 2 (F_k(t) - F_k(t_j)) S(t_j-) d_kj / n_j^2 ]

The risk-ratio test uses the delta method on the log scale with independent
groups: ``Var log RR = Var F_e / F_e^2 + Var F_r / F_r^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .dataset import CompetingRiskDataset
from .fitting import StratumSpec, fit_stratum
from .hazards import WeibullPriors
from .sampler import SamplerConfig

__all__ = [
    "CifEstimate",
    "aalen_johansen",
    "RiskRatioResult",
    "risk_ratio_test",
    "bayes_ph_graduation",
    "Criterion",
    "DecisionRule",
    "evaluate_rule",
    "RiskRatioAnalysis",
    "BayesPhAnalysis",
    "normal_two_sided_p",
    "save_cif",
]


@dataclass(frozen=True)
class CifEstimate:
    """Aalen-Johansen estimate on the distinct event times."""

    time: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    S: np.ndarray
    var1: np.ndarray
    var2: np.ndarray
    n_risk: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    S_minus: np.ndarray

    def _index(self, t):
        return np.searchsorted(self.time, np.asarray(t, dtype=float), side="right") - 1

    def cif(self, t, cause: int = 1):
        """Step-function value of F_cause at ``t``."""
        F = self.F1 if cause == 1 else self.F2
        i = self._index(t)
        return np.where(i >= 0, F[np.maximum(i, 0)] if F.size else 0.0, 0.0)

    def survival(self, t):
        i = self._index(t)
        return np.where(i >= 0, self.S[np.maximum(i, 0)] if self.S.size else 1.0, 1.0)

    def variance(self, t, cause: int = 1) -> float:
        """Aalen-type variance of F_cause at one time, summed directly."""
        t = float(t)
        k = int(self._index(t)) + 1
        if k == 0:
            return 0.0
        F = (self.F1 if cause == 1 else self.F2)[:k]
        dk = (self.d1 if cause == 1 else self.d2)[:k]
        d = (self.d1 + self.d2)[:k]
        n2 = self.n_risk[:k].astype(float) ** 2
        Sm = self.S_minus[:k]
        gap = F[-1] - F
        v = np.sum(gap**2 * d / n2 + Sm**2 * dk / n2 - 2.0 * gap * Sm * dk / n2)
        return float(max(v, 0.0))


def aalen_johansen(data: CompetingRiskDataset, group=None) -> CifEstimate:
    """Cumulative incidence of both causes by the product-limit construction.

    ``group`` is an arm index, a boolean row mask, or None for all rows.
    Events tied at one time share the risk set.
    """
    if group is None:
        time, event = data.time, data.event
    elif isinstance(group, (int, np.integer)):
        sel = data.arm == group
        time, event = data.time[sel], data.event[sel]
    else:
        sel = np.asarray(group, dtype=bool)
        time, event = data.time[sel], data.event[sel]
    if time.size == 0:
        raise ValueError("aalen_johansen needs a nonempty group")
    order = np.argsort(time, kind="stable")
    time, event = time[order], event[order]
    uniq, first = np.unique(time, return_index=True)
    n_at = time.size - first
    d1 = np.add.reduceat((event == 1).astype(np.int64), first)
    d2 = np.add.reduceat((event == 2).astype(np.int64), first)
    keep = (d1 + d2) > 0
    uniq, n_at, d1, d2 = uniq[keep], n_at[keep], d1[keep], d2[keep]
    d = d1 + d2
    S = np.cumprod(1.0 - d / n_at)
    S_minus = np.concatenate([[1.0], S[:-1]])
    F1 = np.cumsum(S_minus * d1 / n_at)
    F2 = np.cumsum(S_minus * d2 / n_at)
    var1 = _variance_curve(F1, d1, d, n_at, S_minus)
    var2 = _variance_curve(F2, d2, d, n_at, S_minus)
    return CifEstimate(uniq, F1, F2, S, var1, var2, n_at, d1, d2, S_minus)


def _variance_curve(F, dk, d, n, Sm):
    """The variance formula at every jump time via cumulative sums."""
    n2 = n.astype(float) ** 2
    a = d / n2
    c = Sm * dk / n2
    b = Sm * c
    A = np.cumsum(a)
    FA = np.cumsum(F * a)
    F2A = np.cumsum(F**2 * a)
    B = np.cumsum(b)
    C = np.cumsum(c)
    FC = np.cumsum(F * c)
    v = F**2 * A - 2 * F * FA + F2A + B - 2 * (F * C - FC)
    return np.maximum(v, 0.0)


def save_cif(est: CifEstimate, path) -> Path:
    """Write the curve as CSV: time, F1, F2, S, var1, var2, n_risk."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "F1", "F2", "S", "var1", "var2", "n_risk"])
        for row in zip(est.time, est.F1, est.F2, est.S, est.var1, est.var2, est.n_risk):
            w.writerow([repr(float(x)) for x in row[:-1]] + [int(row[-1])])
    return path


# -- risk-ratio test --------------------------------------------------------------


def normal_two_sided_p(z):
    """2 * Phi(-|z|)."""
    return float(special.erfc(abs(z) / math.sqrt(2.0)))


@dataclass(frozen=True)
class RiskRatioResult:
    rr: float
    log_rr: float
    ase_log_rr: float
    p_value: float
    eval_time: float
    success: bool
    degenerate: bool = False


def risk_ratio_test(cif_exposed: CifEstimate, cif_referent: CifEstimate, t_eval: float, alpha: float,
                    cause: int = 1) -> RiskRatioResult:
    """RR = F_e(t)/F_r(t) with p = 2 Phi(-|log RR / ASE|); success iff p <= alpha."""
    fe = float(cif_exposed.cif(t_eval, cause))
    fr = float(cif_referent.cif(t_eval, cause))
    if fe <= 0 or fr <= 0:
        return RiskRatioResult(math.nan, math.nan, math.nan, 1.0, float(t_eval), False, True)
    ve = cif_exposed.variance(t_eval, cause)
    vr = cif_referent.variance(t_eval, cause)
    log_rr = math.log(fe / fr)
    ase = math.sqrt(ve / fe**2 + vr / fr**2)
    if ase == 0:
        if log_rr == 0:
            return RiskRatioResult(fe / fr, log_rr, 0.0, 1.0, float(t_eval), False, True)
        p = 0.0
    else:
        p = normal_two_sided_p(log_rr / ase)
    return RiskRatioResult(fe / fr, log_rr, ase, p, float(t_eval), p <= alpha)


# -- Bayesian proportional hazards ----------------------------------------------------

ANALYSIS_PRIORS = WeibullPriors()


def bayes_ph_graduation(data: CompetingRiskDataset, cause: int = 1, h0: float = 1.0, threshold: float = 0.975,
                        config: SamplerConfig = SamplerConfig(), *, covariates: Sequence[str] = (),
                        priors: WeibullPriors = ANALYSIS_PRIORS, direction: str = ">") -> dict:
    """Posterior probability that the arm-1 vs arm-0 cause-specific HR exceeds ``h0``.

    Fits a Weibull proportional-hazards model for ``cause`` over both arms
    with an arm coefficient (plus ``covariates``).  ``direction="<"`` gives
    Pr(HR < h0) instead.

    Returns a dict with ``posterior_prob``, ``success``, ``converged`` and the
    posterior median HR.
    """
    if len(set(data.arm.tolist())) < 2:
        raise ValueError("both arms must be represented")
    if direction not in (">", "<"):
        raise ValueError("direction must be '>' or '<'")
    spec = StratumSpec(cause, None, "weibull", ("arm", *covariates), priors=priors)
    fit = fit_stratum(spec, data, config)
    hr = np.exp(fit.draws.column("beta_arm"))
    prob = float(np.mean(hr > h0) if direction == ">" else np.mean(hr < h0))
    return {
        "posterior_prob": prob,
        "success": prob >= threshold,
        "converged": fit.draws.converged,
        "hr_median": float(np.median(hr)),
        "flagged": fit.draws.flagged(),
    }


# -- decision rules -------------------------------------------------------------------


@dataclass(frozen=True)
class Criterion:
    """One component of a critical region.

    ``kind="posterior"`` succeeds when ``statistic >= threshold``;
    ``kind="p_value"`` succeeds when ``statistic <= threshold``.
    """

    kind: str
    threshold: float
    statistic: str | None = None

    def __post_init__(self):
        if self.kind not in ("posterior", "p_value"):
            raise ValueError(f"unknown criterion kind {self.kind!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("criterion threshold must lie in (0, 1)")
        if self.statistic is None:
            object.__setattr__(self, "statistic", "posterior_prob" if self.kind == "posterior" else "p_value")

    def met(self, value: float) -> bool:
        return value >= self.threshold if self.kind == "posterior" else value <= self.threshold


@dataclass(frozen=True)
class DecisionRule:
    """Conjunction of one or more criteria."""

    criteria: tuple

    def __post_init__(self):
        object.__setattr__(self, "criteria", tuple(self.criteria))
        if not self.criteria:
            raise ValueError("a decision rule needs at least one criterion")


def evaluate_rule(statistics: Mapping, rule: DecisionRule) -> bool:
    """G = 1 iff every criterion of ``rule`` is met."""
    ok = True
    for crit in rule.criteria:
        if crit.statistic not in statistics:
            raise KeyError(f"statistic {crit.statistic!r} missing for decision rule")
        ok = crit.met(float(statistics[crit.statistic])) and ok
    return ok


# -- analysis specifications used by the orchestrator -----------------------------------


@dataclass(frozen=True)
class RiskRatioAnalysis:
    """Aalen-Johansen risk ratio of ``cause`` at ``eval_time`` (exposed vs referent arm).

    ``eval_time=None`` evaluates at the largest follow-up time in the data.
    """

    cause: int = 1
    eval_time: float | None = None
    exposed_arm: int = 1
    alpha: float = 0.035
    name: str = "p_value"

    def statistics(self, data: CompetingRiskDataset, seed: int = 0) -> dict:
        t = float(data.time.max()) if self.eval_time is None else float(self.eval_time)
        exp_ = aalen_johansen(data, self.exposed_arm)
        ref = aalen_johansen(data, 1 - self.exposed_arm)
        res = risk_ratio_test(exp_, ref, t, self.alpha, self.cause)
        return {self.name: res.p_value, f"{self.name}.rr": res.rr, f"{self.name}.ase_log_rr": res.ase_log_rr,
                "valid": True, "degenerate": res.degenerate}

    def default_rule(self) -> DecisionRule:
        return DecisionRule((Criterion("p_value", self.alpha, self.name),))


@dataclass(frozen=True)
class BayesPhAnalysis:
    """Posterior probability Pr(csHR > h0) from a Weibull PH model."""

    cause: int = 1
    h0: float = 1.0
    threshold: float = 0.975
    direction: str = ">"
    covariates: tuple = ()
    priors: WeibullPriors = ANALYSIS_PRIORS
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    name: str = "posterior_prob"

    def statistics(self, data: CompetingRiskDataset, seed: int = 0) -> dict:
        cfg = self.sampler.replace(seed=seed)
        out = bayes_ph_graduation(data, self.cause, self.h0, self.threshold, cfg, covariates=self.covariates,
                                  priors=self.priors, direction=self.direction)
        return {self.name: out["posterior_prob"], f"{self.name}.hr_median": out["hr_median"],
                "valid": bool(out["converged"]), "degenerate": False}

    def default_rule(self) -> DecisionRule:
        return DecisionRule((Criterion("posterior", self.threshold, self.name),))
