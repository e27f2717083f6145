"""Predictive probability of success: repeat prediction and analysis K times.

Each replicate k owns the random stream keyed by ``(master_seed, k)``, so the
result does not depend on how replicates are spread over worker processes.
The analysis-phase sampler uses one fixed seed, which makes the per-replicate
statistic a deterministic function of the completed dataset.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import multiprocessing as mp
import numpy as np

from . import rng as rngmod
from .analysis import BayesPhAnalysis, Criterion, DecisionRule, RiskRatioAnalysis, aalen_johansen, evaluate_rule
from .dataset import CompetingRiskDataset, partition_interim
from .fitting import ConvergenceError, FittedModel, StratumSpec, fit_models
from .hazards import ModelError, PchPriors, WeibullPriors
from .priors import Normal
from .sampler import SamplerConfig, SamplerError
from .simulate import CensoringRule, EnrollmentSpec, covariate_posteriors, predict_final_dataset

__all__ = [
    "PposConfig",
    "ReplicateRecord",
    "PposResult",
    "ReplicateValidityError",
    "run_ppos",
    "analyse",
    "mc_standard_error",
    "PriorGrid",
    "HorizonGrid",
    "ScenarioResult",
    "run_scenarios",
]

log = logging.getLogger(__name__)


class ReplicateValidityError(RuntimeError):
    """Too many replicates failed their analysis."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def mc_standard_error(ppos: float, K: int) -> float:
    """Binomial Monte Carlo standard error sqrt(p (1 - p) / K)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 <= ppos <= 1:
        raise ValueError("ppos must lie in [0, 1]")
    return math.sqrt(ppos * (1.0 - ppos) / K)


@dataclass(frozen=True)
class PposConfig:
    """Everything needed to compute one PPoS.

    ``rule`` defaults to the conjunction of each analysis's own criterion.
    ``curve_grid`` (optional) stores each replicate's cause-1 CIF per arm on
    these times, for plotting.
    """

    strata: tuple
    analyses: tuple
    K: int = 2500
    master_seed: int = 0
    rule: DecisionRule | None = None
    enrollment: EnrollmentSpec | None = None
    censoring: CensoringRule = CensoringRule()
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    max_invalid_frac: float = 0.01
    curve_grid: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "analyses", tuple(self.analyses))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.analyses:
            raise ValueError("at least one analysis is required")
        if self.rule is None:
            crits = tuple(c for a in self.analyses for c in a.default_rule().criteria)
            object.__setattr__(self, "rule", DecisionRule(crits))
        if self.curve_grid is not None:
            object.__setattr__(self, "curve_grid", tuple(float(t) for t in self.curve_grid))

    def replace(self, **kw) -> "PposConfig":
        return replace(self, **kw)

    @property
    def analysis_seed(self) -> int:
        return rngmod.child_seed(self.master_seed, rngmod.ANALYSIS)


@dataclass
class ReplicateRecord:
    index: int
    replicate_seed: int
    draw_index: int
    statistic: float
    G: int
    valid: bool
    reason: str = ""
    statistics: dict = field(default_factory=dict)
    curves: dict | None = None

    def to_json(self) -> dict:
        return {"index": self.index, "replicate_seed": self.replicate_seed, "draw_index": self.draw_index,
                "statistic": _clean(self.statistic), "G": self.G, "valid": self.valid, "reason": self.reason}


def _clean(x):
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class PposResult:
    ppos: float
    mc_se: float
    K: int
    K_effective: int
    records: list
    seed: int
    diagnostics: dict = field(default_factory=dict)
    fit_skipped: bool = False
    elapsed: float = 0.0

    @property
    def n_invalid(self) -> int:
        return self.K - self.K_effective

    def successes(self) -> int:
        return int(sum(r.G for r in self.records if r.valid))

    def report(self, config_echo: str | None = None) -> dict:
        """JSON-ready report (no timing or worker information, so it is reproducible)."""
        out = {
            "ppos": self.ppos,
            "mc_se": self.mc_se,
            "K": self.K,
            "K_effective": self.K_effective,
            "n_invalid": self.n_invalid,
            "seed": self.seed,
            "fit_skipped": self.fit_skipped,
            "diagnostics": self.diagnostics,
            "per_replicate": [r.to_json() for r in self.records],
        }
        if config_echo is not None:
            out["config_echo"] = config_echo
        return out


# -- per-replicate work -------------------------------------------------------------------


def analyse(data: CompetingRiskDataset, config: PposConfig) -> tuple[dict, bool, bool]:
    """Run every analysis on one completed dataset.

    Returns ``(statistics, valid, G)``.  G is False when the analysis is invalid.
    """
    stats = {}
    valid = True
    for a in config.analyses:
        s = a.statistics(data, config.analysis_seed)
        valid = valid and bool(s.pop("valid", True))
        s.pop("degenerate", None)
        stats.update(s)
    G = bool(valid and evaluate_rule(stats, config.rule))
    return stats, valid, G


def _curves(data, grid):
    out = {}
    for arm in (0, 1):
        if np.any(data.arm == arm):
            out[arm] = aalen_johansen(data, arm).cif(np.asarray(grid), 1).tolist()
    return out


_STATE = {}


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _replicate(k: int) -> ReplicateRecord:
    st = _STATE
    config: PposConfig = st["config"]
    seed = rngmod.child_seed(config.master_seed, rngmod.REPLICATE, k)
    draw = int(st["draw_idx"][k]) if st["draw_idx"] is not None else -1
    primary = config.rule.criteria[0].statistic
    try:
        if st["fitted"] is None:
            data = st["fixed_data"]
        else:
            rng = rngmod.stream(seed)
            eta = {name: float(b.sample(rng)) for name, b in st["eta_post"].items()}
            models = st["fitted"].model_set(draw)
            data = predict_final_dataset(st["d_obs"], st["d_cens"], models, rng, enrollment=config.enrollment,
                                         eta=eta, censoring=config.censoring)
        stats, valid, G = analyse(data, config)
        curves = _curves(data, config.curve_grid) if config.curve_grid else None
        return ReplicateRecord(k, seed, draw, float(stats.get(primary, math.nan)), int(G), valid,
                               "" if valid else "analysis diagnostics failed", stats, curves)
    except (ModelError, SamplerError, ValueError, FloatingPointError) as exc:
        return ReplicateRecord(k, seed, draw, math.nan, 0, False, f"{type(exc).__name__}: {exc}")


def _run_replicates(indices, state, workers: int):
    if workers <= 1 or len(indices) < 2:
        _init_worker(state)
        return [_replicate(k) for k in indices]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    chunk = max(1, len(indices) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(state,)) as pool:
        return list(pool.map(_replicate, indices, chunksize=chunk))


def _select_draws(n_draws: int, K: int, master_seed: int) -> np.ndarray:
    rng = rngmod.stream(master_seed, rngmod.DRAW_SELECTION)
    if n_draws >= K:
        return rng.permutation(n_draws)[:K]
    log.warning("only %d posterior draws for K=%d replicates: sampling draws with replacement", n_draws, K)
    return rng.integers(0, n_draws, size=K)


def run_ppos(interim: CompetingRiskDataset, config: PposConfig, *, workers: int = 1,
             fitted: FittedModel | None = None) -> PposResult:
    """PPoS of ``config.rule`` given interim data.

    Raises
    ------
    ConvergenceError
        Prediction-phase posterior diagnostics failed.
    ReplicateValidityError
        More than ``max_invalid_frac`` of the replicates were invalid.
    """
    t0 = time.perf_counter()
    d_obs, d_cens = partition_interim(interim)
    nothing_to_predict = len(d_cens) == 0 and config.enrollment is None
    K = config.K
    state = {"config": config, "d_obs": d_obs, "d_cens": d_cens, "fitted": None, "draw_idx": None,
             "eta_post": {}, "fixed_data": None}
    diagnostics = {}
    if nothing_to_predict:
        # every replicate analyses the same dataset
        state["fixed_data"] = config.censoring.apply(d_obs)
        _init_worker(state)
        first = _replicate(0)
        records = [ReplicateRecord(k, rngmod.child_seed(config.master_seed, rngmod.REPLICATE, k), -1,
                                   first.statistic, first.G, first.valid, first.reason, first.statistics)
                   for k in range(K)]
    else:
        if fitted is None:
            fitted = fit_models(config.strata, interim, config.sampler)
        diagnostics = fitted.diagnostics_summary()
        state["fitted"] = fitted
        state["draw_idx"] = _select_draws(fitted.n_draws, K, config.master_seed)
        if config.enrollment is not None:
            state["eta_post"] = covariate_posteriors(config.enrollment, interim)
        records = _run_replicates(list(range(K)), state, workers)
    valid = [r for r in records if r.valid]
    n_invalid = K - len(valid)
    ppos = float(np.mean([r.G for r in valid])) if valid else math.nan
    result = PposResult(ppos, mc_standard_error(ppos, len(valid)) if valid else math.nan, K, len(valid), records,
                        config.master_seed, diagnostics, nothing_to_predict, time.perf_counter() - t0)
    if n_invalid > config.max_invalid_frac * K:
        reasons = sorted({r.reason for r in records if not r.valid})
        raise ReplicateValidityError(f"{n_invalid} of {K} replicates invalid: {reasons[:3]}", result)
    if n_invalid:
        log.warning("%d invalid replicates excluded", n_invalid)
    return result


# -- scenario grids -------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorGrid:
    """Arm-coefficient priors Normal(mu, sigma) for one cause of a PH prediction model."""

    mu: tuple
    sigma: tuple
    cause: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if not self.mu or not self.sigma:
            raise ValueError("prior grid axes must be nonempty")
        if not all(math.isfinite(m) for m in self.mu) or not all(s > 0 and math.isfinite(s) for s in self.sigma):
            raise ValueError("prior grid values must be finite, sigma positive")

    def scenarios(self, base: PposConfig):
        for mu in self.mu:
            for sigma in self.sigma:
                yield {"mu": mu, "sigma": sigma}, _with_arm_prior(base, self.cause, Normal(mu, sigma))


def _with_arm_prior(config: PposConfig, cause: int, prior) -> PposConfig:
    strata = []
    hit = False
    for s in config.strata:
        if s.cause == cause and "arm" in s.covariates:
            coefs = dict(s.priors.coefs)
            coefs["arm"] = prior
            s = replace(s, priors=replace(s.priors, coefs=coefs))
            hit = True
        strata.append(s)
    if not hit:
        raise ModelError(f"prior grid needs a proportional-hazards model (arm covariate) for cause {cause}")
    return config.replace(strata=tuple(strata))


@dataclass(frozen=True)
class HorizonGrid:
    """Final-analysis times; censoring horizons and evaluation times follow them."""

    horizons: tuple

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(float(h) for h in self.horizons))
        if not self.horizons or not all(h > 0 and math.isfinite(h) for h in self.horizons):
            raise ValueError("horizons must be nonempty, positive and finite")

    def scenarios(self, base: PposConfig):
        mode = base.censoring.mode if base.censoring.mode in ("scalar", "calendar") else "scalar"
        for h in self.horizons:
            analyses = tuple(replace(a, eval_time=h) if isinstance(a, RiskRatioAnalysis) else a
                             for a in base.analyses)
            yield {"horizon": h}, base.replace(censoring=CensoringRule(mode, h), analyses=analyses)


@dataclass
class ScenarioResult:
    label: dict
    result: PposResult | None
    error: str = ""


def run_scenarios(interim: CompetingRiskDataset, base: PposConfig, grid, *, workers: int = 1,
                  seed_mode: str = "independent") -> list[ScenarioResult]:
    """One PPoS per grid cell.

    ``seed_mode="independent"`` seeds scenario i with ``master_seed + i``;
    ``"common"`` reuses ``master_seed`` everywhere (common random numbers,
    which sharpens comparisons between neighbouring cells).  Prediction-model
    fits are reused between cells with identical strata.
    """
    if seed_mode not in ("independent", "common"):
        raise ValueError("seed_mode must be 'independent' or 'common'")
    cache = {}
    out = []
    for i, (label, cfg) in enumerate(grid.scenarios(base)):
        cfg = cfg.replace(master_seed=base.master_seed + (i if seed_mode == "independent" else 0))
        key = repr((cfg.strata, cfg.sampler))
        try:
            fitted = cache.get(key)
            d_obs, d_cens = partition_interim(interim)
            if fitted is None and (len(d_cens) or cfg.enrollment is not None):
                fitted = fit_models(cfg.strata, interim, cfg.sampler)
                cache[key] = fitted
            res = run_ppos(interim, cfg, workers=workers, fitted=fitted)
            out.append(ScenarioResult(label, res))
        except (ConvergenceError, ReplicateValidityError, ModelError) as exc:
            log.error("scenario %s failed: %s", label, exc)
            out.append(ScenarioResult(label, None, f"{type(exc).__name__}: {exc}"))
    return out
