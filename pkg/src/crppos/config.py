"""YAML run configuration for the command-line tools.

A configuration is parsed into a normalised dictionary with every default
filled in.  That dictionary is what gets echoed into reports, and loading an
echo gives back the same configuration.

Numbers may be written as expressions of the form ``log(x)``, ``sqrt(x)`` or
``exp(x)``, which is convenient for prior grids.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .analysis import BayesPhAnalysis, Criterion, DecisionRule, RiskRatioAnalysis
from .dataset import CompetingRiskDataset, DatasetError, Schema, load_dataset
from .fitting import StratumSpec
from .hazards import CauseModelSet, ModelError, PchCsModel, PchPriors, WeibullCsModel, WeibullPriors
from .ppos import HorizonGrid, PposConfig, PriorGrid
from .priors import Beta, parse_prior, prior_to_config
from .sampler import SamplerConfig
from .simulate import CensoringRule, EnrollmentSpec
from .synthetic import CovariateGen, SyntheticSpec, ispy_like_spec, sthlm3_like_spec

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "load_simulation_spec", "dump_yaml",
           "DATA_DIR"]

# bundled example datasets and configurations
DATA_DIR = Path(__file__).resolve().with_name("data")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_EXPR = re.compile(r"^\s*(log|sqrt|exp)\(\s*([-+0-9.eE]+)\s*\)\s*$")
_FUNCS = {"log": math.log, "sqrt": math.sqrt, "exp": math.exp}


def _num(v, what="value") -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{what}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        m = _EXPR.match(v)
        try:
            return _FUNCS[m.group(1)](float(m.group(2))) if m else float(v)
        except (ValueError, OverflowError):
            pass
    raise ConfigError(f"{what}: cannot read {v!r} as a number")


def _nums(v, what="value") -> list:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{what}: expected a list")
    return [_num(x, what) for x in v]


def _int(v, what) -> int:
    x = _num(v, what)
    if not x.is_integer():
        raise ConfigError(f"{what}: expected an integer, got {v!r}")
    return int(x)


def _prior(obj, what):
    def conv(o):
        if isinstance(o, Mapping):
            return {k: conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [_num(x, what) for x in o]
        if isinstance(o, str) and o != "flat":
            return _num(o, what)
        return o

    try:
        return parse_prior(conv(obj))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _check_keys(block: Mapping, allowed, what):
    if not isinstance(block, Mapping):
        raise ConfigError(f"{what}: expected a mapping")
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"{what}: unknown key(s) {extra}")


def dump_yaml(obj) -> str:
    return yaml.safe_dump(obj, sort_keys=False, default_flow_style=None, width=100)


# -- blocks -------------------------------------------------------------------------------


def _norm_dataset(block, base_dir: Path):
    if isinstance(block, str):
        block = {"path": block}
    _check_keys(block, ("path", "time_unit", "covariates"), "dataset")
    if "path" not in block:
        raise ConfigError("dataset: 'path' is required")
    covs = block.get("covariates") or {}
    _check_keys(covs, covs.keys(), "dataset.covariates")
    for name, kind in covs.items():
        if kind not in ("binary", "real"):
            raise ConfigError(f"dataset.covariates.{name}: kind must be 'binary' or 'real'")
    return {"path": str(block["path"]), "time_unit": str(block.get("time_unit", "")), "covariates": dict(covs)}


def _norm_priors(block, family, where):
    block = block or {}
    if family == "weibull":
        _check_keys(block, ("intercept", "shape", "coefs", "default_coef"), where)
        d = WeibullPriors()
        out = {"intercept": _prior(block.get("intercept", prior_to_config(d.intercept)), f"{where}.intercept"),
               "shape": _prior(block.get("shape", prior_to_config(d.shape)), f"{where}.shape")}
    else:
        _check_keys(block, ("levels", "coefs", "default_coef"), where)
        d = PchPriors()
        out = {"levels": _prior(block.get("levels", prior_to_config(d.levels)), f"{where}.levels")}
    out["default_coef"] = _prior(block.get("default_coef", prior_to_config(d.default_coef)), f"{where}.default_coef")
    coefs = block.get("coefs") or {}
    _check_keys(coefs, coefs.keys(), f"{where}.coefs")
    out["coefs"] = {k: _prior(v, f"{where}.coefs.{k}") for k, v in coefs.items()}
    return out


def _priors_object(p, family):
    if family == "weibull":
        return WeibullPriors(p["intercept"], p["shape"], p["coefs"], p["default_coef"])
    return PchPriors(p["levels"], p["coefs"], p["default_coef"])


def _priors_config(p) -> dict:
    out = {k: prior_to_config(v) for k, v in p.items() if k != "coefs"}
    out["coefs"] = {k: prior_to_config(v) for k, v in p["coefs"].items()}
    return out


def _norm_model(block, i):
    where = f"models[{i}]"
    _check_keys(block, ("cause", "arm", "family", "covariates", "knots", "priors"), where)
    for key in ("cause", "family"):
        if key not in block:
            raise ConfigError(f"{where}: '{key}' is required")
    family = block["family"]
    arm = block.get("arm")
    covariates = list(block.get("covariates") or [])
    knots = _nums(block.get("knots") or [], f"{where}.knots")
    priors = _norm_priors(block.get("priors"), family, f"{where}.priors") if family in ("weibull", "pch") else None
    try:
        spec = StratumSpec(_int(block["cause"], f"{where}.cause"), None if arm is None else _int(arm, f"{where}.arm"),
                           family, tuple(covariates), tuple(knots),
                           _priors_object(priors, family) if priors else None)
    except ModelError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    norm = {"cause": spec.cause, "arm": spec.arm, "family": family, "covariates": covariates}
    if family == "pch":
        norm["knots"] = knots
    norm["priors"] = _priors_config(priors)
    return norm, spec


def _norm_sampler(block, where="sampler"):
    block = block or {}
    fields = SamplerConfig.__dataclass_fields__
    _check_keys(block, fields, where)
    kw = {}
    for k, v in block.items():
        kw[k] = v if k == "kernel" else (_int(v, f"{where}.{k}") if isinstance(fields[k].default, int)
                                          else _num(v, f"{where}.{k}"))
    try:
        cfg = SamplerConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return {k: getattr(cfg, k) for k in fields}, cfg


def _norm_enrollment(block):
    if block is None:
        return None, None
    _check_keys(block, ("n_new_fixed_arm", "randomization_prob", "fixed_arm", "binary_covariates",
                        "covariate_prior"), "enrollment")
    try:
        prior = _prior(block.get("covariate_prior", {"beta": [1, 1]}), "enrollment.covariate_prior")
        if not isinstance(prior, Beta):
            raise ConfigError("enrollment.covariate_prior must be a beta prior")
        spec = EnrollmentSpec(_int(block.get("n_new_fixed_arm", 0), "enrollment.n_new_fixed_arm"),
                              _num(block.get("randomization_prob", 0.5), "enrollment.randomization_prob"),
                              _int(block.get("fixed_arm", 1), "enrollment.fixed_arm"),
                              tuple(block.get("binary_covariates") or ()), prior)
    except ModelError as exc:
        raise ConfigError(f"enrollment: {exc}") from None
    norm = {"n_new_fixed_arm": spec.n_new_fixed_arm, "randomization_prob": spec.randomization_prob,
            "fixed_arm": spec.fixed_arm, "binary_covariates": list(spec.binary_covariates),
            "covariate_prior": prior_to_config(prior)}
    return norm, spec


def _read_horizon_file(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"censoring.file: {path}: no such file")
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["subject_id", "horizon"]:
            raise ConfigError(f"{path}: header must be subject_id,horizon")
        for i, row in enumerate(reader, start=1):
            if row:
                out[row[0].strip()] = _num(row[1].strip(), f"{path} row {i}")
    return out


def _norm_censoring(block, base_dir: Path):
    block = block or {"mode": "none"}
    _check_keys(block, ("mode", "horizon", "file"), "censoring")
    mode = block.get("mode", "none")
    norm = {"mode": mode}
    try:
        if mode in ("scalar", "calendar"):
            if "horizon" not in block:
                raise ConfigError(f"censoring: mode {mode!r} needs 'horizon'")
            norm["horizon"] = _num(block["horizon"], "censoring.horizon")
            rule = CensoringRule(mode, norm["horizon"])
        elif mode == "per_subject":
            if "file" not in block:
                raise ConfigError("censoring: mode 'per_subject' needs 'file' (CSV subject_id,horizon)")
            norm["file"] = str(block["file"])
            rule = CensoringRule(mode, _read_horizon_file(base_dir / norm["file"]))
        else:
            rule = CensoringRule(mode)
    except ModelError as exc:
        raise ConfigError(f"censoring: {exc}") from None
    return norm, rule


_ANALYSIS_KEYS = {
    "risk_ratio": ("kind", "cause", "eval_time", "exposed_arm", "alpha"),
    "bayes_ph": ("kind", "cause", "h0", "threshold", "direction", "covariates", "priors", "sampler"),
}


def _norm_analysis(block):
    if not isinstance(block, Mapping) or "kind" not in block:
        raise ConfigError("analysis: a mapping with 'kind' (risk_ratio or bayes_ph) is required")
    kind = block["kind"]
    if kind not in _ANALYSIS_KEYS:
        raise ConfigError(f"analysis.kind must be one of {sorted(_ANALYSIS_KEYS)}, got {kind!r}")
    _check_keys(block, _ANALYSIS_KEYS[kind], "analysis")
    cause = _int(block.get("cause", 1), "analysis.cause")
    if kind == "risk_ratio":
        et = block.get("eval_time")
        a = RiskRatioAnalysis(cause=cause, eval_time=None if et is None else _num(et, "analysis.eval_time"),
                              exposed_arm=_int(block.get("exposed_arm", 1), "analysis.exposed_arm"),
                              alpha=_num(block.get("alpha", 0.035), "analysis.alpha"))
        norm = {"kind": kind, "cause": a.cause, "eval_time": a.eval_time, "exposed_arm": a.exposed_arm,
                "alpha": a.alpha}
        return norm, a
    priors = _norm_priors(block.get("priors"), "weibull", "analysis.priors")
    s_norm, s_cfg = _norm_sampler(block.get("sampler"), "analysis.sampler")
    direction = block.get("direction", ">")
    if direction not in (">", "<"):
        raise ConfigError("analysis.direction must be '>' or '<'")
    a = BayesPhAnalysis(cause=cause, h0=_num(block.get("h0", 1.0), "analysis.h0"),
                        threshold=_num(block.get("threshold", 0.975), "analysis.threshold"),
                        direction=direction, covariates=tuple(block.get("covariates") or ()),
                        priors=_priors_object(priors, "weibull"), sampler=s_cfg)
    norm = {"kind": kind, "cause": a.cause, "h0": a.h0, "threshold": a.threshold, "direction": a.direction,
            "covariates": list(a.covariates), "priors": _priors_config(priors), "sampler": s_norm}
    return norm, a


def _norm_grid(block):
    if block is None:
        return None, None, "independent"
    _check_keys(block, ("prior", "horizons", "seed_mode"), "grid")
    seed_mode = block.get("seed_mode", "independent")
    if seed_mode not in ("independent", "common"):
        raise ConfigError("grid.seed_mode must be 'independent' or 'common'")
    if ("prior" in block) == ("horizons" in block):
        raise ConfigError("grid: give exactly one of 'prior' or 'horizons'")
    try:
        if "prior" in block:
            p = block["prior"]
            _check_keys(p, ("mu", "sigma", "cause"), "grid.prior")
            g = PriorGrid(_nums(p.get("mu"), "grid.prior.mu"), _nums(p.get("sigma"), "grid.prior.sigma"),
                          _int(p.get("cause", 1), "grid.prior.cause"))
            norm = {"prior": {"mu": list(g.mu), "sigma": list(g.sigma), "cause": g.cause}}
        else:
            g = HorizonGrid(_nums(block["horizons"], "grid.horizons"))
            norm = {"horizons": list(g.horizons)}
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None
    norm["seed_mode"] = seed_mode
    return norm, g, seed_mode


# -- top level --------------------------------------------------------------------------------


_TOP = ("dataset", "models", "enrollment", "censoring", "analysis", "sampler", "K", "seed", "max_invalid_frac",
        "curve_grid", "grid", "output")


@dataclass
class RunConfig:
    """A parsed run configuration.

    ``normalized`` holds the effective settings (defaults filled in);
    :meth:`echo` serialises it.
    """

    normalized: dict
    base_dir: Path
    strata: tuple
    ppos: PposConfig
    grid: object
    seed_mode: str

    @property
    def dataset_path(self) -> Path:
        return (self.base_dir / self.normalized["dataset"]["path"]).resolve()

    @property
    def output_dir(self) -> Path:
        return self.base_dir / self.normalized["output"]

    def echo(self) -> str:
        """Effective settings as YAML.  The output location is left out so that
        reports written to different directories stay byte-identical."""
        return dump_yaml({k: v for k, v in self.normalized.items() if k != "output"})

    def load_data(self) -> CompetingRiskDataset:
        d = self.normalized["dataset"]
        schema = Schema(d["covariates"]) if d["covariates"] else None
        data = load_dataset(self.dataset_path, schema=schema, time_unit=d["time_unit"])
        self.check_against(data)
        return data

    def check_against(self, data: CompetingRiskDataset):
        """Every referenced covariate must exist in the dataset."""
        names = set(data.schema.names) | {"arm"}
        used = {c for s in self.strata for c in s.covariates}
        for a in self.ppos.analyses:
            used |= set(getattr(a, "covariates", ()))
        if self.ppos.enrollment is not None:
            used |= set(self.ppos.enrollment.binary_covariates)
            missing_enroll = set(self.ppos.enrollment.binary_covariates) - set(data.schema.names)
            if missing_enroll:
                raise ConfigError(f"enrollment covariates {sorted(missing_enroll)} not in dataset")
            other = {c for s in self.strata for c in s.covariates} - {"arm"} - set(
                self.ppos.enrollment.binary_covariates)
            if other and self.ppos.enrollment.n_new_fixed_arm > 0:
                raise ConfigError(f"new enrollees need a generator for covariates {sorted(other)}; "
                                  "list them in enrollment.binary_covariates")
        missing = sorted(used - names)
        if missing:
            raise ConfigError(f"covariates {missing} are not columns of the dataset")


def parse_config(raw: Mapping, base_dir=".", *, seed=None, K=None, out=None) -> RunConfig:
    """Validate a configuration mapping; ``seed``, ``K`` and ``out`` override it."""
    base_dir = Path(base_dir)
    _check_keys(raw, _TOP, "config")
    for key in ("dataset", "models", "analysis"):
        if key not in raw:
            raise ConfigError(f"config: '{key}' is required")
    norm: dict[str, Any] = {"dataset": _norm_dataset(raw["dataset"], base_dir)}
    if not isinstance(raw["models"], list) or not raw["models"]:
        raise ConfigError("models: expected a nonempty list")
    models = [_norm_model(m, i) for i, m in enumerate(raw["models"])]
    norm["models"] = [m for m, _ in models]
    strata = tuple(s for _, s in models)
    keys = [s.key for s in strata]
    if len(set(keys)) != len(keys):
        raise ConfigError("models: duplicate (cause, arm) entries")
    for cause in (1, 2):
        arms = {a for c, a in keys if c == cause}
        if arms not in ({None}, {0, 1}):
            raise ConfigError(f"models: cause {cause} needs either one pooled model (arm: null) or one per arm")
    enroll_norm, enrollment = _norm_enrollment(raw.get("enrollment"))
    norm["enrollment"] = enroll_norm
    cens_norm, censoring = _norm_censoring(raw.get("censoring"), base_dir)
    norm["censoring"] = cens_norm
    an_norm, analysis = _norm_analysis(raw["analysis"])
    norm["analysis"] = an_norm
    s_norm, sampler = _norm_sampler(raw.get("sampler"))
    K_val = _int(K if K is not None else raw.get("K", 2500), "K")
    seed_val = _int(seed if seed is not None else raw.get("seed", 0), "seed")
    if K_val < 1:
        raise ConfigError("K must be >= 1")
    if seed_val < 0:
        raise ConfigError("seed must be nonnegative")
    norm["sampler"] = s_norm
    norm["K"] = K_val
    norm["seed"] = seed_val
    norm["max_invalid_frac"] = _num(raw.get("max_invalid_frac", 0.01), "max_invalid_frac")
    cg = raw.get("curve_grid")
    norm["curve_grid"] = None if cg is None else _nums(cg, "curve_grid")
    grid_norm, grid, seed_mode = _norm_grid(raw.get("grid"))
    norm["grid"] = grid_norm
    norm["output"] = str(out if out is not None else raw.get("output", "out"))
    try:
        ppos = PposConfig(strata, (analysis,), K=K_val, master_seed=seed_val, enrollment=enrollment,
                          censoring=censoring, sampler=sampler, max_invalid_frac=norm["max_invalid_frac"],
                          curve_grid=norm["curve_grid"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(norm, base_dir, strata, ppos, grid, seed_mode)


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def load_config(path, *, seed=None, K=None, out=None) -> RunConfig:
    """Read a YAML run configuration; relative paths resolve against its directory."""
    path = Path(path)
    return parse_config(_read_yaml(path), path.parent, seed=seed, K=K, out=out)


# -- simulation specs ---------------------------------------------------------------------------


def _true_model(block, i):
    where = f"models[{i}]"
    _check_keys(block, ("cause", "arm", "family", "log_scale", "shape", "knots", "levels", "coefs"), where)
    coefs = block.get("coefs") or {}
    names = tuple(coefs)
    values = tuple(_num(v, f"{where}.coefs") for v in coefs.values())
    try:
        if block.get("family") == "weibull":
            m = WeibullCsModel(_num(block.get("log_scale"), f"{where}.log_scale"),
                               _num(block.get("shape"), f"{where}.shape"), values, names)
        elif block.get("family") == "pch":
            m = PchCsModel(tuple(_nums(block.get("knots") or [], f"{where}.knots")),
                           tuple(_nums(block.get("levels"), f"{where}.levels")), values, names)
        else:
            raise ConfigError(f"{where}: family must be 'weibull' or 'pch'")
    except ModelError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    arm = block.get("arm")
    return (_int(block.get("cause"), f"{where}.cause"), None if arm is None else _int(arm, f"{where}.arm")), m


def load_simulation_spec(path, *, seed=None) -> SyntheticSpec:
    """Read a synthetic-data spec.

    Either ``preset: ispy_like | sthlm3_like`` (optionally with ``seed`` and,
    for sthlm3_like, ``n``), or a full description with ``models`` (true
    hazards), ``n_per_arm``, ``covariates`` and follow-up settings.
    """
    raw = _read_yaml(path)
    s = None if seed is None else int(seed)
    if "preset" in raw:
        _check_keys(raw, ("preset", "seed", "n"), "simulation spec")
        s = s if s is not None else raw.get("seed")
        kw = {} if s is None else {"seed": _int(s, "seed")}
        if raw["preset"] == "ispy_like":
            return ispy_like_spec(**kw)
        if raw["preset"] == "sthlm3_like":
            if "n" in raw:
                kw["n"] = _int(raw["n"], "n")
            return sthlm3_like_spec(**kw)
        raise ConfigError(f"unknown preset {raw['preset']!r}")
    _check_keys(raw, ("models", "n_per_arm", "covariates", "follow_up", "accrual", "analysis_time",
                      "record_offset", "seed", "time_unit", "id_prefix"), "simulation spec")
    if not isinstance(raw.get("models"), list):
        raise ConfigError("simulation spec: 'models' list is required")
    models = dict(_true_model(m, i) for i, m in enumerate(raw["models"]))
    covs = {}
    for name, gen in (raw.get("covariates") or {}).items():
        if not isinstance(gen, Mapping) or len(gen) != 1:
            raise ConfigError(f"covariates.{name}: expected {{kind: [params]}}")
        (kind, params), = gen.items()
        try:
            covs[name] = CovariateGen(kind, tuple(_nums(params if isinstance(params, list) else [params],
                                                        f"covariates.{name}")))
        except ModelError as exc:
            raise ConfigError(f"covariates.{name}: {exc}") from None
    opt = lambda k: None if raw.get(k) is None else _num(raw[k], k)  # noqa: E731
    try:
        return SyntheticSpec(
            models=CauseModelSet(models),
            n_per_arm=tuple(_int(n, "n_per_arm") for n in raw.get("n_per_arm", [])),
            covariates=covs,
            follow_up=opt("follow_up"),
            accrual=_num(raw.get("accrual", 0.0), "accrual"),
            analysis_time=opt("analysis_time"),
            record_offset=bool(raw.get("record_offset", False)),
            seed=s if s is not None else _int(raw.get("seed", 0), "seed"),
            time_unit=str(raw.get("time_unit", "")),
            id_prefix=str(raw.get("id_prefix", "S")),
        )
    except (ModelError, DatasetError) as exc:
        raise ConfigError(f"simulation spec: {exc}") from None
