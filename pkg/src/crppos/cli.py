"""Command-line entry point: ``crppos <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 posterior
convergence failure, 4 too many invalid replicates.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .config import ConfigError, dump_yaml, load_config, load_simulation_spec
from .dataset import DatasetError, save_dataset
from .fitting import ConvergenceError, fit_models
from .hazards import ModelError
from .ppos import PposResult, ReplicateValidityError, run_ppos, run_scenarios
from .sampler import save_draws
from .synthetic import generate_synthetic

log = logging.getLogger("crppos")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_VALIDITY = 4

REPORT_NAME = "ppos_report.json"
REPLICATES_NAME = "replicates.csv"
CURVES_NAME = "curves.csv"


def _setup_logging(out_dir: Path | None, verbose: bool):
    root = logging.getLogger("crppos")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.DEBUG if verbose else logging.WARNING)
    err.setFormatter(fmt)
    root.addHandler(err)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def _write_replicates(result: PposResult, path: Path):
    keys = sorted({k for r in result.records for k in r.statistics})
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "replicate_seed", "draw_index", "statistic", "G", "valid", *keys])
        for r in result.records:
            w.writerow([r.index, r.replicate_seed, r.draw_index, _fmt(r.statistic), r.G, int(r.valid),
                        *(_fmt(r.statistics.get(k, math.nan)) for k in keys)])


def _write_curves(result: PposResult, grid, path: Path):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "arm", "time", "cif"])
        for r in result.records:
            for arm, values in sorted((r.curves or {}).items()):
                for t, v in zip(grid, values):
                    w.writerow([r.index, arm, _fmt(t), _fmt(v)])


def _clean_json(obj):
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _save_ppos_outputs(result: PposResult, cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(_clean_json(result.report(cfg.echo())), out_dir / REPORT_NAME)
    _write_replicates(result, out_dir / REPLICATES_NAME)
    if cfg.ppos.curve_grid:
        _write_curves(result, cfg.ppos.curve_grid, out_dir / CURVES_NAME)


def _ppos_line(result: PposResult) -> str:
    return f"PPoS = {result.ppos:.3f} (MC SE = {result.mc_se:.4f}, K = {result.K_effective})"


# -- commands ----------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    _setup_logging(out_dir, args.verbose)
    data = cfg.load_data()
    try:
        fitted = fit_models(cfg.strata, data, cfg.ppos.sampler)
    except ConvergenceError as exc:
        log.error("%s", exc)
        print(f"posterior diagnostics failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    rows = []
    for fit in fitted.fits.values():
        for r in fit.draws.summary():
            rows.append({"stratum": fit.spec.label, **r})
    with (out_dir / "fit_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["stratum", "parameter", "mean", "sd", "q2.5", "median", "q97.5", "ess", "rhat"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r["stratum"], r["parameter"], *(_fmt(r[c]) for c in cols[2:])])
    _write_json(_clean_json({"diagnostics": fitted.diagnostics_summary(), "config_echo": cfg.echo()}),
                out_dir / "fit_report.json")
    if args.draws:
        for fit in fitted.fits.values():
            save_draws(fit.draws, out_dir / f"draws_{fit.spec.label}.csv")
    for fit in fitted.fits.values():
        print(f"{fit.spec.label}: min ESS {np.nanmin(fit.draws.ess):.0f}, max R-hat {np.nanmax(fit.draws.rhat):.4f}")
    return EXIT_OK


def cmd_ppos(args) -> int:
    cfg = load_config(args.config, seed=args.seed, K=args.k, out=args.out)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    _setup_logging(out_dir, args.verbose)
    data = cfg.load_data()
    try:
        result = run_ppos(data, cfg.ppos, workers=args.workers)
    except ConvergenceError as exc:
        log.error("%s", exc)
        print(f"posterior diagnostics failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ReplicateValidityError as exc:
        log.error("%s", exc)
        if exc.result is not None:
            _save_ppos_outputs(exc.result, cfg, out_dir)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_VALIDITY
    _save_ppos_outputs(result, cfg, out_dir)
    log.info("PPoS %.6f over %d valid replicates in %.1f s", result.ppos, result.K_effective, result.elapsed)
    print(_ppos_line(result))
    return EXIT_OK


def cmd_scenarios(args) -> int:
    cfg = load_config(args.config, seed=args.seed, K=args.k, out=args.out)
    if cfg.grid is None:
        raise ConfigError("scenarios: the configuration has no 'grid' block")
    out_dir = Path(args.out) if args.out else cfg.output_dir
    _setup_logging(out_dir, args.verbose)
    data = cfg.load_data()
    results = run_scenarios(data, cfg.ppos, cfg.grid, workers=args.workers, seed_mode=cfg.seed_mode)
    axes = list(results[0].label) if results else []
    with (out_dir / "scenarios.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", *axes, "ppos", "mc_se", "K", "K_effective", "error"])
        for i, r in enumerate(results):
            res = r.result
            w.writerow([i, *(_fmt(r.label[a]) for a in axes),
                        _fmt(res.ppos) if res else "", _fmt(res.mc_se) if res else "",
                        res.K if res else "", res.K_effective if res else "", r.error])
    _write_json(_clean_json({
        "config_echo": cfg.echo(),
        "scenarios": [{"label": r.label, "error": r.error,
                       "report": r.result.report() if r.result else None} for r in results],
    }), out_dir / "scenarios_report.json")
    for r in results:
        label = ", ".join(f"{k} = {v:.4g}" for k, v in r.label.items())
        if r.result is None:
            print(f"{label}: FAILED ({r.error})")
        else:
            print(f"{label}: {_ppos_line(r.result)}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = load_simulation_spec(args.config, seed=args.seed)
    out = Path(args.out) if args.out else Path("synthetic.csv")
    if out.suffix.lower() != ".csv":
        out = out / "synthetic.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(spec)
    save_dataset(data, out)
    n_ev = [[int(((data.arm == a) & (data.event == e)).sum()) for e in (1, 2)] for a in (0, 1)]
    print(f"wrote {len(data)} subjects to {out} (arm 0 events {n_ev[0]}, arm 1 events {n_ev[1]})")
    return EXIT_OK


def _load_report(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"{path}: no such report")
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON report: {exc}") from None
    if not report.get("per_replicate"):
        raise ConfigError(f"{path}: report has no replicates")
    return report


def histogram_table(stats, bins: int = 20):
    """Counts of replicate statistics in equal-width bins on [0, 1] (or their range)."""
    x = np.asarray([s for s in stats if s is not None and math.isfinite(s)], dtype=float)
    if x.size == 0:
        raise ConfigError("no finite replicate statistics to bin")
    lo, hi = (0.0, 1.0) if x.min() >= 0 and x.max() <= 1 else (float(x.min()), float(x.max()))
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return counts, edges


def sample_curve_ids(ids, n: int, seed: int):
    ids = np.unique(np.asarray(ids, dtype=int))
    if n >= len(ids):
        return ids
    rng = rngmod.stream(seed, rngmod.FIGURES)
    return np.sort(rng.choice(ids, size=n, replace=False))


def cmd_emit_figures(args) -> int:
    report_path = Path(args.report)
    report = _load_report(report_path)
    out_dir = Path(args.out) if args.out else report_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    counts, edges = histogram_table([r["statistic"] for r in report["per_replicate"]], args.bins)
    with (out_dir / "histogram.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(a), _fmt(b), int(c)])
    print(f"histogram: {int(counts.sum())} replicate statistics in {len(counts)} bins")
    curves = Path(args.curves) if args.curves else report_path.parent / CURVES_NAME
    if curves.is_file():
        with curves.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ConfigError(f"{curves}: no curves")
        keep = set(sample_curve_ids([int(r["index"]) for r in rows], args.n_curves, int(report.get("seed", 0))))
        with (out_dir / "curve_sample.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "arm", "time", "cif"])
            for r in rows:
                if int(r["index"]) in keep:
                    w.writerow([r["index"], r["arm"], r["time"], r["cif"]])
        print(f"curve sample: {len(keep)} of {len({r['index'] for r in rows})} replicates")
    elif args.curves:
        raise ConfigError(f"{curves}: no such file")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crppos", description="Predictive probability of success for trials "
                                                            "with competing event outcomes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, k=False, workers=False):
        sp.add_argument("--config", required=True, help="YAML configuration file")
        sp.add_argument("--seed", type=_nonneg_int, help="override the master seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if k:
            sp.add_argument("--k", type=_pos_int, help="override the number of replicates K")
        if workers:
            sp.add_argument("--workers", type=_pos_int, default=1, help="worker processes (default 1)")

    sp = sub.add_parser("fit", help="fit the prediction models and write posterior summaries")
    common(sp)
    sp.add_argument("--draws", action="store_true", help="also write the posterior draws")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("ppos", help="compute the PPoS")
    common(sp, k=True, workers=True)
    sp.set_defaults(func=cmd_ppos)

    sp = sub.add_parser("scenarios", help="PPoS over a prior or horizon grid")
    common(sp, k=True, workers=True)
    sp.set_defaults(func=cmd_scenarios)

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    sp.add_argument("--config", required=True, help="YAML simulation spec")
    sp.add_argument("--seed", type=_nonneg_int, help="override the spec seed")
    sp.add_argument("--out", help="output CSV path or directory")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("emit-figures", help="histogram and curve-sample CSVs from a PPoS report")
    sp.add_argument("--report", required=True, help=f"path to {REPORT_NAME}")
    sp.add_argument("--curves", help=f"per-replicate curves CSV (default: {CURVES_NAME} next to the report)")
    sp.add_argument("--out", help="output directory (default: the report's directory)")
    sp.add_argument("--bins", type=_pos_int, default=20)
    sp.add_argument("--n-curves", type=_pos_int, default=500)
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_emit_figures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
