"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary).
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml
from scipy import stats

from crppos.analysis import RiskRatioAnalysis, aalen_johansen, evaluate_rule, risk_ratio_test
from crppos.cli import main
from crppos.config import DATA_DIR, load_config
from crppos.dataset import CompetingRiskDataset
from crppos.fitting import StratumSpec, fit_stratum
from crppos.hazards import CauseModelSet, PchCsModel, PchPriors, WeibullCsModel, cif
from crppos.ppos import PposConfig, mc_standard_error, run_ppos, run_scenarios
from crppos.priors import Flat
from crppos.sampler import SamplerConfig, effective_sample_size
from crppos.simulate import all_cause_cum_hazard, invert_cum_hazard, simulate_outcomes
from crppos.synthetic import SyntheticSpec, generate_synthetic, sthlm3_like_spec

U1, NU1, U2, NU2 = 0.3, 1.2, 0.1, 0.8
PAIR = (WeibullCsModel(math.log(U1), NU1), WeibullCsModel(math.log(U2), NU2))
MODELS = CauseModelSet({(1, None): PAIR[0], (2, None): PAIR[1]})


def test_c01_simulated_cif_matches_quadrature(criterion_line):
    t0 = time.perf_counter()
    d = generate_synthetic(SyntheticSpec(MODELS, (0, 50_000), seed=1))
    est = aalen_johansen(d)
    errs = []
    for t in (0.5, 1.0, 2.0):
        for cause in (1, 2):
            errs.append(abs(float(est.cif(t, cause)) - cif(PAIR, t, cause=cause)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 0.01 and elapsed < 120
    criterion_line("C1 simulated vs analytic CIF", ok,
                   f"max |AJ - F| = {max(errs):.4f} (< 0.01), {elapsed:.1f} s (< 120 s)")
    assert ok


def test_c02_inversion_oracle(criterion_line):
    rng = np.random.default_rng(2)
    worst_pch = 0.0
    for _ in range(1000):
        k = rng.integers(0, 6)
        knots = np.sort(rng.uniform(0.1, 10.0, k))
        if k and np.any(np.diff(knots) <= 0):
            continue
        pair = (PchCsModel(knots, rng.normal(-1.5, 1.0, k + 1)), PchCsModel(knots, rng.normal(-2.0, 1.0, k + 1)))
        target = rng.exponential(2.0) + 1e-6
        t = invert_cum_hazard(pair, None, target)
        worst_pch = max(worst_pch, abs(float(all_cause_cum_hazard(pair, t)) - target))
    worst_wb = 0.0
    for _ in range(1000):
        pair = (WeibullCsModel(rng.normal(-1, 1), rng.uniform(0.3, 3.0)),
                WeibullCsModel(rng.normal(-1.5, 1), rng.uniform(0.3, 3.0)))
        target = rng.exponential(2.0) + 1e-6
        t = invert_cum_hazard(pair, None, target)
        worst_wb = max(worst_wb, abs(float(all_cause_cum_hazard(pair, t)) - target))
    ok = worst_pch < 1e-8 and worst_wb < 1e-8
    criterion_line("C2 inversion oracle", ok,
                   f"max |Lambda(t) - target|: PCH {worst_pch:.1e}, Weibull {worst_wb:.1e} (< 1e-8)")
    assert ok


def test_c03_left_truncation(criterion_line):
    rng = np.random.default_rng(3)
    n = 20_000
    cond, _ = simulate_outcomes(PAIR, None, np.full(n, 2.0), rng)
    free, _ = simulate_outcomes(PAIR, None, np.zeros(4 * n), rng)
    kept = free[free > 2.0][:n]
    ks = stats.ks_2samp(cond, kept).statistic
    ok = kept.size == n and ks < 0.02
    criterion_line("C3 left truncation", ok, f"KS distance {ks:.4f} (< 0.02) on {n} vs {kept.size} draws")
    assert ok


def test_c04_conjugate_gamma_oracle(criterion_line):
    rng = np.random.default_rng(4)
    spec = StratumSpec(1, None, "pch", priors=PchPriors(Flat()))
    z_scores = []
    for i in range(10):
        n = int(rng.integers(30, 300))
        rate = rng.uniform(0.1, 2.0)
        t = rng.exponential(1 / rate, n)
        c = rng.uniform(0.2, 3.0, n)
        event = np.where(t <= c, rng.choice([1, 2], n, p=[0.7, 0.3]), 0)
        data = CompetingRiskDataset([str(j) for j in range(n)], np.minimum(t, c), event, np.zeros(n, int))
        fit = fit_stratum(spec, data, SamplerConfig(seed=100 + i))
        lam = np.exp(fit.draws.chains[:, :, 0])
        d, e = int(np.sum(event == 1)), float(data.time.sum())
        mc_se = math.sqrt(d) / e / math.sqrt(effective_sample_size(lam))
        z_scores.append((lam.mean() - d / e) / mc_se)
    worst = float(np.max(np.abs(z_scores)))
    ok = worst < 3
    criterion_line("C4 conjugate Gamma oracle", ok, f"max |mean - d/e| = {worst:.2f} MC SEs (< 3) over 10 datasets")
    assert ok


def test_c05_posterior_recovery(criterion_line):
    truth = {1: (math.log(U1), NU1), 2: (math.log(U2), NU2)}
    cover = {f"{name}{c}": 0 for c in (1, 2) for name in ("alpha", "nu")}
    for rep in range(50):
        d = generate_synthetic(SyntheticSpec(MODELS, (0, 2000), follow_up=3.0, seed=500 + rep))
        for cause in (1, 2):
            fit = fit_stratum(StratumSpec(cause, None, "weibull"), d, SamplerConfig(seed=rep))
            for name, true in zip(("alpha", "nu"), truth[cause]):
                lo, hi = np.quantile(fit.draws.column(name), [0.05, 0.95])
                cover[f"{name}{cause}"] += int(lo <= true <= hi)
    ok = min(cover.values()) >= 39
    criterion_line("C5 posterior recovery", ok,
                   "90% interval coverage " + ", ".join(f"{k} {v}/50" for k, v in cover.items()) + " (>= 39/50)")
    assert ok


def test_c06_risk_ratio_calibration(criterion_line):
    rng = np.random.default_rng(6)
    n_trials, n = 2000, 400
    rejections = 0
    for i in range(n_trials):
        t, x = simulate_outcomes(PAIR, None, np.zeros(2 * n), rng)
        c = rng.uniform(1.0, 4.0, 2 * n)
        d = CompetingRiskDataset(np.arange(2 * n).astype(str), np.minimum(t, c), np.where(t <= c, x, 0),
                                 np.repeat([0, 1], n))
        res = risk_ratio_test(aalen_johansen(d, 1), aalen_johansen(d, 0), 2.0, 0.035)
        rejections += res.success
    rate = rejections / n_trials
    ok = 0.025 <= rate <= 0.046
    criterion_line("C6 risk-ratio test calibration", ok,
                   f"null rejection rate {rate:.4f} over {n_trials} trials (in [0.025, 0.046])")
    assert ok


def test_c07_mc_se_bound(criterion_line):
    grid = np.linspace(0, 1, 1001)
    worst = max(mc_standard_error(p, K) for p in grid for K in (2500, 3000, 10_000))
    exact = mc_standard_error(0.5, 2500)
    ok = worst <= 0.01 and exact == 0.01
    criterion_line("C7 Monte Carlo SE bound", ok, f"max mc_se for K >= 2500 is {worst:.6f}; mc_se(0.5, 2500) = {exact!r}")
    assert ok


def test_c08_degenerate_identity(criterion_line):
    rng = np.random.default_rng(8)
    checked = []
    for i in range(20):
        n = 60
        arm = np.repeat([0, 1], n // 2)
        p1 = rng.uniform(0.2, 0.8, 2)[arm]
        event = np.where(rng.random(n) < p1, 1, 2)
        data = CompetingRiskDataset(np.arange(n).astype(str), rng.exponential(1.0, n), event, arm)
        an = RiskRatioAnalysis(eval_time=float(data.time.max()))
        cfg = PposConfig((StratumSpec(1, None), StratumSpec(2, None)), (an,), K=100, master_seed=i)
        res = run_ppos(data, cfg)
        expected = float(evaluate_rule(an.statistics(data), cfg.rule))
        checked.append(res.ppos in (0.0, 1.0) and res.ppos == expected and res.fit_skipped)
    ok = all(checked)
    criterion_line("C8 degenerate identity", ok, f"{sum(checked)}/{len(checked)} fully observed datasets give "
                                                 "PPoS in {0, 1} equal to the direct decision")
    assert ok


def _fast_ispy_config(tmp_path):
    raw = yaml.safe_load((DATA_DIR / "ispy_like.yaml").read_text())
    raw["dataset"]["path"] = str(DATA_DIR / "ispy_like.csv")
    raw["analysis"]["sampler"] = {"n_chains": 2, "n_warmup": 300, "n_draws": 500, "ess_min": 100}
    raw["K"] = 40
    path = tmp_path / "ispy_fast.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


def test_c09_determinism(criterion_line, tmp_path):
    cfg = _fast_ispy_config(tmp_path)
    runs = [("run1", "1"), ("run2", "1"), ("w4", "4"), ("w8", "8")]
    codes = [main(["ppos", "--config", str(cfg), "--out", str(tmp_path / name), "--workers", w])
             for name, w in runs]
    blobs = [(tmp_path / name / "ppos_report.json").read_bytes() for name, _ in runs]
    ok = all(c == 0 for c in codes) and all(b == blobs[0] for b in blobs)
    criterion_line("C9 determinism", ok, f"{len(blobs)} reports (2 runs, workers 1/4/8) byte-identical: "
                                         f"{all(b == blobs[0] for b in blobs)}")
    assert ok


def _nondecreasing(values):
    return all(b >= a for a, b in zip(values, values[1:]))


PRIOR_GRID_K = 400
PRIOR_GRID_ANALYSIS_SAMPLER = {"n_chains": 2, "n_warmup": 300, "n_draws": 500, "ess_min": 100}


def test_c10a_prior_grid_monotone(criterion_line):
    cfg = load_config(DATA_DIR / "ispy_like_prior_grid.yaml", K=PRIOR_GRID_K)
    data = cfg.load_data()
    an = replace(cfg.ppos.analyses[0], sampler=SamplerConfig(**PRIOR_GRID_ANALYSIS_SAMPLER))
    base = cfg.ppos.replace(analyses=(an,))
    results = run_scenarios(data, base, cfg.grid, seed_mode="common")
    table = {(r.label["mu"], r.label["sigma"]): r.result.ppos for r in results}
    mus, sigmas = cfg.grid.mu, cfg.grid.sigma
    rows = {s: [table[(m, s)] for m in mus] for s in sigmas}
    ok = len(results) == 15 and all(_nondecreasing(v) for v in rows.values())
    detail = "; ".join(f"sigma^2={s * s:.1f}: " + " ".join(f"{p:.3f}" for p in v) for s, v in rows.items())
    criterion_line("C10a prior grid nondecreasing in mu", ok, detail)
    assert ok


def test_c10b_horizon_sweep_monotone(criterion_line):
    cfg = load_config(DATA_DIR / "sthlm3_like_horizons.yaml")
    data = generate_synthetic(sthlm3_like_spec())
    results = run_scenarios(data, cfg.ppos, cfg.grid, seed_mode=cfg.seed_mode)
    values = [r.result.ppos for r in results]
    ok = len(values) == 6 and _nondecreasing(values)
    detail = " ".join(f"{r.label['horizon']:.1f}:{r.result.ppos:.3f}" for r in results)
    criterion_line("C10b horizon sweep nondecreasing", ok, f"K = {cfg.ppos.K}: {detail}")
    assert ok


def test_c10c_smoke_run(criterion_line, tmp_path):
    t0 = time.perf_counter()
    code = main(["ppos", "--config", str(DATA_DIR / "ispy_like.yaml"), "--k", "500", "--out", str(tmp_path / "s")])
    elapsed = time.perf_counter() - t0
    report = json.loads((tmp_path / "s" / "ppos_report.json").read_text())
    ok = code == 0 and report["K"] == 500 and elapsed < 15 * 60
    criterion_line("C10c end-to-end K=500 smoke run", ok,
                   f"PPoS {report['ppos']:.3f}, {elapsed:.0f} s on 1 worker (< 900 s)")
    assert ok
