import csv
import json

import numpy as np
import pytest
import yaml

from crppos.cli import histogram_table, main, sample_curve_ids
from crppos.config import DATA_DIR, ConfigError, load_config, parse_config
from crppos.dataset import load_dataset
from crppos.synthetic import generate_synthetic, ispy_like_spec

FAST_SAMPLER = {"n_chains": 4, "n_warmup": 400, "n_draws": 400, "ess_min": 150}


def _config(tmp_path, **overrides):
    cfg = {
        "dataset": {"path": str(DATA_DIR / "ispy_like.csv"), "time_unit": "days",
                    "covariates": {"who_level": "binary"}},
        "models": [{"cause": c, "arm": a, "family": "weibull", "covariates": ["who_level"]}
                   for c in (1, 2) for a in (0, 1)],
        "enrollment": {"n_new_fixed_arm": 67, "randomization_prob": 0.45, "fixed_arm": 1,
                       "binary_covariates": ["who_level"]},
        "censoring": {"mode": "scalar", "horizon": 60},
        "analysis": {"kind": "risk_ratio", "cause": 1, "eval_time": 60, "alpha": 0.035},
        "sampler": FAST_SAMPLER,
        "K": 20,
        "seed": 7,
        "curve_grid": [0, 20, 40, 60],
        "output": str(tmp_path / "default_out"),
    }
    cfg.update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_ppos_outputs_and_exit_zero(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    assert main(["ppos", "--config", str(cfg), "--out", str(out)]) == 0
    assert "PPoS = " in capsys.readouterr().out
    report = json.loads((out / "ppos_report.json").read_text())
    assert report["K"] == 20 and len(report["per_replicate"]) == 20
    assert 0 <= report["ppos"] <= 1
    rows = list(csv.DictReader((out / "replicates.csv").open()))
    assert len(rows) == 20
    curves = list(csv.DictReader((out / "curves.csv").open()))
    assert len(curves) == 20 * 2 * 4
    assert (out / "run.log").exists()


def test_ppos_byte_identical(tmp_path):
    cfg = _config(tmp_path)
    main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
    for name in ("ppos_report.json", "replicates.csv", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_and_k_flags_override(tmp_path):
    cfg = _config(tmp_path)
    main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "3", "--k", "5"])
    report = json.loads((tmp_path / "a" / "ppos_report.json").read_text())
    assert report["seed"] == 3 and report["K"] == 5
    echo = yaml.safe_load(report["config_echo"])
    assert echo["seed"] == 3 and echo["K"] == 5


def test_decisive_dataset_prints_zero_or_one(tmp_path, capsys):
    # arm 1: 4 of 20 cause-1 events, arm 0: 16 of 20; nobody censored
    lines = ["subject_id,time,event,arm"]
    for i in range(40):
        arm = int(i < 20)
        event = 1 if (i % 20) < (4 if arm else 16) else 2
        lines.append(f"s{i},{1.0 + 0.1 * i:.1f},{event},{arm}")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    cfg = _config(tmp_path, dataset={"path": "d.csv"}, enrollment=None, censoring=None,
                  models=[{"cause": c, "family": "weibull"} for c in (1, 2)],
                  analysis={"kind": "risk_ratio", "eval_time": 10.0})
    assert main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "PPoS = 1.000" in capsys.readouterr().out


def test_bad_config_path_exit_two(tmp_path, capsys):
    assert main(["ppos", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["fit", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["nonsense"]) == 2


@pytest.mark.parametrize("bad, match", [
    ({"K": 0}, "K"),
    ({"unknown_key": 1}, "unknown_key"),
    ({"censoring": {"mode": "scalar"}}, "horizon"),
    ({"analysis": {"kind": "t_test"}}, "kind"),
    ({"dataset": {"path": "nope.csv"}}, "no such file"),
])
def test_invalid_configs_exit_two(tmp_path, capsys, bad, match):
    cfg = _config(tmp_path, **bad)
    assert main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert match in capsys.readouterr().err


def test_fit_outputs(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(cfg), "--out", str(out), "--draws"]) == 0
    rows = list(csv.DictReader((out / "fit_summary.csv").open()))
    assert {r["stratum"] for r in rows} == {"cause1_arm0", "cause1_arm1", "cause2_arm0", "cause2_arm1"}
    assert all(float(r["ess"]) > 0 for r in rows)
    assert (out / "draws_cause1_arm0.csv").exists()
    assert "diagnostics" in json.loads((out / "fit_report.json").read_text())


def test_non_convergent_fit_exit_three(tmp_path):
    cfg = _config(tmp_path, sampler={"n_chains": 2, "n_warmup": 1, "n_draws": 1})
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 3
    assert main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 3


def test_invalid_replicates_exit_four(tmp_path):
    analysis = {"kind": "bayes_ph", "covariates": ["who_level"],
                "sampler": {"n_chains": 2, "n_warmup": 10, "n_draws": 10, "ess_min": 100000}}
    cfg = _config(tmp_path, analysis=analysis, K=3)
    out = tmp_path / "p"
    assert main(["ppos", "--config", str(cfg), "--out", str(out)]) == 4
    report = json.loads((out / "ppos_report.json").read_text())
    assert report["K_effective"] == 0


def test_scenarios_rows(tmp_path):
    models = [{"cause": 1, "family": "weibull", "covariates": ["arm", "who_level"]},
              {"cause": 2, "family": "weibull", "covariates": ["arm", "who_level"]}]
    grid = {"prior": {"mu": ["log(1)", "log(2)"], "sigma": ["sqrt(0.1)"]}, "seed_mode": "common"}
    cfg = _config(tmp_path, models=models, grid=grid, K=5)
    out = tmp_path / "s"
    assert main(["scenarios", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "scenarios.csv").open()))
    assert len(rows) == 2
    assert float(rows[1]["mu"]) == pytest.approx(np.log(2))
    assert all(r["error"] == "" for r in rows)


def test_scenarios_without_grid_exit_two(tmp_path):
    assert main(["scenarios", "--config", str(_config(tmp_path)), "--out", str(tmp_path / "s")]) == 2


def test_one_cell_scenario_matches_ppos(tmp_path):
    models = [{"cause": 1, "family": "weibull", "covariates": ["arm", "who_level"],
               "priors": {"coefs": {"arm": {"normal": [0.5, 0.4]}}}},
              {"cause": 2, "family": "weibull", "covariates": ["arm", "who_level"]}]
    cfg = _config(tmp_path, models=models, K=6)
    main(["ppos", "--config", str(cfg), "--out", str(tmp_path / "p")])
    cfg = _config(tmp_path, models=models, K=6, grid={"prior": {"mu": [0.5], "sigma": [0.4]}})
    main(["scenarios", "--config", str(cfg), "--out", str(tmp_path / "s")])
    single = json.loads((tmp_path / "p" / "ppos_report.json").read_text())
    cell = json.loads((tmp_path / "s" / "scenarios_report.json").read_text())["scenarios"][0]["report"]
    single.pop("config_echo")
    assert cell == single


def test_simulate_round_trip(tmp_path):
    spec = tmp_path / "sim.yaml"
    spec.write_text("preset: ispy_like\n")
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--config", str(spec), "--out", str(out)]) == 0
    d = load_dataset(out, schema={"who_level": "binary"}, time_unit="days")
    assert d == generate_synthetic(ispy_like_spec())
    assert out.read_bytes() == (DATA_DIR / "ispy_like.csv").read_bytes()
    main(["simulate", "--config", str(spec), "--out", str(tmp_path / "sim2.csv"), "--seed", "1"])
    assert (tmp_path / "sim2.csv").read_bytes() != out.read_bytes()


def test_simulate_zero_hazard_spec(tmp_path):
    spec = {
        "n_per_arm": [100, 100],
        "models": [{"cause": 1, "family": "weibull", "log_scale": 0.0, "shape": 1.0},
                   {"cause": 2, "family": "pch", "knots": [], "levels": ["-inf"]}],
        "seed": 2,
    }
    path = tmp_path / "zero.yaml"
    path.write_text(yaml.safe_dump(spec))
    out = tmp_path / "zero.csv"
    assert main(["simulate", "--config", str(path), "--out", str(out)]) == 0
    d = load_dataset(out)
    assert np.all(d.event == 1)


def test_emit_figures(tmp_path):
    cfg = _config(tmp_path, K=30)
    out = tmp_path / "o"
    main(["ppos", "--config", str(cfg), "--out", str(out)])
    figs = tmp_path / "figs"
    assert main(["emit-figures", "--report", str(out / "ppos_report.json"), "--curves", str(out / "curves.csv"),
                 "--out", str(figs), "--n-curves", "10"]) == 0
    hist = list(csv.DictReader((figs / "histogram.csv").open()))
    assert sum(int(r["count"]) for r in hist) == 30
    ids = {r["index"] for r in csv.DictReader((figs / "curve_sample.csv").open())}
    assert len(ids) == 10


def test_emit_figures_empty_report(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"ppos": 0.0, "per_replicate": []}))
    assert main(["emit-figures", "--report", str(p), "--out", str(tmp_path / "f")]) == 2


def test_histogram_and_curve_sampling_helpers():
    stats = np.random.default_rng(0).random(2500)
    counts, edges = histogram_table(stats, 20)
    assert len(counts) == 20 and len(edges) == 21
    assert counts.sum() == 2500
    ids = sample_curve_ids(range(2500), 500, seed=1)
    assert len(ids) == 500 == len(set(ids.tolist()))
    assert np.array_equal(ids, sample_curve_ids(range(2500), 500, seed=1))


def test_config_echo_round_trips(tmp_path):
    cfg = load_config(DATA_DIR / "ispy_like_prior_grid.yaml")
    echo = cfg.echo()
    again = parse_config(yaml.safe_load(echo), DATA_DIR)
    assert again.echo() == echo
    assert again.ppos == cfg.ppos
    assert again.grid == cfg.grid


def test_config_rejects_unknown_expression(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"dataset": "x.csv", "models": [{"cause": 1, "family": "weibull"}],
                      "analysis": {"kind": "risk_ratio"}, "grid": {"prior": {"mu": ["cos(1)"], "sigma": [1]}}},
                     tmp_path)


def test_bundled_configs_parse():
    for name in ("ispy_like.yaml", "ispy_like_prior_grid.yaml", "sthlm3_like.yaml", "sthlm3_like_horizons.yaml"):
        cfg = load_config(DATA_DIR / name)
        assert cfg.ppos.K == 2500
    assert len(list(load_config(DATA_DIR / "ispy_like_prior_grid.yaml").grid.scenarios(
        load_config(DATA_DIR / "ispy_like_prior_grid.yaml").ppos))) == 15
