import numpy as np
import pytest

from crppos.dataset import (CompetingRiskDataset, DatasetError, Schema, administrative_censor, load_dataset,
                            partition_interim, save_dataset, stack)
from crppos.hazards import CauseModelSet, WeibullCsModel
from crppos.synthetic import CovariateGen, SyntheticSpec, generate_synthetic, ispy_like_spec
from crppos.config import DATA_DIR


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_four_rows(tmp_path):
    p = _write(tmp_path, "subject_id,time,event,arm\na,1.5,1,0\nb,2,2,1\nc,3,0,1\nd,4,1,0\n")
    d = load_dataset(p)
    assert len(d) == 4
    assert int(np.sum(d.event == 0)) == 1
    assert d.event.tolist() == [1, 2, 0, 1]
    assert d.subject_id.tolist() == ["a", "b", "c", "d"]


def test_negative_time_names_row(tmp_path):
    p = _write(tmp_path, "subject_id,time,event,arm\na,1,1,0\nb,2,2,1\nc,-1,0,1\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_dataset(p)


@pytest.mark.parametrize("row, msg", [
    ("a,1,3,0", "event"),
    ("a,1,1,2", "arm"),
    ("a,x,1,0", "time"),
    ("a,nan,1,0", "time"),
])
def test_bad_fields_rejected(tmp_path, row, msg):
    p = _write(tmp_path, f"subject_id,time,event,arm\n{row}\n")
    with pytest.raises(DatasetError, match=msg):
        load_dataset(p)


def test_missing_column_and_duplicate_id(tmp_path):
    with pytest.raises(DatasetError, match="missing column"):
        load_dataset(_write(tmp_path, "subject_id,time,arm\na,1,0\n"))
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(_write(tmp_path, "subject_id,time,event,arm\na,1,1,0\na,2,1,0\n"))


def test_binary_covariate_checked(tmp_path):
    p = _write(tmp_path, "subject_id,time,event,arm,who\na,1,1,0,2\n")
    load_dataset(p)
    with pytest.raises(DatasetError, match="binary"):
        load_dataset(p, schema={"who": "binary"})


def test_empty_dataset_is_an_error(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(_write(tmp_path, "subject_id,time,event,arm\n"))


def test_bundled_ispy_like_file():
    d = load_dataset(DATA_DIR / "ispy_like.csv", schema={"who_level": "binary"})
    assert len(d) == 133
    assert d.arm_counts() == (75, 58)


def test_bundled_file_matches_generator():
    d = load_dataset(DATA_DIR / "ispy_like.csv", schema={"who_level": "binary"}, time_unit="days")
    assert d == generate_synthetic(ispy_like_spec())


def test_partition():
    d = CompetingRiskDataset(list("abc"), [1.0, 2.0, 3.0], [1, 2, 1], [0, 1, 0])
    obs, cens = partition_interim(d)
    assert len(obs) == 3 and len(cens) == 0

    d = load_dataset(DATA_DIR / "ispy_like.csv")
    obs, cens = partition_interim(d)
    assert len(cens) == 33
    assert len(obs) + len(cens) == len(d)
    assert np.all(cens.event == 0) and np.all(obs.event > 0)


def test_administrative_censor_scalar():
    d = CompetingRiskDataset(["a", "b", "c"], [75.0, 10.0, 60.0], [1, 2, 1], [0, 1, 1])
    out = administrative_censor(d, 60.0)
    assert out.time.tolist() == [60.0, 10.0, 60.0]
    assert out.event.tolist() == [0, 2, 1]


def test_administrative_censor_per_subject():
    d = CompetingRiskDataset(["a", "b"], [10.5, 10.5], [1, 1], [0, 1])
    out = administrative_censor(d, {"a": 10.7, "b": 10.2})
    assert out.time.tolist() == [10.5, 10.2]
    assert out.event.tolist() == [1, 0]
    with pytest.raises(DatasetError, match="no censoring horizon"):
        administrative_censor(d, {"a": 1.0})


def test_administrative_censor_idempotent():
    rng = np.random.default_rng(3)
    n = 200
    d = CompetingRiskDataset([str(i) for i in range(n)], rng.exponential(50, n), rng.integers(0, 3, n),
                             rng.integers(0, 2, n))
    once = administrative_censor(d, 40.0)
    assert administrative_censor(once, 40.0) == once
    assert np.all(once.time <= 40.0)


def test_round_trip(tmp_path):
    d = generate_synthetic(ispy_like_spec())
    p = save_dataset(d, tmp_path / "rt.csv")
    back = load_dataset(p, schema=d.schema, time_unit=d.time_unit)
    assert back == d


def test_round_trip_with_offset(tmp_path):
    d = CompetingRiskDataset(["x", "y"], [0.1, 1 / 3], [0, 1], [1, 0], {"age": [55.0, 61.0]},
                             origin_offset=[0.0, 2.5])
    back = load_dataset(save_dataset(d, tmp_path / "o.csv"))
    assert back == d


def test_immutable():
    d = CompetingRiskDataset(["a"], [1.0], [1], [0])
    with pytest.raises(AttributeError):
        d.time = np.zeros(1)
    with pytest.raises(ValueError):
        d.time[0] = 2.0


def test_stack_preserves_rows():
    a = CompetingRiskDataset(["a"], [1.0], [1], [0], {"z": [1.0]})
    b = CompetingRiskDataset(["b"], [2.0], [0], [1], {"z": [0.0]})
    s = stack([a, b])
    assert s.subject_id.tolist() == ["a", "b"] and s.covariates["z"].tolist() == [1.0, 0.0]


def _exp_models(rate1, rate2):
    m1 = WeibullCsModel(np.log(rate1), 1.0) if rate1 > 0 else WeibullCsModel(-np.inf, 1.0)
    m2 = WeibullCsModel(np.log(rate2), 1.0) if rate2 > 0 else WeibullCsModel(-np.inf, 1.0)
    return CauseModelSet({(1, None): m1, (2, None): m2})


def test_synthetic_zero_hazard_cause():
    d = generate_synthetic(SyntheticSpec(_exp_models(1.0, 0.0), (300, 300), seed=4))
    assert not np.any(d.event == 2)
    assert np.all(d.event == 1)


def test_synthetic_equal_hazards_half_cause_one():
    n = 10_000
    d = generate_synthetic(SyntheticSpec(_exp_models(0.7, 0.7), (n // 2, n // 2), seed=11))
    frac = np.mean(d.event == 1)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / n)


def test_synthetic_deterministic():
    spec = SyntheticSpec(_exp_models(0.3, 0.2), (50, 60), covariates={"w": CovariateGen("bernoulli", 0.4)},
                         follow_up=3.0, seed=99)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert np.array_equal(a.time, b.time)
    assert a.schema == Schema({"w": "binary"})
    assert generate_synthetic(SyntheticSpec(spec.models, (50, 60), seed=100)) != a
