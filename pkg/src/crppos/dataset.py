"""Right-censored competing-event trial data.

A :class:`CompetingRiskDataset` is stored column-wise (numpy arrays) and is
immutable after construction, so one instance can be shared by many
simulation replicates.  Event codes: 0 = censored, 1 = primary event,
2 = competing event.  Arms are coded 0 (control/referent) and 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DatasetError",
    "Schema",
    "SubjectRecord",
    "CompetingRiskDataset",
    "load_dataset",
    "save_dataset",
    "partition_interim",
    "administrative_censor",
    "stack",
]

BASE_COLUMNS = ("subject_id", "time", "event", "arm")
OFFSET_COLUMN = "origin_offset"
COVARIATE_KINDS = ("real", "binary")


class DatasetError(ValueError):
    """Invalid dataset content or file."""


@dataclass(frozen=True)
class Schema:
    """Covariate declarations: name -> kind ('real' or 'binary')."""

    covariates: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, kind in self.covariates.items():
            if kind not in COVARIATE_KINDS:
                raise DatasetError(f"covariate {name!r}: unknown kind {kind!r}")
            if name in BASE_COLUMNS or name == OFFSET_COLUMN:
                raise DatasetError(f"covariate name {name!r} clashes with a reserved column")

    @classmethod
    def of(cls, spec) -> "Schema":
        """Coerce None, a list of names (all real) or a mapping to a Schema."""
        if spec is None:
            return cls({})
        if isinstance(spec, Schema):
            return spec
        if isinstance(spec, Mapping):
            return cls(dict(spec))
        return cls({name: "real" for name in spec})

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.covariates)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    time: float
    event: int
    arm: int
    covariates: Mapping[str, float] = field(default_factory=dict)
    origin_offset: float | None = None


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


class CompetingRiskDataset:
    """Immutable column store of subject records.

    Parameters
    ----------
    subject_id, time, event, arm : array_like
        One entry per subject.
    covariates : mapping of name -> array_like, optional
        Baseline covariates; order is preserved.
    origin_offset : array_like, optional
        Calendar offset of each subject's time origin (same unit as ``time``).
    time_unit : str
        Label only; times are never converted.
    schema : Schema, optional
        Declared covariate kinds.  Defaults to all covariates 'real'.
    """

    __slots__ = ("subject_id", "time", "event", "arm", "covariates",
                 "origin_offset", "time_unit", "schema")

    def __init__(self, subject_id, time, event, arm, covariates=None,
                 origin_offset=None, time_unit="", schema=None, _validate=True):
        covariates = dict(covariates or {})
        if schema is None:
            schema = Schema({k: "real" for k in covariates})
        else:
            schema = Schema.of(schema)
        object.__setattr__(self, "subject_id", _readonly(np.asarray(subject_id, dtype=object)))
        object.__setattr__(self, "time", _readonly(np.asarray(time, dtype=float)))
        object.__setattr__(self, "event", _readonly(np.asarray(event, dtype=np.int64)))
        object.__setattr__(self, "arm", _readonly(np.asarray(arm, dtype=np.int64)))
        object.__setattr__(self, "covariates",
                           {k: _readonly(np.asarray(covariates[k], dtype=float)) for k in schema.names})
        object.__setattr__(self, "origin_offset",
                           None if origin_offset is None else _readonly(np.asarray(origin_offset, dtype=float)))
        object.__setattr__(self, "time_unit", str(time_unit))
        object.__setattr__(self, "schema", schema)
        if set(covariates) != set(schema.names):
            raise DatasetError(
                f"covariates {sorted(covariates)} do not match schema {sorted(schema.names)}")
        if _validate:
            self._validate()

    def __setattr__(self, name, value):
        raise AttributeError("CompetingRiskDataset is immutable")

    def _validate(self):
        n = len(self.subject_id)
        cols = {"time": self.time, "event": self.event, "arm": self.arm, **self.covariates}
        if self.origin_offset is not None:
            cols[OFFSET_COLUMN] = self.origin_offset
        for name, col in cols.items():
            if col.ndim != 1 or len(col) != n:
                raise DatasetError(f"column {name!r} has length {len(col)}, expected {n}")
        bad = np.flatnonzero(~np.isfinite(self.time) | (self.time < 0))
        if bad.size:
            raise DatasetError(f"row {bad[0] + 1}: time must be finite and >= 0")
        bad = np.flatnonzero(~np.isin(self.event, (0, 1, 2)))
        if bad.size:
            raise DatasetError(f"row {bad[0] + 1}: event must be 0, 1 or 2")
        bad = np.flatnonzero(~np.isin(self.arm, (0, 1)))
        if bad.size:
            raise DatasetError(f"row {bad[0] + 1}: arm must be 0 or 1")
        for name, kind in self.schema.covariates.items():
            col = self.covariates[name]
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise DatasetError(f"row {bad[0] + 1}: covariate {name!r} missing or not finite")
            if kind == "binary":
                bad = np.flatnonzero(~np.isin(col, (0.0, 1.0)))
                if bad.size:
                    raise DatasetError(f"row {bad[0] + 1}: binary covariate {name!r} must be 0 or 1")
        if self.origin_offset is not None:
            bad = np.flatnonzero(~np.isfinite(self.origin_offset) | (self.origin_offset < 0))
            if bad.size:
                raise DatasetError(f"row {bad[0] + 1}: origin_offset must be finite and >= 0")
        if len(set(self.subject_id.tolist())) != n:
            ids, counts = np.unique(self.subject_id.astype(str), return_counts=True)
            raise DatasetError(f"duplicate subject_id {ids[counts > 1][0]!r}")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], time_unit="", schema=None):
        records = list(records)
        if schema is None:
            names = list(records[0].covariates) if records else []
            schema = Schema({k: "real" for k in names})
        schema = Schema.of(schema)
        for i, r in enumerate(records, start=1):
            if set(r.covariates) != set(schema.names):
                raise DatasetError(f"row {i}: covariates {sorted(r.covariates)} do not match schema")
        offsets = [r.origin_offset for r in records]
        if all(o is None for o in offsets):
            offsets = None
        elif any(o is None for o in offsets):
            raise DatasetError("origin_offset must be given for all records or none")
        return cls(
            [r.subject_id for r in records],
            [r.time for r in records],
            [r.event for r in records],
            [r.arm for r in records],
            {k: [r.covariates[k] for r in records] for k in schema.names},
            origin_offset=offsets,
            time_unit=time_unit,
            schema=schema,
        )

    def replace(self, _validate=True, **changes) -> "CompetingRiskDataset":
        kw = dict(subject_id=self.subject_id, time=self.time, event=self.event, arm=self.arm,
                  covariates=self.covariates, origin_offset=self.origin_offset,
                  time_unit=self.time_unit, schema=self.schema)
        kw.update(changes)
        return CompetingRiskDataset(**kw, _validate=_validate)

    def subset(self, mask) -> "CompetingRiskDataset":
        """Rows selected by a boolean mask or index array (order kept)."""
        idx = np.asarray(mask)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return CompetingRiskDataset(
            self.subject_id[idx], self.time[idx], self.event[idx], self.arm[idx],
            {k: v[idx] for k, v in self.covariates.items()},
            origin_offset=None if self.origin_offset is None else self.origin_offset[idx],
            time_unit=self.time_unit, schema=self.schema, _validate=False)

    # -- accessors --------------------------------------------------------------

    def __len__(self):
        return len(self.subject_id)

    def __eq__(self, other):
        if not isinstance(other, CompetingRiskDataset):
            return NotImplemented
        if (self.time_unit != other.time_unit or self.schema != other.schema
                or len(self) != len(other)):
            return False
        if (self.origin_offset is None) != (other.origin_offset is None):
            return False
        same = (np.array_equal(self.subject_id, other.subject_id)
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.event, other.event)
                and np.array_equal(self.arm, other.arm)
                and all(np.array_equal(v, other.covariates[k]) for k, v in self.covariates.items()))
        if same and self.origin_offset is not None:
            same = np.array_equal(self.origin_offset, other.origin_offset)
        return bool(same)

    __hash__ = None

    def __repr__(self):
        counts = np.bincount(self.event, minlength=3)
        return (f"CompetingRiskDataset(n={len(self)}, events={counts[1]}/{counts[2]}, "
                f"censored={counts[0]}, covariates={list(self.covariates)}, unit={self.time_unit!r})")

    @property
    def records(self) -> list[SubjectRecord]:
        out = []
        for i in range(len(self)):
            out.append(SubjectRecord(
                str(self.subject_id[i]), float(self.time[i]), int(self.event[i]), int(self.arm[i]),
                {k: float(v[i]) for k, v in self.covariates.items()},
                None if self.origin_offset is None else float(self.origin_offset[i])))
        return out

    def column(self, name: str) -> np.ndarray:
        """Covariate column by name; 'arm' resolves to the arm indicator."""
        if name == "arm":
            return self.arm.astype(float)
        try:
            return self.covariates[name]
        except KeyError:
            raise DatasetError(f"unknown covariate {name!r}") from None

    def design(self, names: Sequence[str]) -> np.ndarray:
        """(n, len(names)) covariate matrix."""
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.column(n) for n in names])

    def arm_counts(self) -> tuple[int, int]:
        c = np.bincount(self.arm, minlength=2)
        return int(c[0]), int(c[1])


def stack(parts: Sequence[CompetingRiskDataset]) -> CompetingRiskDataset:
    """Row-bind datasets sharing a schema and time unit."""
    parts = [p for p in parts if p is not None]
    first = parts[0]
    for p in parts[1:]:
        if p.schema != first.schema:
            raise DatasetError("cannot stack datasets with different schemas")
    has_offset = [p.origin_offset is not None for p in parts if len(p)]
    if any(has_offset) and not all(has_offset):
        raise DatasetError("cannot stack datasets with and without origin_offset")
    offset = None
    if has_offset and all(has_offset):
        offset = np.concatenate([p.origin_offset for p in parts if len(p)])
    return CompetingRiskDataset(
        np.concatenate([p.subject_id for p in parts]),
        np.concatenate([p.time for p in parts]),
        np.concatenate([p.event for p in parts]),
        np.concatenate([p.arm for p in parts]),
        {k: np.concatenate([p.covariates[k] for p in parts]) for k in first.schema.names},
        origin_offset=offset, time_unit=first.time_unit, schema=first.schema)


# -- CSV ----------------------------------------------------------------------


def _parse_float(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DatasetError(f"row {row}: column {col!r}: value {text!r} is not finite")
    return value


def _parse_int(text, row, col, allowed):
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r}: cannot parse {text!r}") from None
    if value not in allowed:
        raise DatasetError(f"row {row}: column {col!r}: {text!r} not in {sorted(allowed)}")
    return int(value)


def load_dataset(path, schema=None, time_unit="") -> CompetingRiskDataset:
    """Read and validate a dataset CSV.

    The header must be ``subject_id,time,event,arm,<covariates...>`` with an
    optional trailing ``origin_offset`` column.  When ``schema`` is None the
    covariates are taken from the header and treated as real-valued.  Errors
    name the 1-based data row (the header is row 0).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    if tuple(header[:4]) != BASE_COLUMNS:
        missing = [c for c in BASE_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}")
        raise DatasetError(f"{path}: header must start with {','.join(BASE_COLUMNS)}")
    has_offset = header[-1] == OFFSET_COLUMN
    cov_cols = header[4:-1] if has_offset else header[4:]
    if schema is None:
        schema = Schema({c: "real" for c in cov_cols})
    schema = Schema.of(schema)
    missing = [c for c in schema.names if c not in cov_cols]
    if missing:
        raise DatasetError(f"{path}: missing covariate column(s) {missing}")
    if not rows:
        raise DatasetError(f"{path}: no data rows")

    ids, times, events, arms, offsets = [], [], [], [], []
    covs = {k: [] for k in schema.names}
    col_index = {c: i for i, c in enumerate(header)}
    for rownum, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DatasetError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        row = [cell.strip() for cell in row]
        if not row[0]:
            raise DatasetError(f"row {rownum}: empty subject_id")
        ids.append(row[0])
        t = _parse_float(row[1], rownum, "time")
        if t < 0:
            raise DatasetError(f"row {rownum}: negative time {row[1]}")
        times.append(t)
        events.append(_parse_int(row[2], rownum, "event", {0, 1, 2}))
        arms.append(_parse_int(row[3], rownum, "arm", {0, 1}))
        for name, kind in schema.covariates.items():
            cell = row[col_index[name]]
            if cell == "":
                raise DatasetError(f"row {rownum}: covariate {name!r} is missing")
            v = _parse_float(cell, rownum, name)
            if kind == "binary" and v not in (0.0, 1.0):
                raise DatasetError(f"row {rownum}: binary covariate {name!r} must be 0 or 1, got {cell!r}")
            covs[name].append(v)
        if has_offset:
            o = _parse_float(row[-1], rownum, OFFSET_COLUMN)
            if o < 0:
                raise DatasetError(f"row {rownum}: negative origin_offset {row[-1]}")
            offsets.append(o)
    return CompetingRiskDataset(ids, times, events, arms, covs,
                                origin_offset=offsets if has_offset else None,
                                time_unit=time_unit, schema=schema)


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def save_dataset(dataset: CompetingRiskDataset, path) -> Path:
    """Write ``dataset`` in the format read by :func:`load_dataset`."""
    path = Path(path)
    header = list(BASE_COLUMNS) + list(dataset.schema.names)
    if dataset.origin_offset is not None:
        header.append(OFFSET_COLUMN)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [dataset.subject_id[i], _fmt(dataset.time[i]), int(dataset.event[i]), int(dataset.arm[i])]
            row += [_fmt(dataset.covariates[k][i]) for k in dataset.schema.names]
            if dataset.origin_offset is not None:
                row.append(_fmt(dataset.origin_offset[i]))
            w.writerow(row)
    return path


# -- interim handling -----------------------------------------------------------


def partition_interim(dataset: CompetingRiskDataset):
    """Split interim data into (observed events, still-at-risk/censored)."""
    censored = dataset.event == 0
    return dataset.subset(~censored), dataset.subset(censored)


def horizons_for(dataset: CompetingRiskDataset, horizon) -> np.ndarray:
    """Per-row horizon array from a scalar, a row-aligned array or a
    subject_id -> horizon mapping."""
    if isinstance(horizon, np.ndarray) and horizon.ndim == 1:
        if len(horizon) != len(dataset):
            raise DatasetError("horizon array does not match dataset length")
        out = horizon.astype(float)
    elif isinstance(horizon, Mapping):
        out = np.empty(len(dataset))
        for i, sid in enumerate(dataset.subject_id):
            try:
                out[i] = horizon[sid]
            except KeyError:
                raise DatasetError(f"no censoring horizon for subject {sid!r}") from None
    else:
        out = np.full(len(dataset), float(horizon))
    if np.any(~(out > 0)):
        raise DatasetError("censoring horizons must be positive")
    return out


def administrative_censor(dataset: CompetingRiskDataset, horizon) -> CompetingRiskDataset:
    """Censor follow-up beyond ``horizon``.

    ``horizon`` is a positive scalar or a mapping subject_id -> horizon.
    Rows with ``time > horizon`` become ``(horizon, 0)``; a time equal to the
    horizon keeps its event.
    """
    h = horizons_for(dataset, horizon)
    over = dataset.time > h
    if not over.any():
        return dataset
    # censoring cannot make a valid dataset invalid
    return dataset.replace(time=np.where(over, h, dataset.time),
                           event=np.where(over, 0, dataset.event), _validate=False)
