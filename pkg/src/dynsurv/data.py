"""Canonical data model for joint longitudinal/survival datasets.

CSV schemas
-----------
longitudinal: header ``subject_id,time,value``
survival:     header ``subject_id,event_time,status,<covariate...>``

Both files are UTF-8, comma-separated, ``.`` decimal point. ``save_*_csv``
round-trip the same schemas.
"""

import csv
import math
from dataclasses import dataclass, field

from .errors import DataError


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        x = float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: non-numeric {what} {text!r}") from None
    if not math.isfinite(x):
        raise DataError(f"row {row}: non-finite {what} {text!r}")
    return x


@dataclass(frozen=True)
class LongitudinalObservation:
    """One marker measurement (t_il, y_il) of a subject."""

    subject_id: str
    time: float
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time >= 0):
            raise DataError(f"observation time must be finite and >= 0, got {self.time}")
        if not math.isfinite(self.value):
            raise DataError(f"observation value must be finite, got {self.value}")


@dataclass(frozen=True)
class SubjectRecord:
    """Baseline covariates, observed event time/status, and marker history."""

    subject_id: str
    covariates: dict[str, float]
    event_time: float
    status: int
    observations: tuple[LongitudinalObservation, ...]

    def __post_init__(self):
        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise DataError(
                f"subject {self.subject_id}: event_time must be finite and > 0"
            )
        if self.status not in (0, 1):
            raise DataError(f"subject {self.subject_id}: status must be 0 or 1")
        if len(self.observations) == 0:
            raise DataError(f"subject {self.subject_id}: needs at least one observation")
        times = [o.time for o in self.observations]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise DataError(
                f"subject {self.subject_id}: observation times must be strictly increasing"
            )
        if times[-1] > self.event_time:
            raise DataError(
                f"subject {self.subject_id}: observation after event time "
                f"({times[-1]} > {self.event_time})"
            )
        for name, value in self.covariates.items():
            if value is None or not math.isfinite(value):
                raise DataError(
                    f"subject {self.subject_id}: missing/non-finite covariate {name!r}"
                )

    @property
    def observation_times(self):
        return [o.time for o in self.observations]

    @property
    def observation_values(self):
        return [o.value for o in self.observations]

    def history_until(self, t: float) -> tuple[LongitudinalObservation, ...]:
        return tuple(o for o in self.observations if o.time <= t)


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of subjects with a shared covariate schema."""

    subjects: tuple[SubjectRecord, ...]
    covariate_names: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.subjects) == 0:
            raise DataError("dataset must contain at least one subject")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject_id(s): {dup}")
        for s in self.subjects:
            if set(s.covariates) != set(self.covariate_names):
                raise DataError(
                    f"subject {s.subject_id}: covariates {sorted(s.covariates)} do not "
                    f"match the dataset schema {sorted(self.covariate_names)}"
                )
        object.__setattr__(self, "_index", {i: k for k, i in enumerate(ids)})

    def __len__(self):
        return len(self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        try:
            return self.subjects[self._index[subject_id]]
        except KeyError:
            raise DataError(f"unknown subject_id {subject_id!r}") from None

    def event_times(self):
        return [s.event_time for s in self.subjects]

    def statuses(self):
        return [s.status for s in self.subjects]


def risk_set(dataset: Dataset, t: float) -> set[str]:
    """Subjects still at risk just after t: {i : T_i > t}."""
    if t < 0:
        raise ValueError("risk_set requires t >= 0")
    return {s.subject_id for s in dataset.subjects if s.event_time > t}


def load_longitudinal_csv(path) -> list[LongitudinalObservation]:
    """Parse a longitudinal CSV into observations, preserving row order."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "time", "value"]:
            raise DataError(
                f"{path}: expected header subject_id,time,value, got {header}"
            )
        out = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"row {row_no}: expected 3 columns, got {len(row)}")
            sid, t_txt, y_txt = row
            out.append(
                LongitudinalObservation(
                    subject_id=sid,
                    time=_parse_float(t_txt, "time", row_no),
                    value=_parse_float(y_txt, "value", row_no),
                )
            )
        return out


def load_survival_csv(path) -> tuple[list[dict], list[str]]:
    """Parse a survival CSV; returns (records, covariate_names).

    Each record is a dict with keys subject_id, event_time, status, covariates.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["subject_id", "event_time", "status"]:
            raise DataError(
                f"{path}: expected header subject_id,event_time,status,<covariate...>, "
                f"got {header}"
            )
        covariate_names = header[3:]
        records, seen = [], set()
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"row {row_no}: expected {len(header)} columns, got {len(row)}"
                )
            sid = row[0]
            if sid in seen:
                raise DataError(f"row {row_no}: duplicate subject_id {sid!r}")
            seen.add(sid)
            event_time = _parse_float(row[1], "event_time", row_no)
            if event_time <= 0:
                raise DataError(f"row {row_no}: event_time must be > 0, got {event_time}")
            status_txt = row[2].strip()
            if status_txt not in ("0", "1"):
                raise DataError(f"row {row_no}: status must be 0 or 1, got {row[2]!r}")
            covariates = {
                name: _parse_float(cell, f"covariate {name!r}", row_no)
                for name, cell in zip(covariate_names, row[3:])
            }
            records.append(
                {
                    "subject_id": sid,
                    "event_time": event_time,
                    "status": int(status_txt),
                    "covariates": covariates,
                }
            )
        return records, covariate_names


def assemble_dataset(longitudinal, survival_records, covariate_names) -> Dataset:
    """Attach observations to survival records and validate the result."""
    by_subject: dict[str, list[LongitudinalObservation]] = {}
    known = {rec["subject_id"] for rec in survival_records}
    for obs in longitudinal:
        if obs.subject_id not in known:
            raise DataError(
                f"longitudinal subject_id {obs.subject_id!r} has no survival record"
            )
        by_subject.setdefault(obs.subject_id, []).append(obs)

    subjects = []
    for rec in survival_records:
        sid = rec["subject_id"]
        obs = sorted(by_subject.get(sid, []), key=lambda o: o.time)
        if not obs:
            raise DataError(f"subject {sid}: no longitudinal observations")
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                covariates=dict(rec["covariates"]),
                event_time=rec["event_time"],
                status=rec["status"],
                observations=tuple(obs),
            )
        )
    return Dataset(subjects=tuple(subjects), covariate_names=tuple(covariate_names))


def load_dataset(longitudinal_path, survival_path) -> Dataset:
    records, names = load_survival_csv(survival_path)
    return assemble_dataset(load_longitudinal_csv(longitudinal_path), records, names)


def _format_float(x: float) -> str:
    return repr(float(x))


def save_longitudinal_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "time", "value"])
        for s in dataset.subjects:
            for o in s.observations:
                writer.writerow([s.subject_id, _format_float(o.time), _format_float(o.value)])


def save_survival_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "event_time", "status", *dataset.covariate_names])
        for s in dataset.subjects:
            writer.writerow(
                [
                    s.subject_id,
                    _format_float(s.event_time),
                    str(s.status),
                    *[_format_float(s.covariates[c]) for c in dataset.covariate_names],
                ]
            )
