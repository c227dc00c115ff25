"""Sessions, ratings, CSV ingestion, session filtering, label attachment and
chronological splitting."""
from __future__ import annotations

import logging
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

MS_PER_HOUR = 3_600_000.0
MS_PER_DAY = 24 * MS_PER_HOUR

KEYPRESS_COLUMNS = ("subject_id", "session_id", "timestamp_ms", "duration_ms",
                    "time_since_last_ms", "dx_keys", "dy_keys")
ACCEL_COLUMNS = ("subject_id", "session_id", "timestamp_ms", "ax_g", "ay_g", "az_g")
LABEL_COLUMNS = ("subject_id", "assessment_date", "hdrs", "ymrs", "diagnosis")
DIAGNOSES = ("control", "bipolar1", "bipolar2")

# keypress array columns: timestamp, duration, time_since_last, dx, dy
# accel array columns:    timestamp, ax, ay, az


class SchemaError(ValueError):
    """A CSV file lacks a required column or has an unusable value."""


@dataclass(frozen=True)
class KeypressEvent:
    timestamp: float
    duration: float
    time_since_last: float
    dx: float
    dy: float


@dataclass(frozen=True)
class AccelSample:
    timestamp: float
    ax: float
    ay: float
    az: float


@dataclass(frozen=True, eq=False)
class RawSession:
    subject_id: str
    session_id: str
    keypresses: np.ndarray  # [L_k, 5]
    accel: np.ndarray       # [L_a, 4]
    t0_hours: float = 0.0

    @property
    def start_ms(self) -> float:
        firsts = [a[0, 0] for a in (self.keypresses, self.accel) if len(a)]
        return float(min(firsts)) if firsts else math.nan

    @property
    def n_keypresses(self) -> int:
        return len(self.keypresses)

    @property
    def n_accel(self) -> int:
        return len(self.accel)

    def keypress_events(self) -> list[KeypressEvent]:
        return [KeypressEvent(*map(float, row)) for row in self.keypresses]

    def accel_samples(self) -> list[AccelSample]:
        return [AccelSample(*map(float, row)) for row in self.accel]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawSession):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.session_id == other.session_id
                and self.t0_hours == other.t0_hours
                and np.array_equal(self.keypresses, other.keypresses)
                and np.array_equal(self.accel, other.accel))

    __hash__ = object.__hash__


@dataclass(frozen=True)
class LabelRecord:
    subject_id: str
    assessment_date: date
    hdrs: int
    ymrs: int
    diagnosis: str

    def __post_init__(self):
        if self.hdrs < 0 or self.ymrs < 0:
            raise ValueError(f"negative rating for {self.subject_id} on {self.assessment_date}")
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")

    @property
    def time_ms(self) -> float:
        dt = datetime(self.assessment_date.year, self.assessment_date.month,
                      self.assessment_date.day, tzinfo=timezone.utc)
        return dt.timestamp() * 1000.0


@dataclass(frozen=True)
class LabeledSession:
    session: RawSession
    label: float
    diagnosis: str

    @property
    def subject_id(self) -> str:
        return self.session.subject_id

    @property
    def t0_hours(self) -> float:
        return self.session.t0_hours


@dataclass
class LoadReport:
    malformed_keypress_rows: int = 0
    malformed_accel_rows: int = 0
    malformed_label_rows: int = 0
    dropped_no_accel: list[tuple[str, str]] = field(default_factory=list)

    @property
    def malformed_rows(self) -> int:
        return self.malformed_keypress_rows + self.malformed_accel_rows + self.malformed_label_rows


@dataclass
class Dataset:
    sessions: list[RawSession]
    labels: list[LabelRecord] = field(default_factory=list)
    report: LoadReport = field(default_factory=LoadReport)

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.sessions})

    @property
    def diagnoses(self) -> dict[str, str]:
        return {r.subject_id: r.diagnosis for r in self.labels}

    def __len__(self) -> int:
        return len(self.sessions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.sessions == other.sessions and self.labels == other.labels


# ------------------------------------------------------------------ loading

def _read_csv(path, columns: Sequence[str], numeric: Sequence[str], kind: str) -> tuple[pd.DataFrame, int]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    for col in columns:
        if col not in frame.columns:
            raise SchemaError(f"{kind} file {path} is missing column '{col}'")
    frame = frame[list(columns)]
    bad = np.zeros(len(frame), dtype=bool)
    for col in numeric:
        # to_numeric only flags bad cells; its fast parser is not round-trip exact
        values = pd.to_numeric(frame[col], errors="coerce")
        bad |= values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    for col in ("subject_id", "session_id"):
        if col in frame.columns:
            bad |= (frame[col].str.len() == 0).to_numpy()
    if bad.any():
        log.warning("%s: %d malformed rows skipped", path, int(bad.sum()))
    frame = frame.loc[~bad].reset_index(drop=True)
    for col in numeric:
        frame[col] = frame[col].astype(np.float64)
    return frame, int(bad.sum())


def _group_arrays(frame: pd.DataFrame, value_cols: Sequence[str]) -> dict[tuple[str, str], np.ndarray]:
    if frame.empty:
        return {}
    frame = frame.sort_values(["subject_id", "session_id", "timestamp_ms"], kind="mergesort")
    values = frame[list(value_cols)].to_numpy(dtype=np.float64)
    keys = list(zip(frame["subject_id"], frame["session_id"]))
    out: dict[tuple[str, str], np.ndarray] = {}
    start = 0
    for i in range(1, len(keys) + 1):
        if i == len(keys) or keys[i] != keys[start]:
            out[keys[start]] = values[start:i]
            start = i
    return out


def load_dataset(keypress_path, accel_path, label_path=None) -> Dataset:
    """Read the three CSV files into sessions grouped by (subject_id, session_id).

    Events are sorted by timestamp; rows that fail to parse are skipped and
    counted.  A session with keypresses but no accelerometer rows is dropped.
    """
    report = LoadReport()
    kp, report.malformed_keypress_rows = _read_csv(
        keypress_path, KEYPRESS_COLUMNS, KEYPRESS_COLUMNS[2:], "keypress")
    ac, report.malformed_accel_rows = _read_csv(accel_path, ACCEL_COLUMNS, ACCEL_COLUMNS[2:], "accel")
    kp_groups = _group_arrays(kp, KEYPRESS_COLUMNS[2:])
    ac_groups = _group_arrays(ac, ACCEL_COLUMNS[2:])

    empty_kp = np.zeros((0, 5))
    sessions = []
    for key in sorted(set(kp_groups) | set(ac_groups)):
        keys = kp_groups.get(key, empty_kp)
        acc = ac_groups.get(key)
        if acc is None:
            log.warning("session %s/%s has keypresses but no accelerometer rows; dropped", *key)
            report.dropped_no_accel.append(key)
            continue
        sessions.append(RawSession(key[0], key[1], keys, acc))

    labels: list[LabelRecord] = []
    if label_path is not None:
        lab, report.malformed_label_rows = _read_csv(label_path, LABEL_COLUMNS, ("hdrs", "ymrs"), "label")
        for row in lab.itertuples(index=False):
            try:
                labels.append(LabelRecord(row.subject_id, date.fromisoformat(row.assessment_date.strip()),
                                          int(row.hdrs), int(row.ymrs), row.diagnosis.strip()))
            except ValueError:
                report.malformed_label_rows += 1
                log.warning("malformed label row skipped: %s", row)
        labels.sort(key=lambda r: (r.subject_id, r.assessment_date))
    return Dataset(with_t0(sessions), labels, report)


def load_dir(data_dir) -> Dataset:
    d = Path(data_dir)
    return load_dataset(d / "keypresses.csv", d / "accel.csv", d / "labels.csv")


def with_t0(sessions: Iterable[RawSession]) -> list[RawSession]:
    """Recompute t0 (hours since the subject's earliest session start) and sort
    sessions by (subject, start, session id)."""
    sessions = list(sessions)
    earliest: dict[str, float] = {}
    for s in sessions:
        st = s.start_ms
        if s.subject_id not in earliest or st < earliest[s.subject_id]:
            earliest[s.subject_id] = st
    out = [replace(s, t0_hours=(s.start_ms - earliest[s.subject_id]) / MS_PER_HOUR) for s in sessions]
    out.sort(key=lambda s: (s.subject_id, s.start_ms, s.session_id))
    return out


# ------------------------------------------------------------------- saving

def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def sessions_to_csv(sessions: Sequence[RawSession]) -> tuple[str, str]:
    kp_lines = [",".join(KEYPRESS_COLUMNS)]
    ac_lines = [",".join(ACCEL_COLUMNS)]
    for s in sessions:
        prefix = f"{s.subject_id},{s.session_id},"
        for row in s.keypresses:
            kp_lines.append(prefix + ",".join(_fmt(v) for v in row))
        for row in s.accel:
            ac_lines.append(prefix + ",".join(_fmt(v) for v in row))
    return "\n".join(kp_lines) + "\n", "\n".join(ac_lines) + "\n"


def labels_to_csv(labels: Sequence[LabelRecord]) -> str:
    lines = [",".join(LABEL_COLUMNS)]
    for r in labels:
        lines.append(f"{r.subject_id},{r.assessment_date.isoformat()},{r.hdrs},{r.ymrs},{r.diagnosis}")
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    kp, ac = sessions_to_csv(dataset.sessions)
    paths = {"keypresses": out / "keypresses.csv", "accel": out / "accel.csv", "labels": out / "labels.csv"}
    atomic_write_text(paths["keypresses"], kp)
    atomic_write_text(paths["accel"], ac)
    atomic_write_text(paths["labels"], labels_to_csv(dataset.labels))
    return paths


# ---------------------------------------------------------------- filtering

def filter_session(s: RawSession, min_len: int = 10, max_len: int = 100) -> RawSession | None:
    if s.n_keypresses < min_len:
        return None
    if s.n_keypresses <= max_len:
        return s
    keys = s.keypresses[:max_len]
    last = keys[-1, 0]
    return replace(s, keypresses=keys, accel=s.accel[s.accel[:, 0] <= last])


def filter_sessions(dataset: Dataset, min_len: int = 10, max_len: int = 100) -> Dataset:
    """Drop sessions with fewer than ``min_len`` keypresses and truncate longer
    ones to their first ``max_len`` keypresses (and the accelerometer rows up to
    the last kept keypress)."""
    kept = [f for f in (filter_session(s, min_len, max_len) for s in dataset.sessions) if f is not None]
    return Dataset(kept, dataset.labels, dataset.report)


# ----------------------------------------------------------------- labeling

def attach_labels(dataset: Dataset, labels: Sequence[LabelRecord] | None = None, target: str = "hdrs",
                  window_days: float = 7.0) -> list[LabeledSession]:
    """Give each session the score of its subject's nearest rating.

    Sessions further than ``window_days`` from every rating are dropped, and so
    are subjects without any rating; both are logged.
    """
    if target not in ("hdrs", "ymrs"):
        raise ValueError(f"target must be 'hdrs' or 'ymrs', got {target!r}")
    labels = dataset.labels if labels is None else labels
    by_subject: dict[str, list[LabelRecord]] = defaultdict(list)
    for r in labels:
        by_subject[r.subject_id].append(r)
    for recs in by_subject.values():
        recs.sort(key=lambda r: r.assessment_date)

    out, too_far, unrated = [], 0, set()
    limit = window_days * MS_PER_DAY
    for s in dataset.sessions:
        recs = by_subject.get(s.subject_id)
        if not recs:
            unrated.add(s.subject_id)
            continue
        times = np.array([r.time_ms for r in recs])
        start = s.start_ms
        # nearest via sorted search; ties resolve to the earlier rating
        j = int(np.searchsorted(times, start, side="left"))
        cands = [i for i in (j - 1, j) if 0 <= i < len(times)]
        i = min(cands, key=lambda c: (abs(start - times[c]), c))
        if abs(start - times[i]) > limit:
            too_far += 1
            continue
        out.append(LabeledSession(s, float(getattr(recs[i], target)), recs[i].diagnosis))
    for subj in sorted(unrated):
        log.warning("subject %s has sessions but no ratings; skipped", subj)
    if too_far:
        log.info("%d sessions further than %.0f days from any rating were dropped", too_far, window_days)
    return out


def select_cohort(sessions: Sequence[LabeledSession], cohort: str) -> list[LabeledSession]:
    if cohort in ("all", "with-controls"):
        return list(sessions)
    if cohort in ("bipolar", "bipolar-only"):
        return [s for s in sessions if s.diagnosis != "control"]
    raise ValueError(f"unknown cohort {cohort!r}")


# ---------------------------------------------------------------- splitting

def train_count(n: int, fraction: float) -> int:
    # small epsilon guards against products like 0.7 * 10 = 6.999...
    return int(math.floor(fraction * n + 1e-9))


def chrono_split(sessions: Sequence, train_fraction: float = 0.8) -> tuple[list, list]:
    """Earliest ``floor(fraction * N)`` sessions of one subject for training, the rest for testing."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(sessions)
    if n < 2:
        raise ValueError(f"need at least 2 sessions to split, got {n}")
    ordered = sorted(sessions, key=lambda s: s.t0_hours)
    k = min(max(train_count(n, train_fraction), 1), n - 1)
    return ordered[:k], ordered[k:]


def split_by_subject(sessions: Sequence, train_fraction: float = 0.8) -> tuple[list, list]:
    """Apply :func:`chrono_split` within every subject; subjects with a single
    session go entirely to training."""
    groups: dict[str, list] = defaultdict(list)
    for s in sessions:
        groups[s.subject_id].append(s)
    train, test = [], []
    for subj in sorted(groups):
        if len(groups[subj]) < 2:
            log.warning("subject %s has a single session; used for training only", subj)
            train.extend(groups[subj])
            continue
        a, b = chrono_split(groups[subj], train_fraction)
        train.extend(a)
        test.extend(b)
    return train, test
