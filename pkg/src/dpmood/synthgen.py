"""Synthetic keystroke/accelerometer cohorts with planted circadian calibration.

Each subject has a latent weekly mood level.  Session features are drawn so
that the hidden score ``x = w . (session feature means) + w0`` tracks that
mood, and the weekly rating is ``mean x of the week * (alpha sin(beta t + gamma)
+ delta) + noise`` evaluated at the rating time, clipped at zero and rounded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (MS_PER_DAY, MS_PER_HOUR, Dataset, LabelRecord, RawSession,
                        atomic_write_text, save_dataset, with_t0)
from .modelzoo import CalibrationParams, CalibrationTable

GROUPS = ("control", "bipolar1", "bipolar2")
FEATURES = ("duration", "time_since_last", "dx", "dy", "ax", "ay", "az")


@dataclass(frozen=True)
class GenConfig:
    n_control: int = 8
    n_bipolar1: int = 7
    n_bipolar2: int = 5
    sessions_per_subject: int = 730
    weeks: int = 8
    noise_sigma: float = 0.5
    seed: int = 0
    start_date: date = date(2016, 1, 4)  # a Monday
    # keypress stream
    keys_median: float = 35.0
    keys_log_sd: float = 0.5
    min_keys: int = 10
    max_keys: int = 100
    gap_ms: float = 200.0
    gap_per_mood_ms: float = 12.0
    duration_base_ms: float = 95.0
    duration_amp_ms: float = 15.0
    # accelerometer stream
    accel_period_ms: int = 60
    accel_jitter_ms: int = 3
    ax_per_mood_g: float = 0.02
    tilt_amp_g: float = 0.15
    # latent mood and calibration
    mood_range: tuple[float, float] = (3.0, 7.0)
    weekly_mood_sd: float = 1.0
    session_mood_sd: float = 0.3
    alpha_range: tuple[float, float] = (0.3, 1.0)
    beta_range: tuple[float, float] = (0.8, 1.2)  # multiples of 2*pi/24 per hour
    delta_range: tuple[float, float] = (1.2, 2.5)
    ymrs_scale: dict = field(default_factory=lambda: {"control": 0.15, "bipolar1": 0.5, "bipolar2": 0.5})

    def __post_init__(self):
        for name in ("n_control", "n_bipolar1", "n_bipolar2", "sessions_per_subject", "weeks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_control + self.n_bipolar1 + self.n_bipolar2 == 0:
            raise ValueError("need at least one subject")
        if self.weeks < 1:
            raise ValueError("weeks must be >= 1")
        if not 1 <= self.min_keys <= self.max_keys:
            raise ValueError("need 1 <= min_keys <= max_keys")


@dataclass(frozen=True)
class SubjectTruth:
    subject_id: str
    diagnosis: str
    calibration: CalibrationParams
    mood_level: float
    gap_ms: float


@dataclass
class PlantedTruth:
    subjects: dict[str, SubjectTruth]
    weights: np.ndarray      # w over the 7 session feature means
    bias: float              # w0
    duration_base_ms: float
    duration_amp_ms: float
    duration_peak_hour: float = 3.0

    def duration_curve(self, hour) -> np.ndarray:
        """Planted mean keypress duration by hour of day."""
        h = np.asarray(hour, dtype=np.float64)
        return self.duration_base_ms + self.duration_amp_ms * np.cos(2 * np.pi * (h - self.duration_peak_hour) / 24)

    def hidden_score(self, feature_means: np.ndarray) -> np.ndarray:
        return np.asarray(feature_means) @ self.weights + self.bias

    def calibration_table(self) -> CalibrationTable:
        ids = sorted(self.subjects)
        params = np.array([self.subjects[s].calibration.as_tuple() for s in ids])
        return CalibrationTable("per-subject", ids, params)


def subject_ids(config: GenConfig) -> list[tuple[str, str]]:
    out = []
    for group, n, prefix in zip(GROUPS, (config.n_control, config.n_bipolar1, config.n_bipolar2),
                                ("ctl", "bpa", "bpb")):
        out.extend((f"{prefix}{i + 1:02d}", group) for i in range(n))
    return out


# daytime-weighted hour-of-day distribution: low at night, high 08-23
_HOUR_WEIGHTS = np.array([3, 2, 1, 1, 1, 1, 2, 4, 7, 8, 8, 8, 9, 9, 8, 8, 8, 9, 9, 10, 10, 9, 7, 5], float)
_HOUR_WEIGHTS /= _HOUR_WEIGHTS.sum()


def _session_features(kp: np.ndarray, ac: np.ndarray) -> np.ndarray:
    return np.concatenate([kp[:, 1:5].mean(axis=0), ac[:, 1:4].mean(axis=0)])


def _nearest_week(start_ms: np.ndarray, rating_ms: np.ndarray) -> np.ndarray:
    d = np.abs(start_ms[:, None] - rating_ms[None, :])
    return d.argmin(axis=1)  # argmin returns the first (earlier) rating on ties


def _gen_subject(config: GenConfig, index: int, sid: str, group: str, weights: np.ndarray,
                 bias: float, epoch_ms: float):
    rng = np.random.default_rng([config.seed, index])
    sign = 1.0 if group == "control" else -1.0
    cal = CalibrationParams(
        alpha=float(rng.uniform(*config.alpha_range)),
        beta=float(rng.uniform(*config.beta_range) * 2 * np.pi / 24),
        gamma=float(rng.uniform(0.0, 2 * np.pi)),
        delta=float(sign * rng.uniform(*config.delta_range)),
    )
    mood = sign * float(rng.uniform(*config.mood_range))
    gap_trait = config.gap_ms * float(np.exp(rng.normal(0.0, 0.1)))
    week_mood = mood + rng.normal(0.0, config.weekly_mood_sd, size=config.weeks)
    truth = SubjectTruth(sid, group, cal, mood, gap_trait)

    # one rating per week, at midnight UTC of day 7w+3
    rating_days = np.arange(config.weeks) * 7 + 3
    rating_ms = epoch_ms + rating_days * MS_PER_DAY

    # session start times, unique and ordered
    n = config.sessions_per_subject
    days = rng.integers(0, 7 * config.weeks, size=n)
    hours = rng.choice(24, size=n, p=_HOUR_WEIGHTS)
    seconds = rng.integers(0, 3600, size=n)
    starts = epoch_ms + days * MS_PER_DAY + hours * MS_PER_HOUR + seconds * 1000.0
    starts = np.unique(starts)
    week_of = _nearest_week(starts, rating_ms)

    sessions, xs = [], []
    for k, (start, w) in enumerate(zip(starts, week_of)):
        hour = ((start - epoch_ms) % MS_PER_DAY) / MS_PER_HOUR
        m = week_mood[w] + rng.normal(0.0, config.session_mood_sd)
        n_keys = int(np.clip(round(config.keys_median * np.exp(rng.normal(0.0, config.keys_log_sd))),
                             config.min_keys, config.max_keys))
        gap_mean = max(gap_trait + config.gap_per_mood_ms * m, 40.0)
        tsl = np.maximum(1.0, np.round(rng.gamma(2.0, gap_mean / 2.0, size=n_keys)))
        ts = start + np.cumsum(tsl)
        dur_mean = config.duration_base_ms + config.duration_amp_ms * np.cos(2 * np.pi * (hour - 3.0) / 24)
        dur = np.maximum(1.0, np.round(rng.gamma(8.0, dur_mean / 8.0, size=n_keys)))
        dx = np.round(rng.normal(0.0, 2.5, size=n_keys), 2)
        dy = np.round(rng.normal(0.0, 1.0, size=n_keys), 2)
        kp = np.column_stack([ts, dur, tsl, dx, dy])

        end = ts[-1] + config.accel_period_ms
        n_acc = int((end - start) // config.accel_period_ms) + 1
        steps = config.accel_period_ms + rng.integers(-config.accel_jitter_ms, config.accel_jitter_ms + 1,
                                                      size=n_acc - 1)
        ats = start + np.concatenate([[0.0], np.cumsum(steps)])
        tilt = config.tilt_amp_g * np.cos(2 * np.pi * (hour - 14.0) / 24)
        ax = np.round(config.ax_per_mood_g * m + rng.normal(0.0, 0.05, size=n_acc), 4)
        ay = np.round(0.6 + tilt + rng.normal(0.0, 0.05, size=n_acc), 4)
        az = np.round(0.75 - tilt + rng.normal(0.0, 0.05, size=n_acc), 4)
        ac = np.column_stack([ats, ax, ay, az])
        sessions.append(RawSession(sid, f"{sid}-{k:05d}", kp, ac))
        xs.append(float(_session_features(kp, ac) @ weights + bias))

    xs = np.array(xs)
    labels = []
    for w in range(config.weeks):
        in_week = week_of == w
        xbar = float(xs[in_week].mean()) if in_week.any() else float(week_mood[w])
        t_hours = (rating_ms[w] - starts[0]) / MS_PER_HOUR if len(starts) else 0.0
        score = xbar * float(cal.factor(t_hours))
        noise = rng.normal(0.0, config.noise_sigma, size=2)
        hdrs = max(0, math.floor(score + noise[0] + 0.5))
        ymrs = max(0, math.floor(config.ymrs_scale[group] * score + noise[1] + 0.5))
        labels.append(LabelRecord(sid, config.start_date + timedelta(days=int(rating_days[w])), hdrs, ymrs, group))
    return sessions, labels, truth


def planted_weights(config: GenConfig) -> tuple[np.ndarray, float]:
    """w and w0 such that the hidden score follows the latent mood one-for-one."""
    w = np.zeros(len(FEATURES))
    w[FEATURES.index("time_since_last")] = 0.5 / config.gap_per_mood_ms
    w[FEATURES.index("ax")] = 0.5 / config.ax_per_mood_g
    return w, -0.5 * config.gap_ms / config.gap_per_mood_ms


def generate(config: GenConfig) -> tuple[Dataset, PlantedTruth]:
    """Build the synthetic cohort in memory."""
    weights, bias = planted_weights(config)
    epoch = datetime(config.start_date.year, config.start_date.month, config.start_date.day, tzinfo=timezone.utc)
    epoch_ms = epoch.timestamp() * 1000.0
    sessions, labels, truths = [], [], {}
    for i, (sid, group) in enumerate(subject_ids(config)):
        s, lab, t = _gen_subject(config, i, sid, group, weights, bias, epoch_ms)
        sessions.extend(s)
        labels.extend(lab)
        truths[sid] = t
    truth = PlantedTruth(truths, weights, bias, config.duration_base_ms, config.duration_amp_ms)
    labels.sort(key=lambda r: (r.subject_id, r.assessment_date))  # the loader's order
    return Dataset(with_t0(sessions), labels), truth


def truth_to_csv(truth: PlantedTruth) -> str:
    lines = ["subject_id,alpha,beta,gamma,delta,diagnosis"]
    for sid in sorted(truth.subjects):
        t = truth.subjects[sid]
        c = t.calibration
        lines.append(f"{sid},{c.alpha!r},{c.beta!r},{c.gamma!r},{c.delta!r},{t.diagnosis}")
    return "\n".join(lines) + "\n"


def load_truth(path) -> dict[str, tuple[CalibrationParams, str]]:
    """Read truth.csv into subject -> (calibration, diagnosis)."""
    import csv

    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["subject_id"]] = (CalibrationParams(float(row["alpha"]), float(row["beta"]),
                                                        float(row["gamma"]), float(row["delta"])),
                                      row["diagnosis"])
    return out


def generate_dataset(config: GenConfig, out_dir=None) -> tuple[Dataset, PlantedTruth]:
    """Generate the cohort; with ``out_dir`` also write the three CSVs and truth.csv."""
    dataset, truth = generate(config)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
        atomic_write_text(Path(out_dir) / "truth.csv", truth_to_csv(truth))
    return dataset, truth


# ------------------------------------------------------------------ recovery

@dataclass(frozen=True)
class SubjectRecovery:
    subject_id: str
    diagnosis: str
    delta_true: float
    delta_learned: float
    sign_agrees: bool
    period_error_hours: float
    curve_rms: float


@dataclass
class RecoveryReport:
    rows: list[SubjectRecovery]
    missing_learned: list[str]
    missing_truth: list[str]

    @property
    def agreements(self) -> int:
        return sum(r.sign_agrees for r in self.rows)

    @property
    def agreement_fraction(self) -> float:
        return self.agreements / len(self.rows) if self.rows else math.nan

    def to_csv(self) -> str:
        lines = ["subject_id,diagnosis,delta_true,delta_learned,sign_agrees,period_error_hours,curve_rms"]
        for r in self.rows:
            lines.append(f"{r.subject_id},{r.diagnosis},{r.delta_true!r},{r.delta_learned!r},"
                         f"{int(r.sign_agrees)},{r.period_error_hours!r},{r.curve_rms!r}")
        return "\n".join(lines) + "\n"


WEEK_GRID = np.arange(0.0, 168.0 + 1e-9, 0.25)


def _period(beta: float) -> float:
    return 2 * math.pi / abs(beta) if beta != 0 else math.inf


def recovery_report(learned: CalibrationTable | dict[str, CalibrationParams],
                    truth: PlantedTruth | dict) -> RecoveryReport:
    """Compare learned per-subject calibration against the planted one.

    Calibration curves are compared on an hourly grid over one week, so the
    (alpha, gamma) -> (-alpha, gamma + pi) ambiguity does not register as error.
    """
    if isinstance(learned, CalibrationTable):
        learned = learned.as_dict()
    if isinstance(truth, PlantedTruth):
        truth = {s: (t.calibration, t.diagnosis) for s, t in truth.subjects.items()}
    rows = []
    for sid in sorted(set(learned) & set(truth)):
        p, (q, diag) = learned[sid], truth[sid]
        period_err = abs(_period(p.beta) - _period(q.beta))
        dist = float(np.sqrt(np.mean((p.factor(WEEK_GRID) - q.factor(WEEK_GRID)) ** 2)))
        rows.append(SubjectRecovery(sid, diag, q.delta, p.delta, bool(np.sign(p.delta) == np.sign(q.delta)),
                                    period_err, dist))
    return RecoveryReport(rows, sorted(set(truth) - set(learned)), sorted(set(learned) - set(truth) - {"*"}))
