"""Exploratory statistics: hour-of-day and day-of-week feature aggregates,
the day x hour usage histogram, and subject-pair Welch t-tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import MS_PER_DAY, MS_PER_HOUR, Dataset, RawSession, atomic_write_text

# feature -> (stream, column)
FEATURE_COLUMNS = {
    "duration": ("keypresses", 1),
    "time_since_last": ("keypresses", 2),
    "ax": ("accel", 1),
    "ay": ("accel", 2),
    "az": ("accel", 3),
}
# 1970-01-01 was a Thursday; shift so Monday is 0
_EPOCH_WEEKDAY = 3


@dataclass(frozen=True)
class BucketStat:
    bucket: int
    feature: str
    mean: float  # nan when count == 0
    std: float   # population standard deviation; nan when count == 0
    count: int


HourlyStat = BucketStat


def _feature_values(session: RawSession, feature: str) -> np.ndarray:
    if feature not in FEATURE_COLUMNS:
        raise ValueError(f"unknown feature {feature!r}; choose from {', '.join(FEATURE_COLUMNS)}")
    stream, col = FEATURE_COLUMNS[feature]
    return getattr(session, stream)[:, col]


def session_hour(session: RawSession) -> int:
    return int((session.start_ms % MS_PER_DAY) // MS_PER_HOUR)


def session_weekday(session: RawSession) -> int:
    return int((session.start_ms // MS_PER_DAY + _EPOCH_WEEKDAY) % 7)


def _bucket_stats(dataset: Dataset, feature: str, n: int, bucket_of) -> list[BucketStat]:
    if feature not in FEATURE_COLUMNS:
        raise ValueError(f"unknown feature {feature!r}; choose from {', '.join(FEATURE_COLUMNS)}")
    groups: list[list[np.ndarray]] = [[] for _ in range(n)]
    for s in dataset.sessions:
        groups[bucket_of(s)].append(_feature_values(s, feature))
    out = []
    for b, parts in enumerate(groups):
        v = np.concatenate(parts) if parts else np.zeros(0)
        if v.size == 0:
            out.append(BucketStat(b, feature, math.nan, math.nan, 0))
        else:
            out.append(BucketStat(b, feature, float(v.mean()), float(v.std()), int(v.size)))
    return out


def hourly_stats(dataset: Dataset, feature: str) -> list[BucketStat]:
    """Per-event mean/std of a feature, bucketed by the hour of session start."""
    return _bucket_stats(dataset, feature, 24, session_hour)


def dayofweek_stats(dataset: Dataset, feature: str) -> list[BucketStat]:
    """As :func:`hourly_stats` with 7 day-of-week buckets, Monday = 0."""
    return _bucket_stats(dataset, feature, 7, session_weekday)


def usage_histogram(dataset: Dataset) -> np.ndarray:
    """[7, 24] count of session starts per (weekday, hour)."""
    hist = np.zeros((7, 24), dtype=np.int64)
    for s in dataset.sessions:
        hist[session_weekday(s), session_hour(s)] += 1
    return hist


# --------------------------------------------------------------- t tests

def betainc(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 100_000) -> float:
    """Regularized incomplete beta I_x(a, b) by a modified-Lentz continued fraction."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    if x > (a + 1.0) / (a + b + 2.0):
        return 1.0 - betainc(b, a, 1.0 - x, tol, max_iter)
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    tiny = 1e-300
    c, d = 1.0, 1.0 - (a + b) * x / (a + 1.0)
    d = 1.0 / (d if abs(d) > tiny else tiny)
    f = d
    for m in range(1, max_iter + 1):
        for num in (m * (b - m) * x / ((a + 2 * m - 1) * (a + 2 * m)),
                    -(a + m) * (a + b + m) * x / ((a + 2 * m) * (a + 2 * m + 1))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > tiny else tiny)
            c = 1.0 + num / c
            c = c if abs(c) > tiny else tiny
            delta = c * d
            f *= delta
        if abs(delta - 1.0) < tol:
            break
    else:
        raise ArithmeticError(f"betainc continued fraction did not converge for a={a}, b={b}, x={x}")
    return math.exp(log_front) * f / a


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def welch_ttest(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Two-sided Welch test of equal means with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"each sample needs at least 2 values, got {a.size} and {b.size}")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    qa, qb = va / na, vb / nb
    se2 = qa + qb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, float(na + nb - 2), degenerate=True)
        return TTestResult(math.copysign(math.inf, diff), 0.0, float(na + nb - 2), degenerate=True)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (qa ** 2 / (na - 1) + qb ** 2 / (nb - 1))
    return TTestResult(float(t), t_sf_two_sided(float(t), df), float(df))


@dataclass
class PairwiseTestGrid:
    subjects: list[str]
    p: np.ndarray
    t: np.ndarray
    excluded: list[str] = field(default_factory=list)


def pairwise_grid(dataset: Dataset, feature: str) -> PairwiseTestGrid:
    """Welch test on every unordered subject pair's per-event feature values."""
    per_subject: dict[str, list[np.ndarray]] = {}
    for s in dataset.sessions:
        per_subject.setdefault(s.subject_id, []).append(_feature_values(s, feature))
    values = {k: np.concatenate(v) for k, v in per_subject.items()}
    excluded = sorted(k for k, v in values.items() if v.size < 2)
    subjects = sorted(k for k in values if k not in excluded)
    if len(subjects) < 2:
        raise ValueError(f"pairwise grid needs at least 2 subjects with 2+ events, got {len(subjects)}")
    n = len(subjects)
    p, t = np.ones((n, n)), np.zeros((n, n))
    for i, j in combinations(range(n), 2):
        res = welch_ttest(values[subjects[i]], values[subjects[j]])
        p[i, j] = p[j, i] = res.p
        t[i, j], t[j, i] = res.t, -res.t
    return PairwiseTestGrid(subjects, p, t, excluded)


# ------------------------------------------------------------ CSV output

def _num(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def stats_to_csv(stats: Sequence[BucketStat], bucket_name: str) -> str:
    lines = [f"{bucket_name},feature,mean,std,count"]
    lines += [f"{s.bucket},{s.feature},{_num(s.mean)},{_num(s.std)},{s.count}" for s in stats]
    return "\n".join(lines) + "\n"


def histogram_to_csv(hist: np.ndarray) -> str:
    lines = ["day,hour,count"]
    lines += [f"{d},{h},{int(hist[d, h])}" for d in range(hist.shape[0]) for h in range(hist.shape[1])]
    return "\n".join(lines) + "\n"


def grid_to_csv(grid: PairwiseTestGrid) -> str:
    lines = ["subject_i,subject_j,t,p"]
    for i, si in enumerate(grid.subjects):
        for j, sj in enumerate(grid.subjects):
            lines.append(f"{si},{sj},{grid.t[i, j]!r},{grid.p[i, j]!r}")
    return "\n".join(lines) + "\n"


def write_all(dataset: Dataset, feature: str, out_dir) -> dict[str, str]:
    """Write hourly.csv, dayofweek.csv, histogram.csv and ttest_grid.csv."""
    out = Path(out_dir)
    paths = {name: str(out / name) for name in ("hourly.csv", "dayofweek.csv", "histogram.csv", "ttest_grid.csv")}
    atomic_write_text(paths["hourly.csv"], stats_to_csv(hourly_stats(dataset, feature), "hour"))
    atomic_write_text(paths["dayofweek.csv"], stats_to_csv(dayofweek_stats(dataset, feature), "day"))
    atomic_write_text(paths["histogram.csv"], histogram_to_csv(usage_histogram(dataset)))
    atomic_write_text(paths["ttest_grid.csv"], grid_to_csv(pairwise_grid(dataset, feature)))
    return paths
