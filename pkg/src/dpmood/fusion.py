"""Early fusion of keypress and accelerometer streams, and late-fusion views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import RawSession, atomic_write_text

FEATURES = ("duration", "time_since_last", "dx", "dy", "ax", "ay", "az")


@dataclass(frozen=True, eq=False)
class FusedSequence:
    rows: np.ndarray            # [L, 7]
    row_timestamps: np.ndarray  # [L]
    collisions: int = 0

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class ViewPair:
    alphanumeric: np.ndarray   # [L_k, 4]
    accelerometer: np.ndarray  # [L_a, 3]


def align_nearest(keypress_ts, accel_ts) -> np.ndarray:
    """For each keypress timestamp, the index of the nearest accelerometer sample.

    Both inputs must be sorted. Exact ties resolve to the earlier sample.
    """
    k = np.asarray(keypress_ts, dtype=np.float64)
    a = np.asarray(accel_ts, dtype=np.float64)
    if len(a) == 0:
        raise ValueError("cannot align against an empty accelerometer stream")
    if len(k) == 0:
        return np.zeros(0, dtype=np.int64)
    right = np.clip(np.searchsorted(a, k, side="left"), 0, len(a) - 1)
    left = np.maximum(right - 1, 0)
    left = np.searchsorted(a, a[left], side="left")  # first of any repeated timestamps
    take_left = np.abs(k - a[left]) <= np.abs(a[right] - k)
    return np.where(take_left, left, right).astype(np.int64)


def ef_dropna(session: RawSession) -> FusedSequence:
    """One row per keypress: its 4 features plus its nearest accel triple."""
    kp, ac = session.keypresses, session.accel
    idx = align_nearest(kp[:, 0], ac[:, 0])
    rows = np.concatenate([kp[:, 1:5], ac[idx, 1:4]], axis=1)
    return FusedSequence(rows, kp[:, 0].copy())


def ef_fillna(session: RawSession) -> FusedSequence:
    """One row per accel sample; keypress features land on their nearest row,
    zeros elsewhere. When keypresses collide on one row the latest wins."""
    kp, ac = session.keypresses, session.accel
    idx = align_nearest(kp[:, 0], ac[:, 0])
    alpha = np.zeros((len(ac), 4))
    # last occurrence of each row index among the (time-ordered) keypresses
    rev_unique, rev_first = np.unique(idx[::-1], return_index=True)
    winners = len(idx) - 1 - rev_first
    alpha[rev_unique] = kp[winners, 1:5]
    rows = np.concatenate([alpha, ac[:, 1:4]], axis=1)
    return FusedSequence(rows, ac[:, 0].copy(), collisions=len(idx) - len(rev_unique))


def late_fusion_views(session: RawSession) -> ViewPair:
    return ViewPair(session.keypresses[:, 1:5].copy(), session.accel[:, 1:4].copy())


def fuse(session: RawSession, fusion: str) -> list[np.ndarray]:
    """Per-view feature matrices for a fusion mode ('late', 'ef-fillna', 'ef-dropna')."""
    if fusion == "ef-dropna":
        return [ef_dropna(session).rows]
    if fusion == "ef-fillna":
        return [ef_fillna(session).rows]
    if fusion == "late":
        v = late_fusion_views(session)
        return [v.alphanumeric, v.accelerometer]
    raise ValueError(f"unknown fusion mode {fusion!r}")


def write_fused_csv(path, fused: FusedSequence) -> None:
    lines = ["row_timestamp," + ",".join(FEATURES)]
    for ts, row in zip(fused.row_timestamps, fused.rows):
        lines.append(f"{int(ts) if float(ts).is_integer() else repr(float(ts))},"
                     + ",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
