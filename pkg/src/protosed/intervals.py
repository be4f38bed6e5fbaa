"""Small helpers for half-open [start, end) interval lists."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

Interval = tuple[float, float]


def union(intervals: Iterable[Interval], tol: float = 0.0) -> list[Interval]:
    """Sort and merge overlapping or touching intervals (gaps up to ``tol`` count as touching)."""
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1] + tol:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def subtract(base: Sequence[Interval], remove: Sequence[Interval]) -> list[Interval]:
    """Parts of ``base`` not covered by ``remove``."""
    remove = union(remove)
    out = []
    for a, b in union(base):
        cur = a
        for ra, rb in remove:
            if rb <= cur or ra >= b:
                continue
            if ra > cur:
                out.append((cur, ra))
            cur = max(cur, rb)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return out


def total_length(intervals: Iterable[Interval]) -> float:
    return float(sum(b - a for a, b in union(intervals)))


def runs(mask: np.ndarray, min_length: int = 1) -> list[tuple[int, int]]:
    """Maximal runs of True in a boolean vector as [start, end) index pairs."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends) if e - s >= min_length]


def to_frames(intervals: Iterable[Interval], hop_s: float, n_frames: int) -> list[tuple[int, int]]:
    """Convert second intervals to frame index ranges clipped to [0, n_frames)."""
    out = []
    for a, b in intervals:
        fa = max(0, int(np.floor(a / hop_s + 0.5)))
        fb = min(n_frames, int(np.floor(b / hop_s + 0.5)))
        if fb <= fa and fa < n_frames:
            fb = fa + 1
        if fb > fa:
            out.append((fa, fb))
    return out


def frame_mask(ranges: Iterable[tuple[int, int]], n_frames: int) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for a, b in ranges:
        mask[max(0, a):min(n_frames, b)] = True
    return mask
