"""Split, merge and filter detected events using the few-shot label statistics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import intervals as iv
from .dataio import DetectionEvent
from .detect import (DetectionPrototypes, FileContext, SegmentationPlan, build_prototypes, extract_windows,
                     positive_probability)
from .embednet.network import Embedder

log = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class EventStats:
    t_bar: float
    t_max: float
    tneg_min: float
    tneg: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.t_bar > 0 and self.t_max > 0 and self.tneg_min > 0):
            raise ValueError("event statistics must be positive durations")
        if self.t_max < self.t_bar - _EPS:
            raise ValueError("t_max must be >= t_bar")

    @classmethod
    def from_labels(cls, pos_events: Sequence[tuple[float, float]],
                    neg_intervals: Sequence[tuple[float, float]]) -> "EventStats":
        pos = [b - a for a, b in pos_events if b > a]
        if not pos:
            raise ValueError("need at least one labeled positive event")
        neg = tuple(b - a for a, b in neg_intervals if b - a > 0)
        t_bar = float(np.mean(pos))
        if not neg:
            log.warning("no labeled negative segments; using mean positive duration as minimum gap")
        return cls(t_bar, float(max(pos)), float(min(neg)) if neg else t_bar, neg)


@dataclass(frozen=True)
class PostConfig:
    split: bool = True
    merge: bool = True
    filter: bool = True
    pad: bool = False
    pad_fraction: float = 0.1
    split_trigger: str = "tbar"
    filter_factor: float = 0.4
    merge_factor: float = 0.8
    split_factor: float = 2.0

    @classmethod
    def off(cls) -> "PostConfig":
        return cls(split=False, merge=False, filter=False, pad=False)


def _sorted(events):
    return sorted(events, key=lambda e: (e.onset_s, e.offset_s))


def filter_short(events: Sequence[DetectionEvent], stats: EventStats, factor: float = 0.4) -> list[DetectionEvent]:
    """Drop events shorter than ``factor * t_bar`` (the boundary itself is kept)."""
    limit = factor * stats.t_bar
    return [e for e in _sorted(events) if e.duration >= limit - _EPS]


def _join(a: DetectionEvent, b: DetectionEvent) -> DetectionEvent:
    return DetectionEvent(a.file_id, a.onset_s, max(a.offset_s, b.offset_s), max(a.score, b.score))


def merge_adjacent(events: Sequence[DetectionEvent], stats: EventStats, factor: float = 0.8) -> list[DetectionEvent]:
    """Merge neighbours whose summed duration < factor*t_bar and whose gap < tneg_min.

    Left-to-right passes are repeated until nothing changes.
    """
    cur = _sorted(events)
    limit = factor * stats.t_bar
    while True:
        out: list[DetectionEvent] = []
        for e in cur:
            if out:
                prev = out[-1]
                gap = e.onset_s - prev.offset_s
                if prev.duration + e.duration < limit and gap < stats.tneg_min:
                    out[-1] = _join(prev, e)
                    continue
            out.append(e)
        if len(out) == len(cur):
            return out
        cur = out


def union_overlaps(events: Sequence[DetectionEvent]) -> list[DetectionEvent]:
    out: list[DetectionEvent] = []
    for e in _sorted(events):
        if out and e.onset_s <= out[-1].offset_s:
            out[-1] = _join(out[-1], e)
        else:
            out.append(e)
    return out


def pad_events(events: Sequence[DetectionEvent], stats: EventStats, fraction: float = 0.1,
               floor_s: float = 0.0) -> list[DetectionEvent]:
    m = fraction * stats.t_bar
    padded = [replace(e, onset_s=max(floor_s, e.onset_s - m), offset_s=e.offset_s + m) for e in events]
    return union_overlaps(padded)


def negative_mining_window(tneg_min_frames: float) -> float:
    """Short-gap detection window (frames) for the minimum labeled gap length in frames."""
    if tneg_min_frames <= 8:
        return 8
    if tneg_min_frames <= 100:
        return tneg_min_frames / 2
    return 100


def split_long(events: Sequence[DetectionEvent], neg_intervals: Sequence[tuple[float, float]],
               stats: EventStats, trigger: str = "tbar", factor: float = 2.0) -> list[DetectionEvent]:
    """Cut events longer than ``factor * t_bar`` (or ``t_max``) at every mined gap inside them."""
    if trigger not in ("tbar", "tmax"):
        raise ValueError(f"split_trigger must be 'tbar' or 'tmax', got {trigger!r}")
    base = stats.t_bar if trigger == "tbar" else stats.t_max
    limit = factor * base
    gaps = iv.union(neg_intervals)
    out = []
    for e in _sorted(events):
        inside = [(a, b) for a, b in gaps if a > e.onset_s and b < e.offset_s]
        if e.duration <= limit or not inside:
            out.append(e)
            continue
        for a, b in iv.subtract([(e.onset_s, e.offset_s)], inside):
            out.append(DetectionEvent(e.file_id, float(a), float(b), e.score))
    return out


def mine_split_points(ctx: FileContext, protos: DetectionPrototypes, stats: EventStats, model: Embedder,
                      threshold: float = 0.95, rebuild: bool = True, seed: int = 0) -> list[tuple[float, float]]:
    """Rescore the query region with a short window and return sub-threshold intervals (s).

    Each short window below ``threshold`` contributes its central third, so
    consecutive windows tile the time axis without overlapping. With
    ``rebuild`` the prototypes are recomputed from windows of the short
    length so that query and prototype embeddings see the same context;
    otherwise ``protos`` is used as given.
    """
    fh = ctx.frame_hop_s
    w_frames = negative_mining_window(stats.tneg_min / fh)
    plan = SegmentationPlan.for_window(w_frames * fh, ctx.query_start_s, fh)
    starts = plan.starts(ctx.features.shape[0])
    if len(starts) == 0:
        return []
    if rebuild:
        protos = build_prototypes(ctx.features, ctx.mel, ctx.pos_events, ctx.neg_intervals, model, plan,
                                  seed, len(protos.negatives), _n_negatives(protos), file_id=ctx.file_id,
                                  positive_windows=True)
    q = model.embed(extract_windows(ctx.features, starts, plan))
    p = np.mean([positive_probability(q, protos.positive, neg) for neg in protos.negatives], axis=0)
    t0, h = float(starts[0]), plan.hop_s
    low = [(t0 + (i + 1) * h, t0 + (i + 2) * h) for i in np.flatnonzero(p < threshold)]
    return iv.union(low, tol=1e-9)


def _n_negatives(protos: DetectionPrototypes) -> int:
    return len(protos.sample_indices[0]) if protos.sample_indices else 30


def postprocess(events: Sequence[DetectionEvent], stats: EventStats, cfg: PostConfig = PostConfig(),
                neg_intervals: Sequence[tuple[float, float]] = (), floor_s: float = 0.0) -> list[DetectionEvent]:
    """split -> pad -> merge -> filter, each stage optional."""
    out = union_overlaps(events)
    if cfg.split:
        out = split_long(out, neg_intervals, stats, cfg.split_trigger, cfg.split_factor)
    if cfg.pad:
        out = pad_events(out, stats, cfg.pad_fraction, floor_s)
    if cfg.merge:
        out = merge_adjacent(out, stats, cfg.merge_factor)
    if cfg.filter:
        out = filter_short(out, stats, cfg.filter_factor)
    return out


class EventPostProcessor(TransformerMixin, BaseEstimator):
    """``fit(stats, neg_intervals)`` stores the file statistics; ``transform(events)`` cleans events."""

    def __init__(self, split=True, merge=True, filter=True, pad=False, pad_fraction=0.1,
                 split_trigger="tbar", floor_s=0.0):
        self.split = split
        self.merge = merge
        self.filter = filter
        self.pad = pad
        self.pad_fraction = pad_fraction
        self.split_trigger = split_trigger
        self.floor_s = floor_s

    def fit(self, X, y=None):
        stats = X if isinstance(X, EventStats) else EventStats(*X)
        self.stats_ = stats
        self.neg_intervals_ = list(y or [])
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        cfg = PostConfig(self.split, self.merge, self.filter, self.pad, self.pad_fraction, self.split_trigger)
        return postprocess(X, self.stats_, cfg, self.neg_intervals_, self.floor_s)
