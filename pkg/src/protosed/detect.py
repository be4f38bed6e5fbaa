"""Few-shot inference on one file: segmentation, prototypes, scoring, thresholding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import intervals as iv
from .dataio import POS, AnnotationEvent, DetectionEvent
from .datasets import labeled_negative_intervals
from .embednet.network import Embedder
from .negmine import frequency_bin_weights, search_negative_segments
from .rng import substream

log = logging.getLogger(__name__)

MIN_WINDOW_FRAMES = 8


def adaptive_window(t_max: float, hop_s: float = 256 / 22050) -> float:
    """Query window length in seconds for the longest labeled positive ``t_max``.

    Buckets are half-open (lo, hi]; the shortest bucket is a fixed 8 frames.
    """
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t_max <= 0.1:
        return MIN_WINDOW_FRAMES * hop_s
    if t_max <= 0.4:
        return t_max
    if t_max <= 0.8:
        return t_max / 2
    if t_max <= 3.0:
        return t_max / 4
    return t_max / 8


@dataclass(frozen=True)
class SegmentationPlan:
    window_s: float
    hop_s: float
    query_start_s: float
    frame_hop_s: float = 256 / 22050

    def __post_init__(self):
        if not self.window_s > 0:
            raise ValueError("window_s must be positive")

    @classmethod
    def for_window(cls, window_s: float, query_start_s: float, frame_hop_s: float) -> "SegmentationPlan":
        return cls(window_s, window_s / 3.0, query_start_s, frame_hop_s)

    @property
    def window_frames(self) -> int:
        return max(1, int(round(self.window_s / self.frame_hop_s)))

    def starts(self, n_frames: int, from_s: float | None = None) -> np.ndarray:
        """Start times (s) of windows that fit inside the file, from ``from_s`` on."""
        t0 = self.query_start_s if from_s is None else from_s
        end_s = n_frames * self.frame_hop_s
        last = end_s - self.window_frames * self.frame_hop_s
        if last < t0:
            return np.array([t0]) if t0 < end_s else np.array([])
        n = int(math.floor((last - t0) / self.hop_s + 1e-9)) + 1
        return t0 + self.hop_s * np.arange(n)

    def start_frame(self, start_s: float) -> int:
        return int(math.floor(start_s / self.frame_hop_s + 0.5))


def extract_windows(features: np.ndarray, starts_s: np.ndarray, plan: SegmentationPlan) -> np.ndarray:
    n, w = features.shape[0], plan.window_frames
    out = np.empty((len(starts_s), w, features.shape[1]), dtype=features.dtype)
    for i, s in enumerate(starts_s):
        f = min(max(0, plan.start_frame(s)), max(0, n - w))
        seg = features[f:f + w]
        if seg.shape[0] < w:
            seg = np.pad(seg, ((0, w - seg.shape[0]), (0, 0)), mode="edge")
        out[i] = seg
    return out


@dataclass
class ProbabilityTrack:
    probs: np.ndarray
    starts_s: np.ndarray
    window_s: float
    file_id: str = ""
    runs: np.ndarray | None = None  # (n_runs, n_segments) per-run probabilities

    def __post_init__(self):
        if self.probs.shape != self.starts_s.shape:
            raise ValueError("probs and starts must have equal length")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def ends_s(self) -> np.ndarray:
        return self.starts_s + self.window_s


@dataclass
class DetectionPrototypes:
    positive: np.ndarray
    negatives: list[np.ndarray]
    sample_indices: list[np.ndarray] = field(default_factory=list)
    mined: bool = False
    pool_size: int = 0


def _pool_windows(ranges: Sequence[tuple[int, int]], w: int, hop: float) -> list[tuple[int, int]]:
    out = []
    for a, b in ranges:
        if b - a <= w:
            out.append((a, b))
            continue
        n = int(math.floor((b - a - w) / hop)) + 1
        out.extend((a + int(round(i * hop)), a + int(round(i * hop)) + w) for i in range(n))
    return out


def build_prototypes(features: np.ndarray, mel: np.ndarray | None, pos_events: Sequence[tuple[float, float]],
                     neg_intervals: Sequence[tuple[float, float]], model: Embedder, plan: SegmentationPlan,
                     rng_seed: int = 0, n_runs: int = 6, n_negatives: int = 30,
                     min_negative_s: float = 2.0, file_id: str = "",
                     positive_windows: bool = False, whole_file_negative: bool = False) -> DetectionPrototypes:
    """Positive prototype from whole labeled events, plus ``n_runs`` sampled negative prototypes.

    With less than ``min_negative_s`` of labeled negative audio the pool is
    extended by spectral negative sample searching over the whole file.
    ``positive_windows=True`` builds the positive prototype from windows of
    the plan's length cut from the events instead of from whole events.
    ``whole_file_negative=True`` is a comparison baseline for tests only: every
    run uses the mean embedding of all windows of the file as its negative.
    """
    n = features.shape[0]
    fh = plan.frame_hop_s
    w, hopf = plan.window_frames, max(1.0, plan.window_frames / 3.0)
    pos_ranges = iv.to_frames(pos_events, fh, n)
    pos_segs = _pool_windows(pos_ranges, w, hopf) if positive_windows else pos_ranges
    pos_emb = model.embed([features[a:b] for a, b in pos_segs])
    positive = pos_emb.mean(axis=0)

    if whole_file_negative:
        everything = model.embed([features[a:b] for a, b in _pool_windows([(0, n)], w, hopf)]).mean(axis=0)
        return DetectionPrototypes(positive, [everything] * n_runs, [], False, 0)
    neg_ranges = iv.to_frames(neg_intervals, fh, n)
    mined = False
    if iv.total_length(neg_intervals) < min_negative_s and mel is not None:
        weights = frequency_bin_weights(mel, pos_ranges)
        found = search_negative_segments(mel, pos_ranges, weights)
        neg_ranges = [tuple(r) for r in iv.union(list(neg_ranges) + list(found))]
        mined = True
    pool = _pool_windows(neg_ranges, w, hopf)
    if not pool:
        log.warning("%s: empty negative pool; falling back to all unlabeled query windows", file_id or "file")
        q0 = plan.start_frame(plan.query_start_s)
        pool = _pool_windows([(q0, n)], w, hopf)
    pool_emb = model.embed([features[a:b] for a, b in pool])
    negatives, indices = [], []
    for r in range(n_runs):
        rrng = substream(rng_seed, "negatives", file_id, r)
        idx = rrng.choice(len(pool), size=n_negatives, replace=len(pool) < n_negatives)
        indices.append(np.sort(idx))
        negatives.append(pool_emb[idx].mean(axis=0))
    return DetectionPrototypes(positive, negatives, indices, mined, len(pool))


def positive_probability(query: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> np.ndarray:
    """Two-way softmax over negated distances, returning the positive entry."""
    d_pos = np.sqrt(((query - positive) ** 2).sum(-1))
    d_neg = np.sqrt(((query - negative) ** 2).sum(-1))
    # softmax([-d_pos, -d_neg])[0] == 1 / (1 + exp(d_pos - d_neg))
    z = np.clip(d_pos - d_neg, -700, 700)
    return 1.0 / (1.0 + np.exp(z))


def score_queries(features: np.ndarray, plan: SegmentationPlan, protos: DetectionPrototypes,
                  model: Embedder, file_id: str = "", from_s: float | None = None,
                  query_embeddings: np.ndarray | None = None) -> ProbabilityTrack:
    starts = plan.starts(features.shape[0], from_s)
    if query_embeddings is None:
        q = model.embed(extract_windows(features, starts, plan)) if len(starts) else np.zeros((0, 1))
    else:
        q = query_embeddings
    if len(starts) == 0:
        return ProbabilityTrack(np.zeros(0), starts, plan.window_s, file_id, np.zeros((len(protos.negatives), 0)))
    per_run = np.stack([positive_probability(q, protos.positive, neg) for neg in protos.negatives])
    return ProbabilityTrack(per_run.mean(axis=0), starts, plan.window_s, file_id, per_run)


def threshold_events(track: ProbabilityTrack, thr: float = 0.95, file_id: str | None = None) -> list[DetectionEvent]:
    """Maximal runs with p >= thr; overlapping run spans are joined into one event."""
    fid = track.file_id if file_id is None else file_id
    spans = []
    for a, b in iv.runs(track.probs >= thr):
        spans.append((float(track.starts_s[a]), float(track.ends_s[b - 1]), float(track.probs[a:b].max())))
    out: list[list] = []
    for on, off, sc in spans:
        if out and on <= out[-1][1]:
            out[-1][1] = max(out[-1][1], off)
            out[-1][2] = max(out[-1][2], sc)
        else:
            out.append([on, off, sc])
    return [DetectionEvent(fid, on, off, sc) for on, off, sc in out]


def threshold_ensemble(track: ProbabilityTrack, thresholds: Sequence[float],
                       post: Callable[[list[DetectionEvent]], list[DetectionEvent]] | None = None,
                       file_id: str | None = None) -> list[DetectionEvent]:
    """Majority vote over per-threshold detections (after optional post-processing).

    A time region survives when it is covered in at least ceil(len/2) of the
    threshold runs; surviving regions are merged.
    """
    thresholds = list(thresholds)
    fid = track.file_id if file_id is None else file_id
    per_thr = []
    for thr in thresholds:
        evs = threshold_events(track, thr, fid)
        per_thr.append(post(evs) if post else evs)
    if len(per_thr) == 1:
        return per_thr[0]
    need = math.ceil(len(thresholds) / 2)
    cuts = sorted({t for evs in per_thr for e in evs for t in (e.onset_s, e.offset_s)})
    kept = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        votes = sum(any(e.onset_s <= mid < e.offset_s for e in evs) for evs in per_thr)
        if votes >= need:
            kept.append((a, b))
    out = []
    for a, b in iv.union(kept):
        sc = max((e.score for evs in per_thr for e in evs if e.onset_s < b and e.offset_s > a), default=1.0)
        out.append(DetectionEvent(fid, a, b, sc))
    return out


# ---------------------------------------------------------------------------
# per-file session


@dataclass
class FileContext:
    """Everything detection needs about one file after the few-shot labels are read."""

    file_id: str
    features: np.ndarray
    mel: np.ndarray | None
    pos_events: list[tuple[float, float]]
    neg_intervals: list[tuple[float, float]]
    query_start_s: float
    frame_hop_s: float

    @classmethod
    def from_annotations(cls, file_id: str, features: np.ndarray, mel: np.ndarray | None,
                         events: Sequence[AnnotationEvent], k_shot: int, frame_hop_s: float) -> "FileContext":
        pos = [e for e in events if e.polarity == POS][:k_shot]
        if not pos:
            raise ValueError(f"{file_id}: no labeled positive events")
        cutoff = pos[-1].offset_s
        neg = labeled_negative_intervals([e for e in events if e.onset_s < cutoff], cutoff)
        return cls(file_id, features, mel, [(e.onset_s, e.offset_s) for e in pos], neg, cutoff, frame_hop_s)

    @property
    def t_max(self) -> float:
        return max(b - a for a, b in self.pos_events)


class FewShotDetector(BaseEstimator):
    """Few-shot detector for a single file.

    ``fit(X, y)`` takes the file's stacked features ``X`` (frames x bins) and
    its annotation events ``y`` (only the first ``k_shot`` positives are
    used) and builds the prototypes. ``predict_proba`` returns the averaged
    probability track of the query region, ``predict`` the thresholded events.
    """

    def __init__(self, embedder=None, threshold=0.95, n_runs=6, n_negatives=30, min_negative_s=2.0,
                 k_shot=5, frame_hop_s=256 / 22050, file_id="", random_state=0):
        self.embedder = embedder
        self.threshold = threshold
        self.n_runs = n_runs
        self.n_negatives = n_negatives
        self.min_negative_s = min_negative_s
        self.k_shot = k_shot
        self.frame_hop_s = frame_hop_s
        self.file_id = file_id
        self.random_state = random_state

    def fit(self, X, y, mel=None):
        if self.embedder is None:
            raise ValueError("FewShotDetector needs a trained embedder")
        X = np.asarray(X)
        self.context_ = FileContext.from_annotations(self.file_id, X, mel, y, self.k_shot, self.frame_hop_s)
        window = adaptive_window(self.context_.t_max, self.frame_hop_s)
        self.plan_ = SegmentationPlan.for_window(window, self.context_.query_start_s, self.frame_hop_s)
        self.prototypes_ = build_prototypes(X, mel, self.context_.pos_events, self.context_.neg_intervals,
                                            self.embedder, self.plan_, self.random_state, self.n_runs,
                                            self.n_negatives, self.min_negative_s, self.file_id)
        return self

    def predict_proba(self, X=None) -> ProbabilityTrack:
        check_is_fitted(self, "prototypes_")
        feats = self.context_.features if X is None else np.asarray(X)
        return score_queries(feats, self.plan_, self.prototypes_, self.embedder, self.file_id)

    def predict(self, X=None) -> list[DetectionEvent]:
        return threshold_events(self.predict_proba(X), self.threshold)
