"""Negative sample searching by weighted spectral template matching.

Frequency bins whose energy changes most across the labeled event
boundaries get the largest weight. The weighted mel columns of the labeled
positives are averaged into a template, every frame is scored against it
with scale-invariant SNR, and frames scoring below the worst positive frame
become negative candidates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import intervals as iv

SISNR_CLAMP_DB = 60.0


@dataclass(frozen=True)
class MatchScoreTrack:
    scores: np.ndarray
    threshold: float


def _flank_context(ranges: Sequence[tuple[int, int]], n_frames: int, i: int):
    a, b = ranges[i]
    length = b - a
    prev_end = ranges[i - 1][1] if i > 0 else 0
    next_start = ranges[i + 1][0] if i + 1 < len(ranges) else n_frames
    before = (max(prev_end, a - length), a)
    after = (b, min(next_start, b + length))
    return [r for r in (before, after) if r[1] > r[0]]


def frequency_bin_weights(mel: np.ndarray, pos_ranges: Sequence[tuple[int, int]]) -> np.ndarray:
    """Per-bin weights in [0, 1] from |event energy - flanking energy|, averaged over events.

    ``mel`` is a linear (frames x bins) mel power spectrogram and
    ``pos_ranges`` are [start, end) frame ranges of the labeled positives.
    Each event's context is as long as the event on either side, cut at the
    file edges and at neighboring events.
    """
    mel = np.asarray(mel, dtype=np.float64)
    ranges = sorted((int(a), int(b)) for a, b in pos_ranges if b > a)
    if not ranges:
        raise ValueError("frequency_bin_weights needs at least one positive event")
    diffs = []
    for i, (a, b) in enumerate(ranges):
        ctx = _flank_context(ranges, mel.shape[0], i)
        if not ctx:
            continue
        ctx_frames = np.concatenate([mel[c0:c1] for c0, c1 in ctx])
        diffs.append(np.abs(mel[a:b].mean(axis=0) - ctx_frames.mean(axis=0)))
    if not diffs:
        raise ValueError("no positive event has any flanking context frames")
    raw = np.mean(diffs, axis=0)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1e-300):
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def sisnr(estimate, reference, clamp_db: float = SISNR_CLAMP_DB):
    """Scale-invariant SNR in dB between mean-centered vectors, clamped to +-clamp_db.

    Accepts 1-D vectors, or a 2-D ``estimate`` whose rows are each scored
    against the 1-D ``reference``. An all-zero (after centering) estimate has
    no projection onto the reference and scores ``-clamp_db``.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape[-1] != ref.shape[-1]:
        raise ValueError(f"length mismatch: {est.shape[-1]} vs {ref.shape[-1]}")
    ref = ref - ref.mean()
    ref_energy = ref @ ref
    if ref_energy <= 0:
        raise ValueError("sisnr reference is zero after mean removal")
    est = est - est.mean(axis=-1, keepdims=True)
    scale = (est @ ref) / ref_energy
    target = scale[..., None] * ref
    noise = est - target
    t_energy = (target ** 2).sum(-1)
    n_energy = (noise ** 2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(t_energy / n_energy)
    db = np.where(n_energy <= 1e-30 * np.maximum(t_energy, 1e-300), clamp_db, db)
    db = np.where(t_energy <= 0, -clamp_db, db)
    db = np.clip(db, -clamp_db, clamp_db)
    return float(db) if db.ndim == 0 else db


def match_scores(mel: np.ndarray, pos_ranges: Sequence[tuple[int, int]], weights: np.ndarray) -> np.ndarray:
    weighted = np.asarray(mel, dtype=np.float64) * weights
    pos_mask = iv.frame_mask(pos_ranges, weighted.shape[0])
    template = weighted[pos_mask].mean(axis=0)
    return sisnr(weighted, template)


def search_negative_segments(mel: np.ndarray, pos_ranges: Sequence[tuple[int, int]],
                             weights: np.ndarray, margin_db: float = 0.0, min_run: int = 3,
                             return_track: bool = False):
    """Frame ranges whose template match is below every labeled positive frame's score.

    Labeled positive frames are never returned. Runs shorter than
    ``min_run`` frames are dropped.
    """
    scores = match_scores(mel, pos_ranges, weights)
    pos_mask = iv.frame_mask(pos_ranges, scores.shape[0])
    threshold = float(scores[pos_mask].min()) - margin_db
    cand = (scores < threshold) & ~pos_mask
    ranges = iv.runs(cand, min_length=min_run)
    if return_track:
        return ranges, MatchScoreTrack(scores, threshold)
    return ranges


class NegativeSampleSearcher(BaseEstimator):
    """``fit(mel, pos_ranges)`` learns weights, template and threshold; ``predict`` returns ranges."""

    def __init__(self, margin_db=0.0, min_run=3):
        self.margin_db = margin_db
        self.min_run = min_run

    def fit(self, X, y):
        mel = np.asarray(X, dtype=np.float64)
        self.weights_ = frequency_bin_weights(mel, y)
        weighted = mel * self.weights_
        self.template_ = weighted[iv.frame_mask(y, mel.shape[0])].mean(axis=0)
        self.threshold_ = float(sisnr(weighted[iv.frame_mask(y, mel.shape[0])], self.template_).min()) - self.margin_db
        self.pos_ranges_ = [(int(a), int(b)) for a, b in y]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "template_")
        return sisnr(np.asarray(X, dtype=np.float64) * self.weights_, self.template_)

    def predict(self, X):
        scores = self.score_samples(X)
        cand = (scores < self.threshold_) & ~iv.frame_mask(self.pos_ranges_, scores.shape[0])
        return iv.runs(cand, min_length=self.min_run)
