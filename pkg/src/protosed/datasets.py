"""Turn annotated audio directories into per-class pools of feature regions."""
from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import intervals as iv
from .dataio import NEG, POS, UNK, AnnotationEvent, LabeledFile, load_audio, parse_annotations
from .features import FeatureExtractor, StackedFeatures, stacked_input

log = logging.getLogger(__name__)


@dataclass
class Region:
    """Positive and negative frame ranges of one class inside one file."""

    features: np.ndarray  # frames x bins stacked input
    pos: list[tuple[int, int]]
    neg: list[tuple[int, int]]
    file_id: str = ""


@dataclass
class ClassData:
    name: str
    regions: list[Region] = field(default_factory=list)
    source: str = "train"

    @property
    def pos_frames(self) -> int:
        return sum(b - a for r in self.regions for a, b in r.pos)

    @property
    def neg_frames(self) -> int:
        return sum(b - a for r in self.regions for a, b in r.neg)


def first_k_cutoff(events: list[AnnotationEvent], k: int) -> float:
    pos = [e for e in events if e.polarity == POS]
    if not pos:
        return 0.0
    return pos[min(k, len(pos)) - 1].offset_s


def labeled_negative_intervals(events: list[AnnotationEvent], until_s: float) -> list[tuple[float, float]]:
    """Gaps before ``until_s`` not covered by POS or UNK events, plus explicit NEG rows."""
    explicit = [(e.onset_s, min(e.offset_s, until_s)) for e in events if e.polarity == NEG and e.onset_s < until_s]
    covered = [(e.onset_s, e.offset_s) for e in events if e.polarity in (POS, UNK)]
    implicit = iv.subtract([(0.0, until_s)], covered)
    if explicit:
        return iv.subtract(explicit, covered)
    return implicit


def _region(feats: np.ndarray, hop_s: float, pos_s, neg_s, file_id: str) -> Region:
    n = feats.shape[0]
    return Region(feats, iv.to_frames(pos_s, hop_s, n), iv.to_frames(neg_s, hop_s, n), file_id)


def class_regions_from_file(feats: np.ndarray, hop_s: float, events: list[AnnotationEvent],
                            duration_s: float, file_id: str) -> dict[str, Region]:
    """Regions for every label column of a fully annotated training file.

    NEG rows define the negative regions of their class; classes without NEG
    rows use everything outside any POS/UNK event of the file.
    """
    out = {}
    all_cover = [(e.onset_s, e.offset_s) for e in events if e.polarity in (POS, UNK)]
    outside = iv.subtract([(0.0, duration_s)], all_cover)
    for label in sorted({e.label for e in events}):
        evs = [e for e in events if e.label == label]
        pos = [(e.onset_s, e.offset_s) for e in evs if e.polarity == POS]
        if not pos:
            continue
        neg = [(e.onset_s, e.offset_s) for e in evs if e.polarity == NEG]
        neg = iv.subtract(neg, all_cover) if neg else outside
        out[label] = _region(feats, hop_s, pos, neg, file_id)
    return out


class FeatureCache:
    """Computes stacked features once per WAV path."""

    def __init__(self, extractor: FeatureExtractor | None = None):
        self.extractor = extractor or FeatureExtractor()
        self._cache: dict[str, StackedFeatures] = {}
        self._durations: dict[str, float] = {}

    def get(self, wav_path: str) -> StackedFeatures:
        key = os.path.abspath(wav_path)
        if key not in self._cache:
            ex = self.extractor
            clip = load_audio(wav_path, ex.sample_rate)
            self._cache[key] = stacked_input(clip, ex.stft_config, ex.n_mfcc, ex.delta_width,
                                             ex.pcen_params, return_mel=True)
            self._durations[key] = clip.duration
        return self._cache[key]

    def duration(self, wav_path: str) -> float:
        self.get(wav_path)
        return self._durations[os.path.abspath(wav_path)]


def _pairs(root: str) -> list[tuple[str, str]]:
    wavs = sorted(glob.glob(os.path.join(root, "**", "*.wav"), recursive=True))
    out = []
    for w in wavs:
        c = os.path.splitext(w)[0] + ".csv"
        if os.path.exists(c):
            out.append((w, c))
        else:
            log.warning("no annotation CSV for %s; skipped", w)
    return out


def build_train_pools(root: str, cache: FeatureCache) -> list[ClassData]:
    """One ClassData per label column name, merged across all files under ``root``."""
    pools: dict[str, ClassData] = {}
    for wav, csv_path in _pairs(root):
        sf = cache.get(wav)
        events = parse_annotations(csv_path)
        regs = class_regions_from_file(sf.stacked.data, sf.stacked.hop_s, events,
                                       cache.duration(wav), os.path.basename(wav))
        for label, reg in regs.items():
            pools.setdefault(label, ClassData(label, source="train")).regions.append(reg)
    return [pools[k] for k in sorted(pools)]


def build_eval_pools(root: str, cache: FeatureCache, k_shot: int = 5) -> list[ClassData]:
    """Each evaluation file becomes its own class using only its first K positives."""
    out = []
    for wav, csv_path in _pairs(root):
        sf = cache.get(wav)
        events = [e for e in parse_annotations(csv_path)]
        pos = [e for e in events if e.polarity == POS][:k_shot]
        if not pos:
            continue
        cutoff = pos[-1].offset_s
        known = [e for e in events if e.onset_s < cutoff]
        neg = labeled_negative_intervals(known, cutoff)
        reg = _region(sf.stacked.data, sf.stacked.hop_s, [(e.onset_s, e.offset_s) for e in pos], neg,
                      os.path.basename(wav))
        out.append(ClassData(os.path.basename(wav), [reg], source="eval"))
    return out


def labeled_file_pools(files: list[LabeledFile], cache_extractor: FeatureExtractor, k_shot: int = 5,
                       source: str = "eval") -> list[ClassData]:
    """In-memory counterpart of :func:`build_eval_pools`."""
    ex = cache_extractor
    out = []
    for lf in files:
        sf = stacked_input(lf.clip, ex.stft_config, ex.n_mfcc, ex.delta_width, ex.pcen_params)
        pos = lf.by_polarity(POS)[:k_shot]
        if not pos:
            continue
        cutoff = pos[-1].offset_s
        neg = labeled_negative_intervals([e for e in lf.events if e.onset_s < cutoff], cutoff)
        reg = _region(sf.data, sf.hop_s, [(e.onset_s, e.offset_s) for e in pos], neg, lf.file_id)
        out.append(ClassData(lf.file_id or lf.class_name, [reg], source=source))
    return out
