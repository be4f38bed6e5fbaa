"""End-to-end glue: train from dataset roots, detect and post-process files, score."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .dataio import DetectionEvent, parse_annotations
from .datasets import FeatureCache, build_eval_pools, build_train_pools
from .detect import (FileContext, ProbabilityTrack, SegmentationPlan, adaptive_window, build_prototypes,
                     score_queries, threshold_ensemble)
from .embednet.network import Embedder
from .postproc import EventStats, mine_split_points, postprocess
from .protolearn import TrainResult, train
from .score import MatchReport, score_file


@dataclass
class FileDetection:
    file_id: str
    events: list[DetectionEvent]
    track: ProbabilityTrack
    stats: EventStats
    split_points: list[tuple[float, float]]
    mined_negatives: bool


def train_from_roots(cfg: RunConfig, out_dir: str, cache: FeatureCache | None = None) -> TrainResult:
    cache = cache or FeatureCache(cfg.extractor())
    train_classes = build_train_pools(cfg["data.train_root"], cache) if cfg["data.train_root"] else []
    eval_classes = []
    if cfg["train.transductive"] and cfg["data.eval_root"]:
        eval_classes = build_eval_pools(cfg["data.eval_root"], cache, cfg["train.k_shot"])
    n_bins = cache.extractor.n_bins_out
    return train(cfg.train_config(), train_classes, eval_classes, embedder_config=cfg.embedder_config(n_bins),
                 out_dir=out_dir, hop_s=cache.extractor.stft_config.hop_s)


def detect_file(wav_path: str, annotations, model: Embedder, cfg: RunConfig,
                cache: FeatureCache | None = None, post: bool | None = None) -> FileDetection:
    """Detect target events after the first K labeled positives of one file.

    ``annotations`` is a CSV path or a list of AnnotationEvent. ``post=False``
    disables every post-processing stage regardless of ``cfg``.
    """
    cache = cache or FeatureCache(cfg.extractor())
    sf = cache.get(wav_path)
    feats, mel, fh = sf.stacked.data, sf.mel.data, sf.stacked.hop_s
    events = parse_annotations(annotations) if isinstance(annotations, (str, os.PathLike)) else list(annotations)
    fid = os.path.basename(wav_path)
    ctx = FileContext.from_annotations(fid, feats, mel, events, cfg["detect.k_shot"], fh)
    plan = SegmentationPlan.for_window(adaptive_window(ctx.t_max, fh), ctx.query_start_s, fh)
    protos = build_prototypes(feats, mel, ctx.pos_events, ctx.neg_intervals, model, plan, cfg["seed"],
                              cfg["detect.n_runs"], cfg["detect.n_negatives"], cfg["detect.min_negative_s"], fid)
    track = score_queries(feats, plan, protos, model, fid)
    stats = EventStats.from_labels(ctx.pos_events, ctx.neg_intervals)
    pcfg = cfg.post_config()
    if post is False:
        pcfg = type(pcfg).off()
    split_points: list[tuple[float, float]] = []
    if pcfg.split:
        split_points = mine_split_points(ctx, protos, stats, model, min(cfg.thresholds), seed=cfg["seed"])

    def _post(evs):
        return postprocess(evs, stats, pcfg, split_points, floor_s=ctx.query_start_s)

    out = threshold_ensemble(track, cfg.thresholds, _post, fid)
    return FileDetection(fid, out, track, stats, split_points, protos.mined)


def eval_pairs(root: str) -> list[tuple[str, str]]:
    out = []
    for w in sorted(glob.glob(os.path.join(root, "**", "*.wav"), recursive=True)):
        c = os.path.splitext(w)[0] + ".csv"
        if os.path.exists(c):
            out.append((w, c))
    return out


def detect_root(root: str, model: Embedder, cfg: RunConfig, cache: FeatureCache | None = None,
                post: bool | None = None) -> list[FileDetection]:
    cache = cache or FeatureCache(cfg.extractor())
    return [detect_file(w, c, model, cfg, cache, post) for w, c in eval_pairs(root)]


def subset_of(path: str, root: str) -> str:
    """First directory under ``root`` (the challenge subsets HB/ME/PB), or '.'."""
    rel = os.path.relpath(path, root)
    parts = rel.split(os.sep)
    return parts[0] if len(parts) > 1 else "."


def score_predictions(predicted: Sequence[DetectionEvent], reference_csvs: Sequence[str], k_shot: int = 5,
                      min_iou: float = 0.3, subsets: Sequence[str] | None = None) -> dict[str, MatchReport]:
    """Per-subset reports; predictions are routed to reference files by file id."""
    by_file: dict[str, list[DetectionEvent]] = {}
    for e in predicted:
        by_file.setdefault(e.file_id, []).append(e)
    reports: dict[str, MatchReport] = {}
    for i, ref_csv in enumerate(reference_csvs):
        ref = parse_annotations(ref_csv)
        fid = ref[0].file_id if ref else os.path.splitext(os.path.basename(ref_csv))[0] + ".wav"
        sub = subsets[i] if subsets else "all"
        rep = score_file(by_file.get(fid, []), ref, k_shot, min_iou, fid)
        reports[sub] = reports.get(sub, MatchReport()) + rep
    return reports


def detections_f_measure(dets: Sequence[FileDetection], root: str, cfg: RunConfig) -> float:
    pairs = eval_pairs(root)
    events = [e for d in dets for e in d.events]
    reps = score_predictions(events, [c for _, c in pairs], cfg["score.k_shot"], cfg["score.min_iou"])
    return float(np.round(sum(reps.values(), MatchReport()).f_measure, 10))
