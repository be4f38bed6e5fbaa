"""``protosed`` command line: train, detect, mine, score, features, synth."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import RunConfig
from .dataio import POS, load_audio, parse_annotations, write_predictions
from .datasets import FeatureCache
from .exceptions import ProtoSEDError
from .features import FeatureKind, compute_feature

log = logging.getLogger("protosed")


def _common(parser: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="key = value config file")
    parser.add_argument("--set", action="append", default=d, metavar="KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--workers", type=int, default=d, help="parallel files (default 1)")
    parser.add_argument("--out", default=d, help="output directory (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protosed", description="Few-shot bioacoustic sound event detection.")
    p.add_argument("--version", action="version", version=f"protosed {__version__}")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    t = add("train", "episodic training of the embedding network")
    t.add_argument("--train-root", help="development set directory (WAV + CSV)")
    t.add_argument("--eval-root", help="evaluation set directory used transductively")

    d = add("detect", "few-shot detection on evaluation files")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--audio", required=True, help="WAV file or directory of WAV + CSV pairs")
    d.add_argument("--annotations", help="annotation CSV for a single WAV (default: alongside the WAV)")
    d.add_argument("--probabilities", action="store_true", help="also write per-window probabilities")

    m = add("mine", "negative sample searching for one file")
    m.add_argument("--audio", required=True)
    m.add_argument("--annotations")

    s = add("score", "event-based precision / recall / F-measure")
    s.add_argument("--pred", required=True, help="prediction CSV")
    s.add_argument("--ref", required=True, nargs="+", help="reference CSV files or directories")

    f = add("features", "dump a feature matrix to CSV")
    f.add_argument("--audio", required=True)
    f.add_argument("--kind", default="stacked", choices=[k.value for k in FeatureKind])

    y = add("synth", "write the synthetic benchmark dataset")
    y.add_argument("--n-classes", type=int, default=12)
    y.add_argument("--n-eval", type=int, default=4)
    y.add_argument("--duration", type=float, default=60.0)
    return p


def _load_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    path = getattr(args, "config", None)
    cfg = RunConfig.from_file(path, overrides) if path else RunConfig().with_overrides(overrides)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = cfg.with_overrides(workers=args.workers)
    if cfg["workers"] < 1:
        raise ProtoSEDError("workers must be >= 1")
    return cfg


def _require_file(path: str, what: str):
    if not path or not os.path.isfile(path):
        raise ProtoSEDError(f"{what} not found: {path}")


def _versions() -> dict:
    import scipy
    import sklearn
    return {"protosed": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, t0: float, outputs: list[str], **extra):
    man = {"command": command, "config_hash": cfg.hash, "seed": cfg["seed"], "workers": cfg["workers"],
           "versions": _versions(), "wall_time_s": round(time.time() - t0, 3),
           "outputs": sorted(os.path.relpath(o, out_dir) for o in outputs), **extra}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())


def _wav_pairs(audio: str, annotations: str | None) -> list[tuple[str, str]]:
    if os.path.isdir(audio):
        if annotations:
            raise ProtoSEDError("--annotations only applies to a single WAV file")
        from .pipeline import eval_pairs
        pairs = eval_pairs(audio)
        if not pairs:
            raise ProtoSEDError(f"no WAV + CSV pairs under {audio}")
        return pairs
    _require_file(audio, "audio file")
    csv_path = annotations or os.path.splitext(audio)[0] + ".csv"
    _require_file(csv_path, "annotation file")
    return [(audio, csv_path)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg: RunConfig, out_dir: str) -> list[str]:
    from .pipeline import train_from_roots
    over = {}
    if args.train_root:
        over["data.train_root"] = args.train_root
    if args.eval_root:
        over["data.eval_root"] = args.eval_root
    cfg = cfg.with_overrides(**over)
    for key in ("data.train_root", "data.eval_root"):
        if cfg[key] and not os.path.isdir(cfg[key]):
            raise ProtoSEDError(f"{key} directory not found: {cfg[key]}")
    if not cfg["data.train_root"] and not cfg["data.eval_root"]:
        raise ProtoSEDError("train needs data.train_root and/or data.eval_root")
    res = train_from_roots(cfg, out_dir)
    print(f"best val_acc {res.state.best_val_acc:.4f} after {res.state.epoch + 1} epochs; checkpoint {res.checkpoint}")
    args._cfg = cfg
    return [res.checkpoint, res.log_path]


def cmd_detect(args, cfg: RunConfig, out_dir: str) -> list[str]:
    from .embednet.checkpoint import load_checkpoint
    from .pipeline import detect_file
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    pairs = _wav_pairs(args.audio, args.annotations)
    cache = FeatureCache(cfg.extractor())
    if cfg["detect.save_probabilities"]:
        args.probabilities = True

    def run(pair):
        return detect_file(pair[0], pair[1], model, cfg, cache)

    if cfg["workers"] > 1:
        with ThreadPoolExecutor(cfg["workers"]) as ex:
            dets = list(ex.map(run, pairs))
    else:
        dets = [run(p) for p in pairs]
    pred = os.path.join(out_dir, "predictions.csv")
    write_predictions([e for d in dets for e in d.events], pred)
    outputs = [pred]
    if args.probabilities:
        prob = os.path.join(out_dir, "probabilities.csv")
        with open(prob, "w", newline="") as fh:
            fh.write("Audiofilename,Starttime,Endtime,Probability\n")
            for d in dets:
                for s, e, p in zip(d.track.starts_s, d.track.ends_s, d.track.probs):
                    fh.write(f"{d.file_id},{s:.4f},{e:.4f},{p:.6f}\n")
        outputs.append(prob)
    print(f"{sum(len(d.events) for d in dets)} events in {len(dets)} files -> {pred}")
    return outputs


def cmd_mine(args, cfg: RunConfig, out_dir: str) -> list[str]:
    from . import intervals as iv
    from .negmine import frequency_bin_weights, search_negative_segments
    (wav, csv_path), = _wav_pairs(args.audio, args.annotations)
    sf = FeatureCache(cfg.extractor()).get(wav)
    mel, hop = sf.mel.data, sf.mel.hop_s
    pos = [e for e in parse_annotations(csv_path) if e.polarity == POS][: cfg["detect.k_shot"]]
    if not pos:
        raise ProtoSEDError(f"{csv_path}: no labeled positive events")
    pos_ranges = iv.to_frames([(e.onset_s, e.offset_s) for e in pos], hop, mel.shape[0])
    weights = frequency_bin_weights(mel, pos_ranges)
    ranges, track = search_negative_segments(mel, pos_ranges, weights, cfg["mine.margin_db"],
                                             cfg["mine.min_run"], return_track=True)
    paths = {k: os.path.join(out_dir, f"{k}.csv") for k in ("weights", "scores", "ranges")}
    paths["threshold"] = os.path.join(out_dir, "threshold.txt")
    with open(paths["weights"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "weight"])
        w.writerows([i, f"{x:.6f}"] for i, x in enumerate(weights))
    with open(paths["scores"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_s", "sisnr_db"])
        w.writerows([i, f"{i * hop:.4f}", f"{x:.6f}"] for i, x in enumerate(track.scores))
    with open(paths["threshold"], "w") as fh:
        fh.write(f"{track.threshold:.6f}\n")
    with open(paths["ranges"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_frame", "end_frame", "start_s", "end_s"])
        w.writerows([a, b, f"{a * hop:.4f}", f"{b * hop:.4f}"] for a, b in ranges)
    print(f"{len(ranges)} negative ranges, threshold {track.threshold:.3f} dB")
    return list(paths.values())


def cmd_score(args, cfg: RunConfig, out_dir: str) -> list[str]:
    from .pipeline import score_predictions, subset_of
    from .score import report, summary_lines
    _require_file(args.pred, "prediction file")
    refs, subsets = [], []
    for r in args.ref:
        if os.path.isdir(r):
            found = sorted(glob.glob(os.path.join(r, "**", "*.csv"), recursive=True))
            if not found:
                raise ProtoSEDError(f"no reference CSV files under {r}")
            refs += found
            subsets += [subset_of(c, r) for c in found]
        else:
            _require_file(r, "reference file")
            refs.append(r)
            subsets.append(".")
    if set(subsets) == {"."}:
        subsets = ["all"] * len(refs)
    predicted = [_as_detection(e) for e in parse_annotations(args.pred)]
    reports = score_predictions(predicted, refs, cfg["score.k_shot"], cfg["score.min_iou"], subsets)
    overall, table = report(reports, cfg["score.overall"])
    print(table)
    print(f"P={overall.precision:.2f} R={overall.recall:.2f} F={overall.f_measure:.2f}")
    path = os.path.join(out_dir, "summary.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(summary_lines(overall, reports)) + "\n")
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(table + "\n")
    return [path, os.path.join(out_dir, "table.txt")]


def _as_detection(e):
    from .dataio import DetectionEvent
    return DetectionEvent(e.file_id, e.onset_s, e.offset_s)


def cmd_features(args, cfg: RunConfig, out_dir: str) -> list[str]:
    _require_file(args.audio, "audio file")
    ex = cfg.extractor()
    clip = load_audio(args.audio, ex.sample_rate)
    fm = compute_feature(clip, args.kind, ex.stft_config, ex.n_mfcc, ex.delta_width, ex.pcen_params)
    stem = os.path.splitext(os.path.basename(args.audio))[0]
    path = os.path.join(out_dir, f"{stem}.{args.kind}.csv")
    np.savetxt(path, fm.data, fmt="%.6g", delimiter=",")
    print(f"{fm.n_frames} frames x {fm.bins} bins -> {path}")
    return [path]


def cmd_synth(args, cfg: RunConfig, out_dir: str) -> list[str]:
    from .synth import default_spec, make_synthetic_dataset
    spec = default_spec(args.n_classes, args.duration, args.n_eval)
    ds = make_synthetic_dataset(spec, cfg["seed"], out_dir)
    print(f"{len(ds.files)} files -> {ds.root}")
    return [p for f in ds.files for p in (f.wav, f.csv)]


COMMANDS = {"train": cmd_train, "detect": cmd_detect, "mine": cmd_mine, "score": cmd_score,
            "features": cmd_features, "synth": cmd_synth}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        cfg = _load_config(args)
        out_dir = os.path.join(args.out or "runs", args.command)
        os.makedirs(out_dir, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg, out_dir)
        _write_manifest(out_dir, args.command, getattr(args, "_cfg", cfg), t0, outputs)
    except (ProtoSEDError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"protosed {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
