"""Flat ``key = value`` run configuration with typed defaults and overrides."""
from __future__ import annotations

import hashlib
import os
from typing import Any, Iterable, Mapping

from .exceptions import ConfigError

# key -> (kind, default)
_SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "workers": ("int", 1),
    "data.train_root": ("str", ""),
    "data.eval_root": ("str", ""),
    "features.sample_rate": ("int", 22050),
    "features.n_fft": ("int", 1024),
    "features.win_length": ("int", 1024),
    "features.hop_length": ("int", 256),
    "features.n_mels": ("int", 128),
    "features.n_mfcc": ("int", 32),
    "features.delta_width": ("int", 9),
    "features.pcen_s": ("float", 0.025),
    "features.pcen_alpha": ("float", 0.98),
    "features.pcen_delta": ("float", 2.0),
    "features.pcen_r": ("float", 0.5),
    "features.pcen_eps": ("float", 1e-6),
    "model.channels": ("ints", (64, 128, 64)),
    "model.convs_per_block": ("int", 3),
    "model.pool_time": ("int", 4),
    "model.pool_freq": ("int", 8),
    "model.leaky_slope": ("float", 0.01),
    "train.n_way": ("int", 10),
    "train.k_shot": ("int", 5),
    "train.segment_s": ("float", 0.2),
    "train.episodes_per_epoch": ("int", 100),
    "train.max_epochs": ("int", 100),
    "train.patience": ("int", 10),
    "train.base_lr": ("float", 1e-3),
    "train.lr_decay": ("float", 0.65),
    "train.decay_every": ("int", 10),
    "train.momentum": ("float", 0.9),
    "train.use_negatives": ("bool", True),
    "train.transductive": ("bool", True),
    "train.spec_augment": ("bool", False),
    "train.val_episodes": ("int", 4),
    "detect.k_shot": ("int", 5),
    "detect.threshold": ("float", 0.95),
    "detect.thresholds": ("floats", ()),
    "detect.n_runs": ("int", 6),
    "detect.n_negatives": ("int", 30),
    "detect.min_negative_s": ("float", 2.0),
    "detect.save_probabilities": ("bool", False),
    "post.split": ("bool", True),
    "post.merge": ("bool", True),
    "post.filter": ("bool", True),
    "post.pad": ("bool", False),
    "post.pad_fraction": ("float", 0.1),
    "post.split_trigger": ("str", "tbar"),
    "score.min_iou": ("float", 0.3),
    "score.k_shot": ("int", 5),
    "score.overall": ("str", "harmonic"),
    "mine.margin_db": ("float", 0.0),
    "mine.min_run": ("int", 3),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(key: str, kind: str, raw: Any):
    if not isinstance(raw, str):
        raw = format_value(raw)
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        if kind == "floats":
            return tuple(float(t) for t in text.replace(" ", "").split(",") if t)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {raw!r}") from None


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class RunConfig(Mapping):
    """Immutable mapping of every known key to a typed value.

    Unknown keys are rejected. ``hash`` is a digest of the canonical text and
    changes iff some value changes.
    """

    def __init__(self, values: Mapping[str, Any] | None = None):
        vals = {k: d for k, (_, d) in _SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in _SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _parse(k, _SCHEMA[k][0], v)
        if vals["post.split_trigger"] not in ("tbar", "tmax"):
            raise ConfigError("post.split_trigger must be 'tbar' or 'tmax'")
        if vals["score.overall"] not in ("harmonic", "pooled"):
            raise ConfigError("score.overall must be 'harmonic' or 'pooled'")
        self._v = vals

    @classmethod
    def from_file(cls, path: str | os.PathLike, overrides: Iterable[str] = ()) -> "RunConfig":
        path = os.fspath(path)
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            vals = parse_lines(fh, path)
        return cls(vals).with_overrides(overrides)

    def with_overrides(self, overrides: Iterable[str] = (), **kw) -> "RunConfig":
        vals = dict(self._v)
        vals.update(parse_lines(overrides, "--set"))
        vals.update(kw)
        return RunConfig(vals)

    def __getitem__(self, k):
        return self._v[k]

    def __iter__(self):
        return iter(self._v)

    def __len__(self):
        return len(self._v)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self._v[k])}\n" for k in sorted(self._v))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # builders for the module-level configuration objects

    def extractor(self):
        from .features import FeatureExtractor
        f = "features."
        return FeatureExtractor(self[f + "sample_rate"], self[f + "n_fft"], self[f + "win_length"],
                                self[f + "hop_length"], self[f + "n_mels"], self[f + "n_mfcc"],
                                self[f + "delta_width"], pcen_s=self[f + "pcen_s"],
                                pcen_alpha=self[f + "pcen_alpha"], pcen_delta=self[f + "pcen_delta"],
                                pcen_r=self[f + "pcen_r"], pcen_eps=self[f + "pcen_eps"])

    def embedder_config(self, n_bins: int):
        from .embednet.network import EmbedderConfig
        return EmbedderConfig(n_bins=n_bins, channels=tuple(self["model.channels"]),
                              convs_per_block=self["model.convs_per_block"], pool_time=self["model.pool_time"],
                              pool_freq=self["model.pool_freq"], leaky_slope=self["model.leaky_slope"])

    def train_config(self):
        from .protolearn import TrainConfig
        kw = {k.split(".", 1)[1]: v for k, v in self._v.items() if k.startswith("train.")}
        return TrainConfig(seed=self["seed"], **kw)

    def post_config(self):
        from .postproc import PostConfig
        return PostConfig(self["post.split"], self["post.merge"], self["post.filter"], self["post.pad"],
                          self["post.pad_fraction"], self["post.split_trigger"])

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(self["detect.thresholds"]) or (self["detect.threshold"],)


def known_keys() -> list[str]:
    return sorted(_SCHEMA)
