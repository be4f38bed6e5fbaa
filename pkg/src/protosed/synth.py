"""Seeded synthetic bioacoustic-style dataset: harmonic call trains over pink noise."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import POS, AnnotationEvent, write_annotations, write_wav
from .rng import substream


@dataclass(frozen=True)
class SynthClass:
    name: str
    f0: float
    duration_range: tuple[float, float] = (0.25, 0.5)
    n_events: int = 30
    snr_db: float = 6.0
    n_harmonics: int = 3
    sweep: float = 0.0          # relative f0 change across one call
    am_rate: float = 0.0        # Hz, 0 disables amplitude modulation


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[SynthClass, ...]
    duration_s: float = 60.0
    sample_rate: int = 22050
    n_eval: int = 4                        # last n classes go to eval/
    short_gap: tuple[float, float] = (0.12, 0.2)
    long_gap: tuple[float, float] = (1.0, 3.0)
    p_short_gap: float = 0.4
    fade_s: float = 0.01
    distractors_per_min: float = 0.0       # off-class tone bursts (negatives)


def default_spec(n_classes: int = 12, duration_s: float = 60.0, n_eval: int = 4, **kw) -> SynthSpec:
    """Classes with log-spaced fundamentals and varied call shapes."""
    f0s = np.geomspace(300.0, 3600.0, n_classes)
    shapes = [(0.0, 0.0), (0.15, 0.0), (-0.15, 0.0), (0.0, 12.0)]
    classes = []
    for i, f0 in enumerate(f0s):
        sweep, am = shapes[i % len(shapes)]
        classes.append(SynthClass(f"C{i:02d}", float(round(f0, 1)), (0.25, 0.5), 30,
                                  6.0, 2 + i % 3, sweep, am))
    return SynthSpec(tuple(classes), duration_s, n_eval=n_eval, **kw)


@dataclass
class SynthFile:
    name: str
    wav: str
    csv: str
    events: list[tuple[float, float]]
    split: str
    synth_class: SynthClass


@dataclass
class SynthDataset:
    root: str
    train_root: str
    eval_root: str
    files: list[SynthFile] = field(default_factory=list)

    def by_split(self, split: str) -> list[SynthFile]:
        return [f for f in self.files if f.split == split]


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / x.std()


def _call(cls: SynthClass, dur: float, sr: int, fade_s: float) -> np.ndarray:
    n = max(2, int(round(dur * sr)))
    t = np.arange(n) / sr
    f_inst = cls.f0 * (1.0 + cls.sweep * t / dur)
    phase = 2 * np.pi * np.cumsum(f_inst) / sr
    x = np.zeros(n)
    for h in range(1, cls.n_harmonics + 1):
        if h * f_inst.max() < 0.45 * sr:
            x += np.sin(h * phase) / h
    if cls.am_rate > 0:
        x *= 0.6 + 0.4 * np.cos(2 * np.pi * cls.am_rate * t)
    nf = min(int(round(fade_s * sr)), n // 2)
    if nf > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        x[:nf] *= ramp
        x[n - nf:] *= ramp[::-1]
    return x / np.sqrt(np.mean(x ** 2))


def place_events(cls: SynthClass, spec: SynthSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    t = rng.uniform(0.5, 1.5)
    out = []
    while len(out) < cls.n_events:
        dur = rng.uniform(*cls.duration_range)
        if t + dur > spec.duration_s - 0.2:
            break
        out.append((round(t, 4), round(t + dur, 4)))
        gap = rng.uniform(*spec.short_gap) if rng.random() < spec.p_short_gap else rng.uniform(*spec.long_gap)
        t += dur + gap
    return out


def render_file(cls: SynthClass, spec: SynthSpec, seed: int, others: Sequence[SynthClass] = ()):
    """(samples, events) for one class file."""
    sr = spec.sample_rate
    rng = substream(seed, "synthetic", cls.name)
    n = int(round(spec.duration_s * sr))
    noise = 0.05 * pink_noise(n, rng)
    x = noise.copy()
    events = place_events(cls, spec, rng)
    amp = 0.05 * 10 ** (cls.snr_db / 20.0)
    for on, off in events:
        a = int(round(on * sr))
        call = _call(cls, off - on, sr, spec.fade_s)
        x[a:a + call.size] += amp * call[: n - a]
    n_dis = int(round(spec.distractors_per_min * spec.duration_s / 60.0))
    if n_dis and others:
        busy = [(on - 0.3, off + 0.3) for on, off in events]
        for _ in range(n_dis):
            other = others[int(rng.integers(len(others)))]
            dur = rng.uniform(*other.duration_range)
            on = rng.uniform(0.0, spec.duration_s - dur - 0.1)
            if any(on < b and on + dur > a for a, b in busy):
                continue
            a = int(round(on * sr))
            call = _call(other, dur, sr, spec.fade_s)
            x[a:a + call.size] += amp * call[: n - a]
            busy.append((on - 0.3, on + dur + 0.3))
    peak = np.abs(x).max()
    if peak > 0.99:
        x *= 0.99 / peak
    return x, events


def make_synthetic_dataset(spec: SynthSpec | None = None, seed: int = 0, out_dir: str = "synthetic") -> SynthDataset:
    """Write ``train/`` and ``eval/`` WAV + CSV pairs; output is byte-reproducible per seed.

    Training CSVs carry one label column named after the class; evaluation
    CSVs use the single ``Q`` column. All annotated rows are POS.
    """
    spec = spec or default_spec()
    n_train = len(spec.classes) - spec.n_eval
    if n_train < 0:
        raise ValueError("n_eval exceeds number of classes")
    ds = SynthDataset(out_dir, os.path.join(out_dir, "train"), os.path.join(out_dir, "eval"))
    os.makedirs(ds.train_root, exist_ok=True)
    os.makedirs(ds.eval_root, exist_ok=True)
    for i, cls in enumerate(spec.classes):
        split = "train" if i < n_train else "eval"
        others = [c for c in spec.classes if c.name != cls.name]
        x, events = render_file(cls, spec, seed, others)
        root = ds.train_root if split == "train" else ds.eval_root
        wav = os.path.join(root, f"{cls.name}.wav")
        csv_path = os.path.join(root, f"{cls.name}.csv")
        write_wav(wav, x, spec.sample_rate)
        label = cls.name if split == "train" else "Q"
        ann = [AnnotationEvent(f"{cls.name}.wav", on, off, POS, label) for on, off in events]
        write_annotations(ann, csv_path, [label])
        ds.files.append(SynthFile(cls.name, wav, csv_path, events, split, cls))
    return ds


def band_energy_db(x: np.ndarray, sr: int, f0: float, spans: Sequence[tuple[float, float]],
                   rel_bw: float = 0.1) -> float:
    """Mean power (dB) in [f0(1-bw), f0(1+bw)] over the union of time ``spans``."""
    from scipy.signal import butter, sosfiltfilt
    sos = butter(4, [f0 * (1 - rel_bw), f0 * (1 + rel_bw)], btype="band", fs=sr, output="sos")
    y = sosfiltfilt(sos, x)
    idx = np.concatenate([np.arange(int(a * sr), min(len(x), int(b * sr))) for a, b in spans])
    return float(10 * np.log10(np.mean(y[idx] ** 2) + 1e-20))
