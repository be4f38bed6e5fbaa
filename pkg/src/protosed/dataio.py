"""Audio decoding, resampling and challenge-style annotation CSV I/O.

Annotation files follow the few-shot bioacoustic challenge layout: a header
``Audiofilename,Starttime,Endtime`` followed by one or more label columns
whose cells hold ``POS``, ``NEG`` or ``UNK``.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .exceptions import AnnotationValidationError, EmptyInputError, FormatError

POS, NEG, UNK = "POS", "NEG", "UNK"
POLARITIES = (POS, NEG, UNK)
DEFAULT_SAMPLE_RATE = 22050

_FIXED_COLUMNS = ("Audiofilename", "Starttime", "Endtime")


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyInputError("AudioClip needs a non-empty mono sample buffer")
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class AnnotationEvent:
    file_id: str
    onset_s: float
    offset_s: float
    polarity: str = POS
    label: str = "Q"

    @property
    def duration(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class DetectionEvent:
    file_id: str
    onset_s: float
    offset_s: float
    score: float = 1.0

    @property
    def duration(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class LabeledFile:
    """A decoded clip together with the annotation events of one class."""

    clip: AudioClip
    events: list[AnnotationEvent] = field(default_factory=list)
    class_name: str = "Q"
    file_id: str = ""

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.onset_s, e.offset_s))
        tol = 1.0 / self.clip.sample_rate
        for ev in self.events:
            if ev.offset_s > self.clip.duration + tol:
                raise AnnotationValidationError(
                    f"event {ev.onset_s:.4f}-{ev.offset_s:.4f}s extends past clip "
                    f"duration {self.clip.duration:.4f}s in {self.file_id or 'clip'}"
                )

    def by_polarity(self, polarity: str) -> list[AnnotationEvent]:
        return [e for e in self.events if e.polarity == polarity]


# --------------------------------------------------------------------------
# audio


def _to_float(data: np.ndarray) -> np.ndarray:
    kind, size = data.dtype.kind, data.dtype.itemsize
    if kind == "u" and size == 1:
        out = (data.astype(np.float64) - 128.0) / 128.0
    elif kind == "i":
        # scipy returns 24-bit PCM left-justified in int32
        out = data.astype(np.float64) / float(2 ** (8 * size - 1))
    elif kind == "f":
        out = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise FormatError(f"unsupported WAV sample type {data.dtype}")
    return out


def resample(x: np.ndarray, rate_in: int, rate_out: int, half_width: int = 16) -> np.ndarray:
    """Windowed-sinc polyphase resampling with a cutoff at 0.45 * min(rate_in, rate_out).

    ``half_width`` is the filter half length in units of the slower rate's
    sample period.
    """
    if rate_in == rate_out:
        return x
    frac = Fraction(rate_out, rate_in)
    up, down = frac.numerator, frac.denominator
    cutoff_hz = 0.45 * min(rate_in, rate_out)
    fast_rate = rate_in * up
    numtaps = 2 * half_width * max(up, down) + 1
    # resample_poly applies the gain of `up` itself
    taps = signal.firwin(numtaps, cutoff_hz, window=("kaiser", 8.0), fs=fast_rate)
    y = signal.resample_poly(x, up, down, window=taps)
    n_out = int(round(x.size * rate_out / rate_in))
    return y[:n_out]


def load_audio(path: str | os.PathLike, target_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Decode a PCM/float WAV file to a mono clip at ``target_rate``."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except OSError:
        raise
    except Exception as exc:  # scipy raises assorted types on malformed headers
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path} contains no audio samples")
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, int(rate), int(target_rate))
    return AudioClip(np.ascontiguousarray(x), int(target_rate))


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(os.fspath(path), sample_rate, pcm)


# --------------------------------------------------------------------------
# annotations


def parse_annotations(path: str | os.PathLike) -> list[AnnotationEvent]:
    """Read a challenge-format annotation CSV.

    One event is produced per row and per label column that holds a
    POS/NEG/UNK token. Row order is preserved within each label column and
    the result is sorted by onset (stable).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty annotation file") from None
        missing = [c for c in _FIXED_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        i_file, i_on, i_off = (header.index(c) for c in _FIXED_COLUMNS)
        label_cols = [i for i, h in enumerate(header) if h not in _FIXED_COLUMNS]
        events = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                onset, offset = float(row[i_on]), float(row[i_off])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: row {row_no} has non-numeric times") from exc
            if not offset > onset:
                raise AnnotationValidationError(
                    f"{path}: row {row_no} has Endtime {offset} <= Starttime {onset}"
                )
            if onset < 0:
                raise AnnotationValidationError(f"{path}: row {row_no} has negative Starttime")
            file_id = row[i_file].strip()
            if not label_cols:
                # prediction files carry no label column; treat rows as positives
                events.append(AnnotationEvent(file_id, onset, offset, POS, "Q"))
            for i in label_cols:
                token = row[i].strip() if i < len(row) else ""
                if not token:
                    continue
                if token not in POLARITIES:
                    raise AnnotationValidationError(
                        f"{path}: row {row_no} column {header[i]!r} has token {token!r}"
                    )
                events.append(AnnotationEvent(file_id, onset, offset, token, header[i]))
    events.sort(key=lambda e: e.onset_s)
    return events


def write_predictions(events: Iterable[DetectionEvent], path: str | os.PathLike) -> None:
    rows = sorted(events, key=lambda e: (e.file_id, e.onset_s))
    with open(path, "w", newline="") as fh:
        fh.write("Audiofilename,Starttime,Endtime\n")
        for ev in rows:
            fh.write(f"{ev.file_id},{ev.onset_s:.4f},{ev.offset_s:.4f}\n")


def write_annotations(events: Sequence[AnnotationEvent], path: str | os.PathLike,
                      labels: Sequence[str] | None = None) -> None:
    """Write events in the challenge layout, one label column per distinct label."""
    labels = list(labels) if labels else sorted({e.label for e in events}) or ["Q"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join([*_FIXED_COLUMNS, *labels]) + "\n")
        for ev in sorted(events, key=lambda e: (e.onset_s, e.offset_s)):
            cells = [ev.polarity if lab == ev.label else "" for lab in labels]
            fh.write(f"{ev.file_id},{ev.onset_s:.4f},{ev.offset_s:.4f}," + ",".join(cells) + "\n")


def load_labeled_file(wav_path: str | os.PathLike, csv_path: str | os.PathLike | None = None,
                      target_rate: int = DEFAULT_SAMPLE_RATE) -> list[LabeledFile]:
    """Load a WAV plus its annotation CSV, returning one LabeledFile per label column."""
    wav_path = os.fspath(wav_path)
    csv_path = os.fspath(csv_path) if csv_path else os.path.splitext(wav_path)[0] + ".csv"
    clip = load_audio(wav_path, target_rate)
    events = parse_annotations(csv_path)
    file_id = os.path.basename(wav_path)
    labels = sorted({e.label for e in events})
    return [
        LabeledFile(clip, [e for e in events if e.label == lab], class_name=lab, file_id=file_id)
        for lab in labels
    ]


def frames_to_seconds(frame: float, hop_length: int, sample_rate: int) -> float:
    return frame * hop_length / sample_rate


def seconds_to_frames(t: float, hop_length: int, sample_rate: int) -> int:
    return int(math.floor(t * sample_rate / hop_length + 0.5))
