"""STFT front end: power spectrogram, mel filterbank, PCEN, MFCC and deltas.

All matrices are laid out frames x bins.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft
from scipy import signal
from sklearn.base import BaseEstimator, TransformerMixin

from .dataio import AudioClip
from .exceptions import ConfigError, EmptyInputError

AMIN = 1e-10


class FeatureKind(str, enum.Enum):
    LOGMEL = "logmel"
    MEL = "mel"
    PCEN = "pcen"
    MFCC = "mfcc"
    DELTA_MFCC = "delta_mfcc"
    STACKED = "stacked"


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    kind: FeatureKind
    hop_s: float

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise EmptyInputError("feature matrix needs at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.kind.value} feature matrix has non-finite entries")
        if self.hop_s <= 0:
            raise ConfigError("hop_s must be positive")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 128

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ConfigError("need 0 < hop_length <= win_length <= n_fft")
        if not 0 < self.n_mels <= self.n_fft // 2 + 1:
            raise ConfigError(f"n_mels={self.n_mels} exceeds n_fft/2+1={self.n_fft // 2 + 1}")

    @property
    def hop_s(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass(frozen=True)
class PcenParams:
    s: float = 0.025
    alpha: float = 0.98
    delta: float = 2.0
    r: float = 0.5
    eps: float = 1e-6


def hann_window(n: int) -> np.ndarray:
    return signal.get_window("hann", n, fftbins=True)


def stft_power(clip: AudioClip | np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Centered, reflect-padded, Hann-windowed power spectrogram (frames x n_fft/2+1)."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size < cfg.win_length:
        raise EmptyInputError(f"clip has {x.size} samples, shorter than one window ({cfg.win_length})")
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + x.size // cfg.hop_length
    win = np.zeros(cfg.n_fft)
    lo = (cfg.n_fft - cfg.win_length) // 2
    win[lo:lo + cfg.win_length] = hann_window(cfg.win_length)
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft)[::cfg.hop_length][:n_frames]
    spec = sfft.rfft(frames * win, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """Triangular, area-normalized mel filters spanning 0 Hz to Nyquist."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_bins)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    lower = (fft_freqs[None, :] - hz_pts[:-2, None]) / np.diff(hz_pts)[:-1, None]
    upper = (hz_pts[2:, None] - fft_freqs[None, :]) / np.diff(hz_pts)[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    if np.any(weights.max(axis=1) <= 0):
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: some mel filters are empty"
        )
    return weights


def mel_power(clip: AudioClip | np.ndarray, cfg: StftConfig, fbank: np.ndarray | None = None) -> FeatureMatrix:
    fbank = mel_filterbank(cfg) if fbank is None else fbank
    return FeatureMatrix(stft_power(clip, cfg) @ fbank.T, FeatureKind.MEL, cfg.hop_s)


def log_mel(mel: FeatureMatrix) -> FeatureMatrix:
    return FeatureMatrix(10.0 * np.log10(np.maximum(mel.data, AMIN)), FeatureKind.LOGMEL, mel.hop_s)


def pcen(mel: FeatureMatrix | np.ndarray, params: PcenParams = PcenParams(), hop_s: float | None = None) -> FeatureMatrix:
    """Per-channel energy normalization with a first-order IIR smoother seeded at E[0]."""
    E = mel.data if isinstance(mel, FeatureMatrix) else np.asarray(mel, dtype=np.float64)
    hop_s = mel.hop_s if isinstance(mel, FeatureMatrix) else (hop_s or 1.0)
    if not np.all(np.isfinite(E)):
        raise ValueError("PCEN input contains non-finite values")
    if np.any(E < 0):
        raise ValueError("PCEN input must be non-negative")
    s = params.s
    zi = (1.0 - s) * E[:1]
    M, _ = signal.lfilter([s], [1.0, s - 1.0], E, axis=0, zi=zi)
    gain = (params.eps + M) ** -params.alpha
    out = (E * gain + params.delta) ** params.r - params.delta ** params.r
    return FeatureMatrix(out, FeatureKind.PCEN, hop_s)


def mfcc(logmel: FeatureMatrix, n_coeff: int) -> FeatureMatrix:
    """Orthonormal DCT-II over the mel axis, keeping the first ``n_coeff`` coefficients."""
    if n_coeff > logmel.bins:
        raise ConfigError(f"n_coeff={n_coeff} exceeds the {logmel.bins} mel bins")
    c = sfft.dct(logmel.data, type=2, norm="ortho", axis=1)[:, :n_coeff]
    return FeatureMatrix(c, FeatureKind.MFCC, logmel.hop_s)


def delta(feat: FeatureMatrix, width: int = 9) -> FeatureMatrix:
    """Regression-slope deltas over a centered window with edge replication."""
    if width < 3 or width % 2 == 0:
        raise ConfigError(f"delta width must be odd and >= 3, got {width}")
    W = (width - 1) // 2
    x = np.pad(feat.data, ((W, W), (0, 0)), mode="edge")
    T = feat.n_frames
    num = np.zeros_like(feat.data, dtype=np.float64)
    for k in range(1, W + 1):
        num += k * (x[W + k:W + k + T] - x[W - k:W - k + T])
    denom = 2.0 * sum(k * k for k in range(1, W + 1))
    return FeatureMatrix(num / denom, FeatureKind.DELTA_MFCC, feat.hop_s)


def zscore(a: np.ndarray) -> np.ndarray:
    std = a.std()
    return (a - a.mean()) / (std if std > 0 else 1.0)


@dataclass(frozen=True)
class StackedFeatures:
    """Stacked model input plus the linear mel power it was derived from."""

    stacked: FeatureMatrix
    mel: FeatureMatrix


def stacked_input(clip: AudioClip, cfg: StftConfig = StftConfig(), n_mfcc: int = 32,
                  delta_width: int = 9, pcen_params: PcenParams = PcenParams(),
                  return_mel: bool = False):
    """PCEN and delta-MFCC concatenated along bins, each block z-scored over the file.

    MFCC coefficient 0 is dropped, so ``n_mfcc`` delta coefficients (c1..c_n)
    are kept and the result has ``n_mels + n_mfcc`` bins.
    """
    mel = mel_power(clip, cfg)
    p = pcen(mel, pcen_params)
    c = mfcc(log_mel(mel), n_mfcc + 1)
    c = replace(c, data=c.data[:, 1:])
    d = delta(c, delta_width)
    data = np.concatenate([zscore(p.data), zscore(d.data)], axis=1)
    out = FeatureMatrix(data, FeatureKind.STACKED, cfg.hop_s)
    if return_mel:
        return StackedFeatures(out, mel)
    return out


def compute_feature(clip: AudioClip, kind: FeatureKind | str, cfg: StftConfig = StftConfig(),
                    n_mfcc: int = 32, delta_width: int = 9,
                    pcen_params: PcenParams = PcenParams()) -> FeatureMatrix:
    kind = FeatureKind(kind)
    if kind is FeatureKind.STACKED:
        return stacked_input(clip, cfg, n_mfcc, delta_width, pcen_params)
    mel = mel_power(clip, cfg)
    if kind is FeatureKind.MEL:
        return mel
    if kind is FeatureKind.LOGMEL:
        return log_mel(mel)
    if kind is FeatureKind.PCEN:
        return pcen(mel, pcen_params)
    c = mfcc(log_mel(mel), n_mfcc)
    if kind is FeatureKind.MFCC:
        return c
    return delta(c, delta_width)


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping clips to stacked PCEN + delta-MFCC matrices.

    ``transform`` accepts a list of :class:`AudioClip` (or 1-D arrays sampled
    at ``sample_rate``) and returns a list of ``(frames, n_mels + n_mfcc)``
    arrays.
    """

    def __init__(self, sample_rate=22050, n_fft=1024, win_length=1024, hop_length=256,
                 n_mels=128, n_mfcc=32, delta_width=9, kind="stacked",
                 pcen_s=0.025, pcen_alpha=0.98, pcen_delta=2.0, pcen_r=0.5, pcen_eps=1e-6):
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.win_length = win_length
        self.hop_length = hop_length
        self.n_mels = n_mels
        self.n_mfcc = n_mfcc
        self.delta_width = delta_width
        self.kind = kind
        self.pcen_s = pcen_s
        self.pcen_alpha = pcen_alpha
        self.pcen_delta = pcen_delta
        self.pcen_r = pcen_r
        self.pcen_eps = pcen_eps

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.sample_rate, self.n_fft, self.win_length, self.hop_length, self.n_mels)

    @property
    def pcen_params(self) -> PcenParams:
        return PcenParams(self.pcen_s, self.pcen_alpha, self.pcen_delta, self.pcen_r, self.pcen_eps)

    @property
    def n_bins_out(self) -> int:
        return self.n_mels + self.n_mfcc

    def fit(self, X=None, y=None):
        self.stft_config  # validates the configuration
        FeatureKind(self.kind)
        self.n_features_out_ = self.n_bins_out
        return self

    def _as_clip(self, x) -> AudioClip:
        if isinstance(x, AudioClip):
            if x.sample_rate != self.sample_rate:
                raise ConfigError(f"clip at {x.sample_rate} Hz, extractor expects {self.sample_rate} Hz")
            return x
        return AudioClip(np.asarray(x, dtype=np.float64), self.sample_rate)

    def transform_one(self, x) -> FeatureMatrix:
        return compute_feature(self._as_clip(x), self.kind, self.stft_config, self.n_mfcc,
                               self.delta_width, self.pcen_params)

    def transform(self, X):
        return [self.transform_one(x).data for x in X]
