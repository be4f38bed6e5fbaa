"""Residual CNN embedder: three conv blocks, then adaptive average pooling."""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import ShapeError
from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class EmbedderConfig:
    n_bins: int = 160
    channels: tuple[int, ...] = (64, 128, 64)
    convs_per_block: int = 3
    pool_time: int = 4
    pool_freq: int = 8
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1] * self.pool_time * self.pool_freq

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def expected_param_count(cfg: EmbedderConfig) -> int:
    total, c_in = 0, 1
    for c in cfg.channels:
        total += 9 * c_in * c + (cfg.convs_per_block - 1) * 9 * c * c  # 3x3 convs, no bias
        total += cfg.convs_per_block * 2 * c  # batch-norm scale and shift
        total += c_in * c + c  # 1x1 skip conv with bias
        c_in = c
    return total


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Embedder:
    """Maps (batch, frames, bins) feature segments to flat embeddings.

    Each block runs ``convs_per_block`` 3x3 conv / batch-norm / leaky-ReLU
    layers followed by 2x2 max pooling; the block input is added back after a
    1x1 conv and 2x2 average pooling. The final map is average-pooled to a
    ``(pool_time, pool_freq)`` grid and flattened channel-major.
    """

    def __init__(self, config: EmbedderConfig = EmbedderConfig(), seed: int | None = 0,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._init_params()

    def _init_params(self):
        cfg, rng, dt = self.config, self.rng, self.dtype
        c_in = 1
        for bi, c in enumerate(cfg.channels):
            ci = c_in
            for li in range(cfg.convs_per_block):
                p = f"block{bi}.conv{li}"
                self._param(f"{p}.weight", _kaiming_uniform(rng, (3, 3, ci, c), 9 * ci, cfg.leaky_slope))
                self._param(f"{p}.bn.gamma", np.ones(c))
                self._param(f"{p}.bn.beta", np.zeros(c))
                self.buffers[f"{p}.bn.running_mean"] = np.zeros(c, dtype=dt)
                self.buffers[f"{p}.bn.running_var"] = np.ones(c, dtype=dt)
                ci = c
            self._param(f"block{bi}.skip.weight", _kaiming_uniform(rng, (1, 1, c_in, c), c_in, 1.0))
            self._param(f"block{bi}.skip.bias", np.zeros(c))
            c_in = c

    def _param(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    @property
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> OrderedDict[str, np.ndarray]:
        """Current gradients; parameters off the compute path report zeros."""
        return OrderedDict(
            (k, p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()
        )

    def _block(self, x: Tensor, bi: int, training: bool) -> Tensor:
        cfg, P, Bf = self.config, self.params, self.buffers
        h = x
        for li in range(cfg.convs_per_block):
            p = f"block{bi}.conv{li}"
            h = ag.conv2d(h, P[f"{p}.weight"], None, padding=1)
            h = ag.batch_norm(h, P[f"{p}.bn.gamma"], P[f"{p}.bn.beta"], Bf[f"{p}.bn.running_mean"],
                              Bf[f"{p}.bn.running_var"], training, cfg.bn_momentum, cfg.bn_eps)
            h = ag.leaky_relu(h, cfg.leaky_slope)
        main = ag.max_pool2x2(h)
        skip = ag.avg_pool2x2(ag.conv2d(x, P[f"block{bi}.skip.weight"], P[f"block{bi}.skip.bias"], padding=0))
        return ag.add(main, skip)

    def forward(self, segments, training: bool = False) -> Tensor:
        """Embed a batch of segments shaped (batch, frames, bins) or (frames, bins)."""
        x = segments.data if isinstance(segments, Tensor) else np.asarray(segments)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ShapeError(f"expected (batch, frames, bins), got shape {x.shape}")
        if x.shape[2] != self.config.n_bins:
            raise ShapeError(f"segment has {x.shape[2]} bins, embedder expects {self.config.n_bins}")
        if x.shape[1] < 1:
            raise ShapeError("segment has no frames")
        h = Tensor(x[..., None].astype(self.dtype, copy=False))
        for bi in range(len(self.config.channels)):
            h = self._block(h, bi, training)
        h = ag.adaptive_avg_pool(h, self.config.pool_time, self.config.pool_freq)
        h = ag.transpose(h, (0, 3, 1, 2))
        return ag.reshape(h, (h.shape[0], -1))

    __call__ = forward

    def embed(self, segments, batch_size: int = 64) -> np.ndarray:
        """Eval-mode embeddings without taping; ``segments`` is a list or a 3-D array.

        Segments of different lengths are batched by length.
        """
        if isinstance(segments, np.ndarray) and segments.ndim == 3:
            groups = {segments.shape[1]: list(range(len(segments)))}
            seq = segments
        else:
            seq = [np.asarray(s) for s in segments]
            groups: dict[int, list[int]] = {}
            for i, s in enumerate(seq):
                groups.setdefault(s.shape[0], []).append(i)
        out = np.empty((len(seq), self.embedding_dim), dtype=np.float64)
        with ag.no_grad():
            for _, idx in sorted(groups.items()):
                for lo in range(0, len(idx), batch_size):
                    chunk = idx[lo:lo + batch_size]
                    batch = np.stack([seq[i] for i in chunk])
                    out[chunk] = self.forward(batch, training=False).data
        return out

    # state handling

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        state = OrderedDict((k, p.data) for k, p in self.params.items())
        state.update(self.buffers)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        expected = self.state_arrays()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for k, v in state.items():
            if v.shape != expected[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {expected[k].shape}")
            if k in self.params:
                self.params[k].data = np.array(v, dtype=self.dtype)
            else:
                self.buffers[k][...] = v
