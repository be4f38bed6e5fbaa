"""Episodic N-way K-shot metric learning with negative supports.

Each episode draws N classes uniformly from the union of development
classes and (for transductive training) the partially labeled evaluation
files. A class contributes K support and K query positives plus K segments
from its own negative regions. Query prototypes are classified against the
N positive and N negative support prototypes; only positive queries carry
loss.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import ClassData
from .embednet import autograd as ag
from .embednet.checkpoint import load_checkpoint, save_checkpoint
from .embednet.network import Embedder, EmbedderConfig
from .embednet.optim import SGD
from .exceptions import ConfigError, SamplingError, ShapeError, TrainingAborted
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class Episode:
    class_names: list[str]
    support: np.ndarray  # (N, K, T, F)
    query: np.ndarray  # (N, K, T, F)
    negative: np.ndarray  # (N, K, T, F)
    starts: list[list[tuple[int, int]]] = field(default_factory=list)  # (region idx, start) per pos segment

    @property
    def n_way(self) -> int:
        return self.support.shape[0]

    @property
    def k_shot(self) -> int:
        return self.support.shape[1]

    def segments(self) -> np.ndarray:
        """All segments as one batch ordered [support | query | negative] per class."""
        return np.concatenate([self.support, self.query, self.negative], axis=1).reshape(
            -1, *self.support.shape[2:])


@dataclass
class Prototype:
    class_id: str
    embedding: np.ndarray
    polarity: str = "POS"

    @classmethod
    def from_members(cls, class_id: str, members: np.ndarray, polarity: str = "POS") -> "Prototype":
        return cls(class_id, np.asarray(members, dtype=np.float64).mean(axis=0), polarity)


@dataclass
class TrainState:
    epoch: int = 0
    best_val_acc: float = -1.0
    epochs_without_improvement: int = 0
    seed: int = 0
    patience: int = 10
    best_val_loss: float = math.inf

    def update(self, val_acc: float, val_loss: float | None = None) -> bool:
        """Record an epoch's validation result; True when it is a new best.

        Equal accuracy counts as an improvement only when ``val_loss`` is
        given and lower than the best so far (accuracy saturates quickly on
        easy validation sets).
        """
        improved = val_acc > self.best_val_acc or (
            val_acc == self.best_val_acc and val_loss is not None and val_loss < self.best_val_loss)
        if improved:
            self.best_val_acc = val_acc
            if val_loss is not None:
                self.best_val_loss = val_loss
            self.epochs_without_improvement = 0
        else:
            self.epochs_without_improvement += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.epochs_without_improvement >= self.patience


@dataclass
class TrainConfig:
    n_way: int = 10
    k_shot: int = 5
    segment_s: float = 0.2
    episodes_per_epoch: int = 100
    max_epochs: int = 100
    patience: int = 10
    base_lr: float = 1e-3
    lr_decay: float = 0.65
    decay_every: int = 10
    momentum: float = 0.9
    seed: int = 0
    use_negatives: bool = True
    transductive: bool = True
    spec_augment: bool = False
    val_episodes: int = 4


# ---------------------------------------------------------------------------
# sampling


def _segment_from(feats: np.ndarray, a: int, b: int, start: int, length: int) -> np.ndarray:
    """Window of ``length`` frames from [a, b); shorter regions are tiled."""
    if b - a >= length:
        return feats[start:start + length]
    idx = a + (np.arange(length) + (start - a)) % (b - a)
    return feats[idx]


def _candidate_table(regions, attr: str, length: int):
    """(region index, lo, hi, n_starts) rows for every usable interval."""
    rows = []
    for ri, reg in enumerate(regions):
        for a, b in getattr(reg, attr):
            if b <= a:
                continue
            n_starts = (b - a - length + 1) if b - a >= length else (b - a)
            rows.append((ri, a, b, n_starts))
    return rows


def _draw_segments(cls: ClassData, attr: str, count: int, length: int, rng: np.random.Generator):
    rows = _candidate_table(cls.regions, attr, length)
    if not rows:
        return None, None
    weights = np.array([r[3] for r in rows], dtype=np.float64)
    total = int(weights.sum())
    # sample distinct start offsets when enough exist, otherwise with replacement
    flat = rng.choice(total, size=count, replace=total < count)
    cum = np.cumsum(weights).astype(int)
    segs, starts = [], []
    for f in flat:
        j = int(np.searchsorted(cum, f, side="right"))
        ri, a, b, _ = rows[j]
        off = int(f - (cum[j - 1] if j else 0))
        start = a + off
        segs.append(_segment_from(cls.regions[ri].features, a, b, start, length))
        starts.append((ri, start))
    return np.stack(segs), starts


def _fallback_negative(cls: ClassData) -> ClassData:
    """Use everything outside positives when a class has no negative regions."""
    from . import intervals as iv

    regs = []
    for r in cls.regions:
        n = r.features.shape[0]
        neg = [(int(a), int(b)) for a, b in iv.subtract([(0, n)], r.pos)]
        regs.append(type(r)(r.features, r.pos, neg, r.file_id))
    return ClassData(cls.name, regs, cls.source)


def spec_augment(seg: np.ndarray, rng: np.random.Generator, time_masks: int = 2, max_t: int = 10,
                 freq_masks: int = 2, max_f: int = 12) -> np.ndarray:
    out = seg.copy()
    T, F = out.shape
    for _ in range(time_masks):
        w = int(rng.integers(0, min(max_t, T) + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w] = 0.0
    for _ in range(freq_masks):
        w = int(rng.integers(0, min(max_f, F) + 1))
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0:f0 + w] = 0.0
    return out


def sample_episode(train_classes: Sequence[ClassData], eval_classes: Sequence[ClassData],
                   rng: np.random.Generator, n_way: int = 10, k_shot: int = 5,
                   segment_frames: int = 17, augment: bool = False) -> Episode:
    """Draw one episode; classes are chosen uniformly from the union of both pools."""
    pool = list(train_classes) + list(eval_classes)
    if len(pool) < n_way:
        raise SamplingError(f"need at least {n_way} classes, have {len(pool)}")
    chosen = sorted(rng.choice(len(pool), size=n_way, replace=False).tolist())
    sup, qry, neg, names, starts = [], [], [], [], []
    for ci in chosen:
        cls = pool[ci]
        pos, st = _draw_segments(cls, "pos", 2 * k_shot, segment_frames, rng)
        if pos is None:
            raise SamplingError(f"class {cls.name!r} has no positive audio")
        negs, _ = _draw_segments(cls, "neg", k_shot, segment_frames, rng)
        if negs is None:
            negs, _ = _draw_segments(_fallback_negative(cls), "neg", k_shot, segment_frames, rng)
        if negs is None:
            raise SamplingError(f"class {cls.name!r} has no negative audio")
        if augment:
            pos = np.stack([spec_augment(s, rng) for s in pos])
            negs = np.stack([spec_augment(s, rng) for s in negs])
        sup.append(pos[:k_shot])
        qry.append(pos[k_shot:])
        neg.append(negs)
        names.append(cls.name)
        starts.append(st)
    return Episode(names, np.stack(sup), np.stack(qry), np.stack(neg), starts)


# ---------------------------------------------------------------------------
# distances and loss


def distance_matrix(query: np.ndarray, support: np.ndarray) -> np.ndarray:
    query, support = np.atleast_2d(query), np.atleast_2d(support)
    if query.shape[1] != support.shape[1]:
        raise ShapeError(f"embedding dims differ: {query.shape[1]} vs {support.shape[1]}")
    d2 = ((query[:, None, :] - support[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2)


def loss_from_distances(D):
    """Cross-entropy of each query row against its own (diagonal) support column.

    ``D`` is (N, M) with M >= N; columns beyond N are distractors. Works on
    arrays and on autograd tensors.
    """
    if isinstance(D, ag.Tensor):
        ls = ag.log_softmax(ag.mul(D, -1.0), axis=1)
        n = D.shape[0]
        diag = ag.getitem(ls, (np.arange(n), np.arange(n)))
        return ag.mul(ag.tsum(diag), -1.0)
    D = np.asarray(D, dtype=np.float64)
    z = -D
    z = z - z.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.trace(ls[:, :D.shape[0]]))


def episode_loss_from_embeddings(emb, n_way: int, k_shot: int, use_negatives: bool = True):
    """Loss from an (N*3K, D) batch laid out as in :meth:`Episode.segments`."""
    e = ag.as_tensor(emb)
    e = ag.reshape(e, (n_way, 3 * k_shot, -1))
    sup = ag.tmean(ag.getitem(e, (slice(None), slice(0, k_shot))), axis=1)
    qry = ag.tmean(ag.getitem(e, (slice(None), slice(k_shot, 2 * k_shot))), axis=1)
    columns = sup
    if use_negatives:
        neg = ag.tmean(ag.getitem(e, (slice(None), slice(2 * k_shot, 3 * k_shot))), axis=1)
        columns = ag.concat([sup, neg], axis=0)
    D = ag.pairwise_distance(qry, columns)
    return loss_from_distances(D)


def episode_loss(episode: Episode, model: Embedder, use_negatives: bool = True, training: bool = True):
    emb = model.forward(episode.segments(), training=training)
    return episode_loss_from_embeddings(emb, episode.n_way, episode.k_shot, use_negatives)


def episode_accuracy(episode: Episode, model: Embedder, use_negatives: bool = True) -> tuple[int, int]:
    """(correct, total) nearest-prototype decisions for positive queries."""
    c, t, _ = episode_evaluation(episode, model, use_negatives)
    return c, t


def episode_evaluation(episode: Episode, model: Embedder, use_negatives: bool = True) -> tuple[int, int, float]:
    """(correct, total, loss) in eval mode from a single embedding pass."""
    flat = model.embed(episode.segments())
    with ag.no_grad():
        loss = episode_loss_from_embeddings(flat, episode.n_way, episode.k_shot, use_negatives).item()
    emb = flat.reshape(episode.n_way, 3 * episode.k_shot, -1)
    k = episode.k_shot
    sup, qry = emb[:, :k].mean(1), emb[:, k:2 * k].mean(1)
    cols = np.concatenate([sup, emb[:, 2 * k:].mean(1)]) if use_negatives else sup
    pred = distance_matrix(qry, cols).argmin(axis=1)
    return int((pred == np.arange(episode.n_way)).sum()), episode.n_way, loss


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    state: TrainState
    history: list[dict]


def segment_frames_for(segment_s: float, hop_s: float) -> int:
    return max(1, int(round(segment_s / hop_s)))


def train(config: TrainConfig, train_classes: Sequence[ClassData], eval_classes: Sequence[ClassData] = (),
          val_classes: Sequence[ClassData] | None = None, embedder_config: EmbedderConfig | None = None,
          out_dir: str = ".", hop_s: float = 256 / 22050, model: Embedder | None = None) -> TrainResult:
    """Run episodic training with early stopping; writes ``best.ckpt`` and ``train_log.csv``."""
    train_classes = list(train_classes)
    eval_classes = list(eval_classes) if config.transductive else []
    if not train_classes and not eval_classes:
        raise ConfigError("training needs at least one dataset with labeled classes")
    n_pool = len(train_classes) + len(eval_classes)
    n_way = min(config.n_way, n_pool)
    if n_way < 2:
        raise ConfigError(f"need at least 2 classes for episodic training, have {n_pool}")
    if val_classes is None:
        val_classes = list(eval_classes) if len(eval_classes) >= 2 else train_classes
    val_classes = list(val_classes)
    val_way = min(config.n_way, len(val_classes))
    seg = segment_frames_for(config.segment_s, hop_s)
    n_bins = (train_classes or eval_classes)[0].regions[0].features.shape[1]
    ecfg = embedder_config or EmbedderConfig(n_bins=n_bins)
    if ecfg.n_bins != n_bins:
        raise ConfigError(f"embedder expects {ecfg.n_bins} bins but features have {n_bins}")
    model = model or Embedder(ecfg, rng=substream(config.seed, "model-init"))
    opt = SGD(model.params, config.momentum, config.base_lr, config.lr_decay, config.decay_every)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "train_log.csv")

    val_rng = substream(config.seed, "validation")
    val_eps = [sample_episode(val_classes, [], val_rng, val_way, config.k_shot, seg)
               for _ in range(config.val_episodes)]

    state = TrainState(seed=config.seed, patience=config.patience)
    history = []
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_acc", "lr"])
        for epoch in range(config.max_epochs):
            state.epoch = epoch
            rng = substream(config.seed, "episode", epoch)
            losses = []
            lr = opt.lr(epoch)
            for _ in range(config.episodes_per_epoch):
                ep = sample_episode(train_classes, eval_classes, rng, n_way, config.k_shot, seg,
                                    augment=config.spec_augment)
                model.zero_grad()
                loss = episode_loss(ep, model, config.use_negatives, training=True)
                if not math.isfinite(loss.item()):
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}")
                losses.append(loss.item())
                loss.backward()
                lr = opt.step(model.gradients(), epoch)
            correct = total = 0
            val_loss = 0.0
            for vep in val_eps:
                c, t, vl = episode_evaluation(vep, model, config.use_negatives)
                correct, total, val_loss = correct + c, total + t, val_loss + vl
            val_acc = correct / total
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc, "lr": lr}
            history.append(row)
            writer.writerow([epoch, f"{row['loss']:.6f}", f"{val_acc:.6f}", repr(lr)])
            fh.flush()
            log.info("epoch %d loss %.4f val_acc %.4f lr %.6g", epoch, row["loss"], val_acc, lr)
            if state.update(val_acc, val_loss / len(val_eps)):
                save_checkpoint(model, ckpt_path, extra={"epoch": epoch, "val_acc": val_acc,
                                                         "train_config": asdict(config)})
            if state.should_stop:
                break
    return TrainResult(ckpt_path, log_path, state, history)


class PrototypicalEmbedder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains on class pools, ``transform`` embeds segments.

    ``fit(X, y=None, eval_classes=None)`` takes ``X`` as a list of
    :class:`ClassData`; ``transform`` takes a list of (frames, bins) arrays and
    returns an (n, embedding_dim) array.
    """

    def __init__(self, channels=(64, 128, 64), pool_time=4, pool_freq=8, leaky_slope=0.01,
                 n_way=10, k_shot=5, segment_s=0.2, episodes_per_epoch=100, max_epochs=100,
                 patience=10, base_lr=1e-3, lr_decay=0.65, decay_every=10, momentum=0.9,
                 use_negatives=True, transductive=True, spec_augment=False, val_episodes=4,
                 hop_s=256 / 22050, out_dir="train_out", random_state=0):
        self.channels = channels
        self.pool_time = pool_time
        self.pool_freq = pool_freq
        self.leaky_slope = leaky_slope
        self.n_way = n_way
        self.k_shot = k_shot
        self.segment_s = segment_s
        self.episodes_per_epoch = episodes_per_epoch
        self.max_epochs = max_epochs
        self.patience = patience
        self.base_lr = base_lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.momentum = momentum
        self.use_negatives = use_negatives
        self.transductive = transductive
        self.spec_augment = spec_augment
        self.val_episodes = val_episodes
        self.hop_s = hop_s
        self.out_dir = out_dir
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.n_way, self.k_shot, self.segment_s, self.episodes_per_epoch,
                           self.max_epochs, self.patience, self.base_lr, self.lr_decay,
                           self.decay_every, self.momentum, self.random_state, self.use_negatives,
                           self.transductive, self.spec_augment, self.val_episodes)

    def fit(self, X, y=None, eval_classes=None, val_classes=None):
        X = list(X)
        if not X and not eval_classes:
            raise ConfigError("fit needs at least one ClassData")
        n_bins = (X or list(eval_classes))[0].regions[0].features.shape[1]
        ecfg = EmbedderConfig(n_bins=n_bins, channels=tuple(self.channels), pool_time=self.pool_time,
                              pool_freq=self.pool_freq, leaky_slope=self.leaky_slope)
        self.result_ = train(self._train_config(), X, eval_classes or [], val_classes, ecfg,
                             self.out_dir, self.hop_s)
        self.embedder_ = load_checkpoint(self.result_.checkpoint)
        self.n_features_in_ = n_bins
        return self

    def transform(self, X):
        check_is_fitted(self, "embedder_")
        return self.embedder_.embed(list(X))
