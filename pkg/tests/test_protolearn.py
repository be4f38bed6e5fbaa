import math

import numpy as np
import pytest
from sklearn.base import clone

from protosed.datasets import ClassData, Region, class_regions_from_file, labeled_negative_intervals
from protosed.dataio import NEG, POS, UNK, AnnotationEvent
from protosed.embednet import Embedder, EmbedderConfig, SGD, learning_rate
from protosed.exceptions import ConfigError, SamplingError, ShapeError
from protosed.protolearn import (Episode, Prototype, PrototypicalEmbedder, TrainConfig, TrainState, distance_matrix,
                                 episode_loss, episode_loss_from_embeddings, loss_from_distances, sample_episode,
                                 train)
from protosed.rng import substream

F = 6


def make_class(name, rng, n_frames=200, pos=((20, 60), (100, 150)), neg=None):
    feats = rng.standard_normal((n_frames, F))
    neg = [(0, 20), (60, 100), (150, n_frames)] if neg is None else neg
    return ClassData(name, [Region(feats, list(pos), list(neg), name)])


def pools(n, seed=0, prefix="c"):
    rng = np.random.default_rng(seed)
    return [make_class(f"{prefix}{i}", rng) for i in range(n)]


class TestSampleEpisode:
    def test_counts(self):
        ep = sample_episode(pools(12), [], np.random.default_rng(0), 10, 5, 8)
        assert ep.support.shape == ep.query.shape == ep.negative.shape == (10, 5, 8, F)
        assert ep.segments().shape[0] == 150
        assert 10 * 10 == ep.support.shape[0] * 5 + ep.query.shape[0] * 5

    def test_full_pool_every_class_chosen(self):
        for s in range(3):
            ep = sample_episode(pools(6), pools(4, 1, "e"), np.random.default_rng(s), 10, 5, 8)
            assert len(set(ep.class_names)) == 10

    def test_distinct_starts_within_class(self):
        ep = sample_episode(pools(3), [], np.random.default_rng(1), 3, 5, 8)
        for st in ep.starts:
            assert len(set(st)) == len(st)

    def test_seeded_determinism(self):
        a = sample_episode(pools(12), [], substream(7, "episode", 0), 10, 5, 8)
        b = sample_episode(pools(12), [], substream(7, "episode", 0), 10, 5, 8)
        np.testing.assert_array_equal(a.segments(), b.segments())

    def test_positive_segments_come_from_positive_regions(self):
        pool = pools(2)
        ep = sample_episode(pool, [], np.random.default_rng(3), 2, 5, 8)
        for ci, name in enumerate(ep.class_names):
            reg = next(c for c in pool if c.name == name).regions[0]
            for ri, start in ep.starts[ci]:
                assert any(a <= start and start + 8 <= b for a, b in reg.pos)

    def test_short_region_is_tiled(self, rng):
        cls = make_class("short", rng, pos=((10, 13),))
        ep = sample_episode([cls, make_class("b", rng)], [], np.random.default_rng(0), 2, 2, 8)
        seg = ep.support[ep.class_names.index("short"), 0]
        feats = cls.regions[0].features
        assert all(any(np.array_equal(row, feats[j]) for j in range(10, 13)) for row in seg)

    def test_errors(self, rng):
        empty = ClassData("empty", [Region(rng.standard_normal((50, F)), [], [(0, 50)])])
        with pytest.raises(SamplingError, match="empty"):
            sample_episode([empty, make_class("b", rng)], [], np.random.default_rng(0), 2, 2, 8)
        with pytest.raises(SamplingError):
            sample_episode(pools(3), [], np.random.default_rng(0), 5, 2, 8)

    def test_missing_negatives_fall_back_to_outside_positives(self, rng):
        cls = make_class("noneg", rng, neg=[])
        ep = sample_episode([cls, make_class("b", rng)], [], np.random.default_rng(0), 2, 2, 8)
        assert ep.negative.shape == (2, 2, 8, F)


class TestDistancesAndLoss:
    def test_distance_examples(self, rng):
        assert distance_matrix(np.ones((1, 3)), np.ones((1, 3)))[0, 0] == 0
        assert distance_matrix(np.eye(2)[:1], np.eye(2)[1:])[0, 0] == pytest.approx(math.sqrt(2))
        q, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        D = distance_matrix(q, s)
        oracle = [[math.sqrt(sum((q[i, k] - s[j, k]) ** 2 for k in range(4))) for j in range(3)] for i in range(3)]
        np.testing.assert_allclose(D, oracle, atol=1e-9)
        np.testing.assert_allclose(distance_matrix(q, q), distance_matrix(q, q).T)
        with pytest.raises(ShapeError):
            distance_matrix(q, s[:, :3])

    def test_two_class_near_closed_form(self):
        D = np.array([[0.0, 10.0, 10.0, 10.0], [10.0, 0.0, 10.0, 10.0]])
        assert loss_from_distances(D) == pytest.approx(2 * math.log(1 + 3 * math.exp(-10)), rel=1e-12)

    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_uniform_distances(self, n):
        assert abs(loss_from_distances(np.full((n, 2 * n), 1.7)) - n * math.log(2 * n)) < 1e-9

    def test_removing_near_negatives_lowers_loss(self, rng):
        D = rng.uniform(2, 3, (4, 8))
        D[:, 4:] = 0.5
        assert loss_from_distances(D[:, :4]) < loss_from_distances(D)

    def test_coincident_prototypes(self):
        emb = np.ones((3 * 3 * 2, 7))
        assert episode_loss_from_embeddings(emb, 3, 2).item() == pytest.approx(3 * math.log(6), abs=1e-9)

    def test_permutation_equivariance_and_nonnegativity(self, rng):
        n, k = 4, 3
        emb = rng.standard_normal((n, 3 * k, 5))
        perm = rng.permutation(n)
        a = episode_loss_from_embeddings(emb.reshape(-1, 5), n, k).item()
        b = episode_loss_from_embeddings(emb[perm].reshape(-1, 5), n, k).item()
        assert abs(a - b) < 1e-9 and a >= 0

    def test_without_negatives_uses_n_columns(self, rng):
        emb = rng.standard_normal((2 * 3 * 2, 4))
        assert episode_loss_from_embeddings(emb, 2, 2, use_negatives=False).item() >= 0

    def test_prototype_of_copies(self, rng):
        v = rng.standard_normal(2048)
        np.testing.assert_allclose(Prototype.from_members("c", np.tile(v, (5, 1))).embedding, v, rtol=0, atol=1e-12)
        m = rng.standard_normal((5, 16))
        assert np.max(np.abs(Prototype.from_members("c", m).embedding - m.mean(0))) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_one_step_descends(seed):
    cfg = EmbedderConfig(n_bins=F, channels=(2, 2, 2), pool_time=2, pool_freq=2, dtype="float64")
    m = Embedder(cfg, seed=seed)
    ep = sample_episode(pools(3, seed), [], np.random.default_rng(seed), 3, 2, 8)
    before = episode_loss(ep, m).item()
    m.zero_grad()
    episode_loss(ep, m).backward()
    SGD(m.params, base_lr=1e-3).step(m.gradients(), 0)
    assert episode_loss(ep, m).item() < before


class TestTrainState:
    def test_counter_and_stop(self):
        s = TrainState(patience=3)
        assert s.update(0.5)
        assert not s.update(0.5) and not s.update(0.4)
        assert s.update(0.6) and s.epochs_without_improvement == 0
        for _ in range(3):
            s.update(0.1)
        assert s.should_stop

    def test_loss_breaks_ties(self):
        s = TrainState()
        s.update(1.0, 2.0)
        assert s.update(1.0, 1.5) and not s.update(1.0, 1.7)


def _tiny_cfg(**kw):
    base = dict(n_way=3, k_shot=2, episodes_per_epoch=2, max_epochs=3, val_episodes=1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


TINY_NET = EmbedderConfig(n_bins=F, channels=(2, 2, 2), pool_time=2, pool_freq=2)


class TestTrain:
    def test_log_and_determinism(self, tmp_path):
        r1 = train(_tiny_cfg(), pools(4), [], embedder_config=TINY_NET, out_dir=tmp_path / "a", hop_s=0.0116)
        r2 = train(_tiny_cfg(), pools(4), [], embedder_config=TINY_NET, out_dir=tmp_path / "b", hop_s=0.0116)
        text = open(r1.log_path).read()
        assert text == open(r2.log_path).read()
        rows = text.strip().splitlines()
        assert rows[0] == "epoch,loss,val_acc,lr" and len(rows) == 4
        for row in rows[1:]:
            epoch, _, _, lr = row.split(",")
            assert float(lr) == learning_rate(int(epoch))
        assert open(r1.checkpoint, "rb").read() == open(r2.checkpoint, "rb").read()

    def test_lr_column_across_decay(self, tmp_path):
        r = train(_tiny_cfg(max_epochs=12, episodes_per_epoch=1, patience=50), pools(3), [],
                  embedder_config=TINY_NET, out_dir=tmp_path, hop_s=0.0116)
        assert [h["lr"] for h in r.history] == [learning_rate(e) for e in range(12)]

    def test_early_stopping(self, tmp_path):
        r = train(_tiny_cfg(max_epochs=40, episodes_per_epoch=1, patience=2), pools(3), [],
                  embedder_config=TINY_NET, out_dir=tmp_path, hop_s=0.0116)
        assert r.state.should_stop and len(r.history) < 40

    def test_transductive_pool(self, tmp_path):
        r = train(_tiny_cfg(max_epochs=1), pools(2), pools(2, 9, "e"), embedder_config=TINY_NET, out_dir=tmp_path,
                  hop_s=0.0116)
        assert len(r.history) == 1

    def test_empty(self, tmp_path):
        with pytest.raises(ConfigError):
            train(_tiny_cfg(), [], [], out_dir=tmp_path)


def test_estimator_fit_transform(tmp_path):
    est = PrototypicalEmbedder(channels=(2, 2, 2), pool_time=2, pool_freq=2, n_way=3, k_shot=2,
                               episodes_per_epoch=1, max_epochs=1, val_episodes=1, hop_s=0.0116,
                               out_dir=str(tmp_path))
    assert clone(est).get_params()["n_way"] == 3
    emb = est.fit(pools(3)).transform([np.zeros((10, F)), np.ones((12, F))])
    assert emb.shape == (2, 8)


class TestDatasets:
    def test_labeled_negatives_are_gaps(self):
        evs = [AnnotationEvent("f", 1, 2), AnnotationEvent("f", 3, 4), AnnotationEvent("f", 2.2, 2.5, UNK)]
        assert labeled_negative_intervals(evs, 4) == [(0.0, 1), (2, 2.2), (2.5, 3)]

    def test_explicit_negatives_win(self):
        evs = [AnnotationEvent("f", 1, 2), AnnotationEvent("f", 0, 3, NEG)]
        assert labeled_negative_intervals(evs, 3) == [(0, 1), (2, 3)]

    def test_class_regions(self, rng):
        evs = [AnnotationEvent("f", 0.1, 0.2, POS, "A"), AnnotationEvent("f", 0.5, 0.6, POS, "B"),
               AnnotationEvent("f", 0.3, 0.4, NEG, "B")]
        regs = class_regions_from_file(rng.standard_normal((100, F)), 0.01, evs, 1.0, "f")
        assert regs["A"].pos == [(10, 20)] and (50, 60) not in regs["A"].neg
        assert regs["B"].neg == [(30, 40)]
