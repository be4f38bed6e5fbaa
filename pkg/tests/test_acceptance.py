"""Acceptance suite: one PASS/FAIL line per criterion, asserted at the stated tolerances."""
import math
import os
import time

import numpy as np
import pytest
from scipy import fft as sfft

from helpers import (BENCH_SEEDS, brute_force_matching, frame_truth, random_events, run_benchmark,
                     tone_over_silence)
from protosed import intervals as iv
from protosed.detect import adaptive_window
from protosed.embednet import SGD, Embedder, EmbedderConfig, learning_rate
from protosed.features import FeatureKind, FeatureMatrix, PcenParams, StftConfig, delta, hann_window, mel_power, \
    mfcc, pcen, stft_power
from protosed.negmine import frequency_bin_weights, search_negative_segments, sisnr
from protosed.postproc import negative_mining_window
from protosed.protolearn import episode_loss, episode_loss_from_embeddings, sample_episode
from protosed.score import matchable, max_matching

HOP = 256 / 22050


def test_1_gradient_correctness(criterion):
    t0 = time.time()
    cfg = EmbedderConfig(n_bins=8, channels=(2, 2, 2), pool_time=2, pool_freq=2, dtype="float64")
    worst, h = 0.0, 1e-5
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = Embedder(cfg, seed=seed)
        assert m.n_params <= 5000
        x = rng.standard_normal((2 * 3 * 2, 8, 8))

        def loss():
            return episode_loss_from_embeddings(m.forward(x, training=True), 2, 2)

        m.zero_grad()
        loss().backward()
        grads = m.gradients()
        names = list(m.params)
        for _ in range(20):
            k = names[int(rng.integers(len(names)))]
            p = m.params[k]
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            lp = loss().item()
            p.data[idx] = old - h
            lm = loss().item()
            p.data[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), 1e-4))
    dt = time.time() - t0
    ok = criterion(1, "finite-difference gradients", worst < 1e-2 and dt < 30,
                   f"worst rel err {worst:.2e}, {dt:.1f} s, {m.n_params} params")
    assert ok


def test_2_feature_oracles(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    cfg = StftConfig()
    x = rng.standard_normal(22050)
    P = stft_power(x, cfg)
    xp, w = np.pad(x, 512, mode="reflect"), hann_window(1024)
    parseval = 0.0
    for t in range(P.shape[0]):
        seg = xp[t * 256:t * 256 + 1024] * w
        full = (P[t, 0] + 2 * P[t, 1:-1].sum() + P[t, -1]) / 1024
        parseval = max(parseval, abs(full - np.sum(seg ** 2)) / np.sum(seg ** 2))
    p = PcenParams(alpha=1.0, eps=1e-12)
    const = pcen(FeatureMatrix(np.full((300, 8), 2.0), FeatureKind.MEL, HOP), p).data
    pcen_err = np.max(np.abs(const / ((1 + p.delta) ** p.r - p.delta ** p.r) - 1))
    lm = rng.standard_normal((20, 128))
    c = mfcc(FeatureMatrix(lm, FeatureKind.LOGMEL, HOP), 128).data
    dct_err = np.max(np.abs(sfft.idct(c, type=2, norm="ortho", axis=1) - lm))
    ramp = np.tile(np.arange(50.0)[:, None], (1, 4))
    d = delta(FeatureMatrix(ramp, FeatureKind.MFCC, HOP), 9).data[4:-4]
    delta_err = np.max(np.abs(d - 1))
    dt = time.time() - t0
    ok = parseval < 1e-6 and pcen_err < 1e-6 and dct_err < 1e-9 and delta_err < 1e-12 and dt < 10
    criterion(2, "feature oracles", ok, f"parseval {parseval:.1e}, pcen {pcen_err:.1e}, dct {dct_err:.1e}, "
                                        f"delta {delta_err:.1e}, {dt:.1f} s")
    assert ok


def test_3_sisnr(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    scale_err, oracle_err = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 128))
        est, ref = rng.standard_normal(n), rng.standard_normal(n)
        alpha = float(np.exp(rng.uniform(-5, 5)))
        scale_err = max(scale_err, abs(sisnr(alpha * est, ref) - sisnr(est, ref)))
        e, r = est - est.mean(), ref - ref.mean()
        tgt = (e @ r) / (r @ r) * r
        expect = float(np.clip(10 * math.log10((tgt @ tgt) / ((e - tgt) @ (e - tgt))), -60, 60))
        oracle_err = max(oracle_err, abs(sisnr(est, ref) - expect))
    ortho = sisnr(np.array([1.0, -1.0, 0, 0]), np.array([0, 0, 1.0, -1.0]))
    dt = time.time() - t0
    ok = scale_err < 1e-9 and oracle_err < 1e-9 and ortho == -60 and dt < 5
    criterion(3, "SISNR properties", ok, f"scale {scale_err:.1e} dB, oracle {oracle_err:.1e} dB, "
                                         f"orthogonal {ortho} dB, {dt:.1f} s")
    assert ok


def test_4_negative_mining(criterion):
    t0 = time.time()
    worst_cover, worst_leak = 1.0, 0.0
    for seed in range(20):
        x, events, _ = tone_over_silence(seed)
        mel = mel_power(x, StftConfig()).data
        pos, silent = frame_truth(events, mel.shape[0])
        got = iv.frame_mask(search_negative_segments(mel, pos, frequency_bin_weights(mel, pos)), mel.shape[0])
        worst_cover = min(worst_cover, got[silent].mean())
        worst_leak = max(worst_leak, got[iv.frame_mask(pos, mel.shape[0])].mean())
    dt = time.time() - t0
    ok = worst_cover >= 0.95 and worst_leak == 0 and dt < 60
    criterion(4, "negative mining on tone-over-silence", ok,
              f"min silent coverage {100 * worst_cover:.1f}%, max positive coverage {100 * worst_leak:.1f}%, "
              f"{dt:.1f} s")
    assert ok


def test_5_loss_sanity(criterion):
    t0 = time.time()
    uniform = max(abs(episode_loss_from_embeddings(np.ones((n * 3 * 5, 16)), n, 5).item() - n * math.log(2 * n))
                  for n in (2, 5, 10))
    from protosed.datasets import ClassData, Region
    descents = 0
    net = EmbedderConfig(n_bins=6, channels=(2, 2, 2), pool_time=2, pool_freq=2, dtype="float64")
    for seed in range(5):
        rng = np.random.default_rng(seed)
        pool = [ClassData(f"c{i}", [Region(rng.standard_normal((120, 6)) + i, [(10, 60)], [(60, 120)])])
                for i in range(3)]
        ep = sample_episode(pool, [], rng, 3, 2, 8)
        m = Embedder(net, seed=seed)
        before = episode_loss(ep, m).item()
        m.zero_grad()
        episode_loss(ep, m).backward()
        SGD(m.params, base_lr=1e-3).step(m.gradients(), 0)
        descents += episode_loss(ep, m).item() < before
    dt = time.time() - t0
    ok = uniform < 1e-6 and descents == 5 and dt < 60
    criterion(5, "loss sanity", ok, f"uniform err {uniform:.1e}, descent {descents}/5, {dt:.1f} s")
    assert ok


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    work = str(tmp_path_factory.mktemp("bench"))
    t0 = time.time()
    runs = [run_benchmark(s, work) for s in BENCH_SEEDS]
    return runs, time.time() - t0


@pytest.mark.slow
def test_6_desk_benchmark(criterion, benchmark):
    runs, dt = benchmark
    on = float(np.median([r["on"] for r in runs]))
    off = float(np.median([r["off"] for r in runs]))
    per_seed = ", ".join(f"s{r['seed']} {r['on']:.1f}/{r['off']:.1f}" for r in runs)
    ok = on >= 80 and on > off and dt < 15 * 60 and all(r["epochs"] <= 30 for r in runs)
    criterion(6, "synthetic benchmark", ok, f"median F on {on:.2f} / off {off:.2f}; {per_seed}; {dt / 60:.1f} min")
    assert ok


def test_7_scorer_vs_brute_force(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(200):
        p = random_events(rng, int(rng.integers(0, 9)), float(rng.uniform(4, 12)))
        r = random_events(rng, int(rng.integers(0, 9)), float(rng.uniform(4, 12)))
        M = matchable(p, r, 0.3)
        agree += max_matching(M) == brute_force_matching(M)
    dt = time.time() - t0
    ok = agree == 200 and dt < 60
    criterion(7, "maximum matching vs brute force", ok, f"{agree}/200 exact, {dt:.1f} s")
    assert ok


def test_8_tables_and_schedule(criterion):
    query_buckets = [(0.05, 8 * HOP), (0.1, 8 * HOP), (0.25, 0.25), (0.4, 0.4), (0.6, 0.3), (0.8, 0.4),
              (2.0, 0.5), (3.0, 0.75), (6.0, 0.75)]
    mining_buckets = [(5, 8), (8, 8), (50, 25), (100, 50), (150, 100)]
    t1 = all(adaptive_window(t, HOP) == w for t, w in query_buckets)
    t3 = all(negative_mining_window(t) == w for t, w in mining_buckets)
    lr = [learning_rate(e) for e in (0, 10, 25)]
    ok = t1 and t3 and lr == [0.001, 0.00065, 0.0004225]
    criterion(8, "window tables and lr schedule", ok, f"query windows {t1}, mining windows {t3}, lr {lr}")
    assert ok


DCASE = os.environ.get("PROTOSED_DCASE_VAL")


@pytest.mark.slow
def test_9_dcase_ablation(criterion, tmp_path):
    if not DCASE:
        criterion(9, "DCASE ablation", None, "optional; PROTOSED_DCASE_VAL not set")
        pytest.skip("set PROTOSED_DCASE_VAL (and PROTOSED_DCASE_TRAIN) to run")
    from protosed.config import RunConfig
    from protosed.datasets import FeatureCache
    from protosed.embednet.checkpoint import load_checkpoint
    from protosed.pipeline import detect_root, eval_pairs, score_predictions, subset_of, train_from_roots
    from protosed.score import report

    base = {"data.eval_root": DCASE, "data.train_root": os.environ.get("PROTOSED_DCASE_TRAIN", "")}
    cfg_file = os.environ.get("PROTOSED_DCASE_CONFIG")
    cfg0 = RunConfig.from_file(cfg_file) if cfg_file else RunConfig()
    pairs = eval_pairs(DCASE)
    subsets = [subset_of(c, DCASE) for _, c in pairs]
    scores, tables = {}, []
    for label, neg in (("negatives", True), ("no-negatives", False)):
        cfg = cfg0.with_overrides(**base, **{"train.use_negatives": neg, "train.transductive": neg})
        cache = FeatureCache(cfg.extractor())
        model = load_checkpoint(train_from_roots(cfg, str(tmp_path / label), cache).checkpoint)
        dets = detect_root(DCASE, model, cfg, cache)
        reps = score_predictions([e for d in dets for e in d.events], [c for _, c in pairs],
                                 cfg["score.k_shot"], cfg["score.min_iou"], subsets)
        overall, table = report(reps, cfg["score.overall"], label)
        scores[label] = overall.f_measure
        tables.append(table)
    print("\n\n".join(tables))
    ok = scores["negatives"] > scores["no-negatives"]
    criterion(9, "DCASE ablation", ok, f"F {scores['negatives']:.2f} vs {scores['no-negatives']:.2f}")
    assert ok
