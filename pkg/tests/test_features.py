import numpy as np
import pytest
from scipy import fft as sfft
from sklearn.base import clone

from conftest import tone
from protosed.dataio import AudioClip
from protosed.exceptions import ConfigError, EmptyInputError
from protosed.features import (FeatureExtractor, FeatureKind, FeatureMatrix, PcenParams, StftConfig, compute_feature,
                               delta, hann_window, log_mel, mel_filterbank, mel_power, mfcc, pcen, stacked_input,
                               stft_power)

CFG = StftConfig()


def _fm(a, kind=FeatureKind.MEL):
    return FeatureMatrix(np.asarray(a, dtype=np.float64), kind, 0.01)


class TestStft:
    def test_tone_peak_bin(self):
        clip = AudioClip(tone(1000, 1.0, 22050), 22050)
        P = stft_power(clip, CFG)
        expected = round(1000 * CFG.n_fft / CFG.sample_rate)
        assert np.all(P[3:-3].argmax(axis=1) == expected)

    def test_frame_count(self):
        for n in (1024, 5000, 22050):
            assert stft_power(np.ones(n) * 0.1, CFG).shape == (1 + n // 256, 513)

    def test_zero_clip(self):
        assert not stft_power(np.zeros(4096), CFG).any()

    def test_short_clip(self):
        with pytest.raises(EmptyInputError):
            stft_power(np.zeros(100), CFG)

    def test_parseval_per_frame(self, rng):
        x = rng.standard_normal(8192)
        P = stft_power(x, CFG)
        xp = np.pad(x, 512, mode="reflect")
        w = hann_window(1024)
        for t in (0, 7, 20, P.shape[0] - 1):
            seg = xp[t * 256:t * 256 + 1024] * w
            full = P[t, 0] + 2 * P[t, 1:-1].sum() + P[t, -1]
            assert abs(full / 1024 - np.sum(seg ** 2)) / np.sum(seg ** 2) < 1e-6

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            StftConfig(hop_length=2048)
        with pytest.raises(ConfigError):
            StftConfig(n_mels=600)


class TestMelFilterbank:
    fb = mel_filterbank(CFG)

    def test_one_contiguous_support_per_row(self):
        for row in self.fb:
            nz = np.flatnonzero(row > 0)
            assert nz.size and np.all(np.diff(nz) == 1)

    def test_peaks_increasing_and_nonnegative(self):
        assert np.all(self.fb >= 0)
        assert np.all(np.diff(self.fb.argmax(axis=1)) >= 0)
        centers = (self.fb * np.arange(self.fb.shape[1])).sum(1) / self.fb.sum(1)
        assert np.all(np.diff(centers) > 0)

    def test_flat_spectrum_covered(self):
        assert np.all(self.fb @ np.ones(self.fb.shape[1]) > 0)

    def test_adjacent_overlap(self):
        assert all(np.any((a > 0) & (b > 0)) for a, b in zip(self.fb[:-1], self.fb[1:]))

    def test_too_many_mels(self):
        with pytest.raises(ConfigError):
            mel_filterbank(StftConfig(n_fft=256, win_length=256, hop_length=64, n_mels=128))


class TestPcen:
    def test_constant_signal_closed_form(self):
        p = PcenParams(alpha=1.0, eps=1e-12)
        out = pcen(_fm(np.full((200, 4), 3.0)), p).data
        np.testing.assert_allclose(out, (1 + p.delta) ** p.r - p.delta ** p.r, rtol=1e-6)

    def test_zero_input(self):
        assert np.all(pcen(_fm(np.zeros((50, 3)))).data == 0)

    def test_gain_normalization(self, rng):
        E = rng.uniform(0.5, 2.0, (300, 8))
        p = PcenParams(alpha=1.0)
        a, b = pcen(_fm(E), p).data[50:], pcen(_fm(10 * E), p).data[50:]
        assert np.max(np.abs(a - b) / np.abs(a)) < 0.01

    def test_nonnegative_output_and_bad_input(self, rng):
        assert pcen(_fm(rng.uniform(0, 5, (40, 6)))).data.min() >= 0
        with pytest.raises(ValueError):
            pcen(_fm([[np.nan]]))

    def test_smoother_recursion(self, rng):
        E = rng.uniform(0, 1, (30, 2))
        s = 0.025
        M = np.empty_like(E)
        M[0] = E[0]
        for t in range(1, len(E)):
            M[t] = (1 - s) * M[t - 1] + s * E[t]
        prm = PcenParams()
        ref = (E / (prm.eps + M) ** prm.alpha + prm.delta) ** prm.r - prm.delta ** prm.r
        np.testing.assert_allclose(pcen(_fm(E)).data, ref, rtol=1e-12)


class TestMfcc:
    def test_constant_frame_only_c0(self):
        c = mfcc(_fm(np.full((3, 128), 2.5), FeatureKind.LOGMEL), 20).data
        assert np.all(np.abs(c[:, 1:]) < 1e-12) and np.all(np.abs(c[:, 0]) > 1)

    def test_orthonormal_round_trip_and_energy(self, rng):
        x = rng.standard_normal((10, 128))
        c = mfcc(_fm(x, FeatureKind.LOGMEL), 128).data
        np.testing.assert_allclose(sfft.idct(c, type=2, norm="ortho", axis=1), x, atol=1e-9)
        np.testing.assert_allclose((c ** 2).sum(1), (x ** 2).sum(1), rtol=1e-12)

    def test_too_many_coefficients(self):
        with pytest.raises(ConfigError):
            mfcc(_fm(np.zeros((2, 16))), 17)


class TestDelta:
    def test_constant(self):
        assert not delta(_fm(np.full((20, 3), 4.0))).data.any()

    @pytest.mark.parametrize("width", [3, 5, 9])
    def test_ramp_interior_is_one(self, width):
        x = np.tile(np.arange(40.0)[:, None], (1, 3))
        W = width // 2
        np.testing.assert_allclose(delta(_fm(x), width).data[W:-W], 1.0, atol=1e-12)

    def test_sign_flip(self, rng):
        x = rng.standard_normal((25, 4))
        np.testing.assert_array_equal(delta(_fm(-x)).data, -delta(_fm(x)).data)

    def test_even_width(self):
        with pytest.raises(ConfigError):
            delta(_fm(np.zeros((5, 2))), 4)


class TestStacked:
    clip = AudioClip(0.3 * tone(800, 2.0, 22050) + 0.01 * np.random.default_rng(0).standard_normal(44100), 22050)

    def test_shape_and_normalization(self):
        fm = stacked_input(self.clip)
        assert fm.bins == 128 + 32 and fm.kind is FeatureKind.STACKED
        for block in (fm.data[:, :128], fm.data[:, 128:]):
            assert abs(block.mean()) < 1e-6 and abs(block.std() - 1) < 1e-6

    def test_return_mel_frames_match(self):
        sf = stacked_input(self.clip, return_mel=True)
        assert sf.stacked.n_frames == sf.mel.n_frames

    def test_pure(self):
        np.testing.assert_array_equal(stacked_input(self.clip).data, stacked_input(self.clip).data)

    def test_one_hop_shift(self):
        x = self.clip.samples
        a = compute_feature(AudioClip(x[256:], 22050), "pcen").data
        b = compute_feature(AudioClip(x, 22050), "mel").data
        a_mel = compute_feature(AudioClip(x[256:], 22050), "mel").data
        n = a_mel.shape[0]
        np.testing.assert_allclose(a_mel[5:n - 5], b[6:n - 4], rtol=1e-9, atol=1e-12)
        assert a.shape[0] == a_mel.shape[0]

    def test_every_kind(self):
        for kind in FeatureKind:
            fm = compute_feature(self.clip, kind)
            assert fm.kind is kind and np.all(np.isfinite(fm.data))


def test_feature_matrix_validates():
    with pytest.raises(ValueError):
        _fm([[np.inf]])


class TestFeatureExtractor:
    def test_sklearn_api(self):
        ex = FeatureExtractor(n_mfcc=16)
        assert clone(ex).get_params()["n_mfcc"] == 16
        out = ex.fit().transform([TestStacked.clip, TestStacked.clip.samples])
        assert len(out) == 2 and out[0].shape[1] == 144
        np.testing.assert_array_equal(out[0], out[1])

    def test_rate_mismatch(self):
        with pytest.raises(ConfigError):
            FeatureExtractor(sample_rate=16000).transform([TestStacked.clip])
