from decimal import Decimal, getcontext
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vocodetect.audio_io import AudioClip, synth_signal
from vocodetect.dsp import (
    CepstralExtractor,
    CepstralFeatures,
    FeatureConfig,
    FrameConfig,
    MelSpectrogram,
    Spectrogram,
    apply_filterbank,
    build_filterbank,
    cepstrum,
    compute_spectrogram,
    delta,
    extract_features,
    hz_to_mel,
    mel_to_hz,
    read_feature_cache,
    write_feature_cache,
)
from vocodetect.exceptions import ResolutionError, ShapeError, SignalRangeError, TooShortError

GOLDEN = Path(__file__).parent / "data" / "sine440_lfcc.wfc"


# ---------------------------------------------------------------- naive oracles

def mel_decimal(f):
    getcontext().prec = 40
    return float(Decimal(2595) * (Decimal(1) + Decimal(f) / Decimal(700)).log10())


def naive_dft_magnitude(frame, k_size):
    out = []
    for k in range(k_size // 2 + 1):
        acc = 0j
        for n, v in enumerate(frame):
            acc += v * np.exp(-2j * np.pi * k * n / k_size)
        out.append(abs(acc))
    return np.array(out)


def naive_triangles(edges, freqs):
    w = np.zeros((len(edges) - 2, len(freqs)))
    for s in range(len(edges) - 2):
        lo, mid, hi = edges[s], edges[s + 1], edges[s + 2]
        for k, f in enumerate(freqs):
            if lo < f <= mid:
                w[s, k] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                w[s, k] = (hi - f) / (hi - mid)
        w[s] /= w[s].max()
    return w


def naive_filter(mag, weights):
    t_n, k_n = mag.shape
    out = np.zeros((t_n, weights.shape[0]))
    for t in range(t_n):
        for s in range(weights.shape[0]):
            for k in range(k_n):
                out[t, s] += mag[t, k] * weights[s, k]
    return out


def naive_cepstrum(xmel, n_ceps, floor):
    t_n, s_n = xmel.shape
    out = np.zeros((t_n, n_ceps))
    for t in range(t_n):
        for r in range(n_ceps):
            for s in range(s_n):
                out[t, r] += np.log(max(xmel[t, s], floor)) * np.cos(np.pi * r * (s + 0.5) / s_n)
    return out


def naive_delta(c, n):
    t_n = c.shape[0]
    den = 2 * sum(k * k for k in range(1, n + 1))
    out = np.zeros_like(c)
    for t in range(t_n):
        for k in range(1, n + 1):
            ahead = c[min(t + k, t_n - 1)]
            behind = c[max(t - k, 0)]
            out[t] += k * (ahead - behind)
    return out / den


# ---------------------------------------------------------------- mel scale

class TestMel:
    def test_zero(self):
        assert hz_to_mel(0.0) == 0.0

    @pytest.mark.parametrize("f,expected", [(700, 781.17), (1000, 999.99)])
    def test_reference_points(self, f, expected):
        assert abs(hz_to_mel(f) - expected) <= 0.01
        assert abs(hz_to_mel(f) - mel_decimal(f)) < 1e-9

    def test_negative(self):
        with pytest.raises(SignalRangeError):
            hz_to_mel(-1.0)

    def test_monotone_and_inverse(self):
        f = np.linspace(0, 8000, 10001)
        m = hz_to_mel(f)
        assert np.all(np.diff(m) > 0)
        assert np.max(np.abs(mel_to_hz(m) - f)) < 1e-6


# ---------------------------------------------------------------- spectrogram

class TestSpectrogram:
    def test_frame_count(self):
        spec = compute_spectrogram(synth_signal("sine", 1.0, freq=300), FrameConfig())
        assert spec.values.shape == (99, 257)

    def test_bin_center_tone(self):
        rate, k_size = 16000, 512
        freq = 40 * rate / k_size
        clip = AudioClip(0.5 * np.sin(2 * np.pi * freq * np.arange(2048) / rate), rate)
        spec = compute_spectrogram(clip, FrameConfig(512 / rate, 256 / rate, "rectangular", k_size))
        for row in spec.values:
            assert np.argmax(row) == 40
            assert np.all(np.delete(row, 40) < 1e-10 * row[40])

    def test_zero_clip(self):
        spec = compute_spectrogram(synth_signal("silence", 0.1), FrameConfig())
        assert not spec.values.any()

    @pytest.mark.parametrize("window", ["hann", "hamming", "blackman", "rectangular"])
    def test_parseval(self, rng, window):
        cfg = FrameConfig(window=window, power=True)
        clip = AudioClip(rng.uniform(-1, 1, 1600), 16000)
        spec = compute_spectrogram(clip, cfg)
        n, hop, k = cfg.frame_samples(16000), cfg.hop_samples(16000), cfg.dft_size
        win = spec_window(window, n)
        # one-sided spectrum: DC and Nyquist once, every other bin twice
        weight = np.full(k // 2 + 1, 2.0)
        weight[0] = weight[-1] = 1.0
        for t, row in enumerate(spec.values):
            frame = clip.samples[t * hop:t * hop + n] * win
            energy = np.sum(frame ** 2)
            assert abs(row @ weight - k * energy) <= 1e-9 * k * energy

    def test_too_short(self):
        with pytest.raises(TooShortError):
            compute_spectrogram(AudioClip(np.zeros(100), 16000), FrameConfig())

    def test_matches_naive_dft(self, rng):
        clip = AudioClip(rng.uniform(-1, 1, 40), 1000)
        cfg = FrameConfig(0.016, 0.008, "hann", 16)
        spec = compute_spectrogram(clip, cfg)
        win = spec_window("hann", 16)
        for t in range(spec.values.shape[0]):
            frame = clip.samples[t * 8:t * 8 + 16] * win
            np.testing.assert_allclose(spec.values[t], naive_dft_magnitude(frame, 16), atol=1e-12)


def spec_window(name, n):
    i = np.arange(n)
    if name == "rectangular":
        return np.ones(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * i / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * i / n)
    return 0.42 - 0.5 * np.cos(2 * np.pi * i / n) + 0.08 * np.cos(4 * np.pi * i / n)


# ---------------------------------------------------------------- filterbank

class TestFilterbank:
    def test_single_linear_triangle(self):
        fb = build_filterbank("linear", 1, (0, 8000), 512, 16000)
        assert fb.weights.shape == (1, 257)
        assert np.argmax(fb.weights[0]) == 128          # 4000 Hz
        assert fb.weights[0, 128] == 1.0
        assert fb.weights[0, 0] == 0.0 and fb.weights[0, 256] == 0.0

    def test_mel_centers_equally_spaced(self):
        fb = build_filterbank("mel", 40, (0, 8000), 512, 16000)
        spacing = np.diff(hz_to_mel(fb.centers))
        assert np.max(np.abs(spacing - spacing[0])) < 1e-9

    def test_linear_small_matches_enumeration(self):
        fb = build_filterbank("linear", 4, (0, 8000), 16, 16000)
        edges = [0, 1600, 3200, 4800, 6400, 8000]
        freqs = np.arange(9) * 1000.0
        np.testing.assert_allclose(fb.weights, naive_triangles(edges, freqs), atol=1e-12)

    @pytest.mark.parametrize("scale", ["mel", "linear"])
    def test_rows_unimodal_unit_peak(self, scale):
        fb = build_filterbank(scale, 40, (0, 8000), 512, 16000)
        centers = []
        for row in fb.weights:
            assert row.max() == 1.0
            support = row[row > 0]
            peak = np.argmax(support)
            assert np.all(np.diff(support[:peak + 1]) >= 0) and np.all(np.diff(support[peak:]) <= 0)
            centers.append(np.argmax(row))
        assert np.all(np.diff(centers) >= 0)

    def test_resolution_error(self):
        with pytest.raises(ResolutionError):
            build_filterbank("linear", 40, (0, 8000), 16, 16000)

    def test_bad_band(self):
        with pytest.raises(SignalRangeError):
            build_filterbank("mel", 4, (0, 9000), 512, 16000)


class TestApplyFilterbank:
    def test_zero(self):
        fb = build_filterbank("mel", 4, (0, 8000), 64, 16000)
        spec = Spectrogram(np.zeros((3, 33)), np.arange(33), np.arange(3))
        assert not apply_filterbank(spec, fb).values.any()

    def test_impulse_picks_column(self):
        fb = build_filterbank("mel", 4, (0, 8000), 64, 16000)
        v = np.zeros((1, 33))
        v[0, 5] = 1.0
        out = apply_filterbank(Spectrogram(v, np.arange(33), np.zeros(1)), fb)
        np.testing.assert_array_equal(out.values[0], fb.weights[:, 5])

    def test_power_uses_magnitude(self, rng):
        fb = build_filterbank("linear", 2, (0, 8000), 16, 16000)
        mag = rng.uniform(0, 2, (3, 9))
        a = apply_filterbank(Spectrogram(mag, np.arange(9), np.arange(3)), fb)
        b = apply_filterbank(Spectrogram(mag ** 2, np.arange(9), np.arange(3), power=True), fb)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_random_matches_loops(self, rng):
        fb = build_filterbank("linear", 2, (0, 8000), 16, 16000)
        mag = rng.uniform(0, 2, (3, 9))
        out = apply_filterbank(Spectrogram(mag, np.arange(9), np.arange(3)), fb)
        np.testing.assert_allclose(out.values, naive_filter(mag, fb.weights), atol=1e-12)

    def test_shape_error(self):
        fb = build_filterbank("linear", 2, (0, 8000), 16, 16000)
        with pytest.raises(ShapeError):
            apply_filterbank(Spectrogram(np.ones((2, 10)), np.arange(10), np.arange(2)), fb)


# ---------------------------------------------------------------- cepstrum and deltas

class TestCepstrum:
    def test_constant_row(self):
        v, s = 3.7, 8
        c = cepstrum(MelSpectrogram(np.full((2, s), v)), 6)
        np.testing.assert_allclose(c[:, 0], s * np.log(v), atol=1e-10)
        assert np.max(np.abs(c[:, 1:])) < 1e-10

    def test_random_matches_loops(self, rng):
        x = rng.uniform(0.1, 5, (5, 4))
        np.testing.assert_allclose(cepstrum(x, 4), naive_cepstrum(x, 4, 1e-10), atol=1e-12)

    def test_zero_is_floored(self):
        x = np.array([[1.0, 0.0, 2.0, 3.0]])
        c = cepstrum(x, 3, log_floor=1e-6)
        assert np.all(np.isfinite(c))
        np.testing.assert_allclose(c, naive_cepstrum(x, 3, 1e-6), atol=1e-12)

    def test_c0_is_sum_of_logs(self, rng):
        x = rng.uniform(0.1, 5, (4, 6))
        np.testing.assert_allclose(cepstrum(x, 1)[:, 0], np.log(x).sum(axis=1), atol=1e-12)


class TestDelta:
    def test_constant(self):
        assert not delta(np.full((7, 3), 2.5), 2).any()

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_ramp(self, n):
        c = np.tile(np.arange(12.0)[:, None], (1, 2))
        d = delta(c, n)
        np.testing.assert_allclose(d[n:-n], 1.0, atol=1e-12)

    def test_random_matches_loops(self, rng):
        c = rng.normal(size=(5, 3))
        np.testing.assert_allclose(delta(c, 2), naive_delta(c, 2), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-100, 100)),
           arrays(np.float64, (6, 3), elements=st.floats(-100, 100)),
           st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 4))
    def test_linear(self, x, y, a, b, n):
        np.testing.assert_allclose(delta(a * x + b * y, n), a * delta(x, n) + b * delta(y, n),
                                   atol=1e-9)


# ---------------------------------------------------------------- full pipeline

class TestExtract:
    def test_default_shapes(self):
        feats = extract_features(synth_signal("sine", 1.0, freq=440))
        for block in (feats.base, feats.delta, feats.delta2):
            assert block.shape == (99, 20)
        assert feats.stacked().shape == (99, 60)

    def test_double_delta_is_delta_of_delta(self):
        feats = extract_features(synth_signal("chirp", 0.5))
        np.testing.assert_array_equal(feats.delta2, delta(feats.delta, 2))

    def test_mfcc_lfcc_differ_only_by_filterbank(self):
        clip = synth_signal("white_noise", 0.5, seed=4)
        cfg_l = FeatureConfig(kind="lfcc")
        cfg_m = FeatureConfig(kind="mfcc")
        spec = compute_spectrogram(clip, cfg_l.frame)
        for cfg, scale in ((cfg_l, "linear"), (cfg_m, "mel")):
            fb = build_filterbank(scale, 40, (0, 8000), 512, 16000)
            manual = cepstrum(apply_filterbank(spec, fb), 20)
            np.testing.assert_array_equal(extract_features(clip, cfg).base, manual)

    def test_deterministic(self):
        clip = synth_signal("white_noise", 0.5, seed=9)
        a, b = extract_features(clip), extract_features(clip)
        assert a.stacked().tobytes() == b.stacked().tobytes()

    def test_golden(self, tmp_path):
        feats = extract_features(synth_signal("sine", 1.0, freq=440))
        write_feature_cache(tmp_path / "g.wfc", feats)
        assert (tmp_path / "g.wfc").read_bytes() == GOLDEN.read_bytes()

    def test_rate_mismatch(self):
        with pytest.raises(ValueError):
            extract_features(synth_signal("sine", 1.0, 8000, freq=440))


class TestFeatureCache:
    def test_round_trip(self, tmp_path, rng):
        f = CepstralFeatures(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                             rng.normal(size=(4, 3)), 2, "mfcc")
        write_feature_cache(tmp_path / "x.wfc", f)
        g = read_feature_cache(tmp_path / "x.wfc")
        assert g.feature_kind == "mfcc" and g.delta_window == 2
        np.testing.assert_array_equal(g.stacked(), f.stacked())

    def test_layout(self, tmp_path):
        f = CepstralFeatures(np.ones((2, 1)), 2 * np.ones((2, 1)), 3 * np.ones((2, 1)), 1, "lfcc")
        write_feature_cache(tmp_path / "x.wfc", f)
        data = (tmp_path / "x.wfc").read_bytes()
        assert data[:4] == b"WFC1"
        assert np.frombuffer(data[4:20], "<u4").tolist() == [2, 1, 1, 1]
        assert np.frombuffer(data[20:], "<f8").tolist() == [1, 1, 2, 2, 3, 3]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.wfc").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ValueError):
            read_feature_cache(tmp_path / "x.wfc")


class TestExtractorEstimator:
    def test_get_params_and_transform(self):
        from sklearn.base import clone
        ext = CepstralExtractor(kind="mfcc", n_ceps=13)
        assert clone(ext).get_params()["n_ceps"] == 13
        out = ext.fit_transform([synth_signal("sine", 0.5, freq=300), synth_signal("sine", 1.0, freq=500)])
        assert [o.shape for o in out] == [(49, 39), (99, 39)]
