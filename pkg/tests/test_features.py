import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guided_sed.errors import ConfigError, InputError, ValidationError
from guided_sed.features import (
    FeatureConfig,
    LogMelSpectrogram,
    Waveform,
    build_mel_filterbank,
    compute_log_mel,
    frame_count,
    hz_to_mel,
    load_features,
    mel_to_hz,
    read_wav,
    save_features,
    with_disabled_floor,
    write_wav,
)

SR = 16000
CFG = FeatureConfig()


class TestFrameCount:
    def test_ten_second_clip_gives_500_frames(self):
        assert frame_count(160000, CFG, SR) == 500

    def test_single_hop(self):
        assert frame_count(320, CFG, SR) == 1

    def test_empty_input(self):
        assert frame_count(0, CFG, SR) == 0

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            frame_count(-1, CFG, SR)

    def test_nonpositive_hop_rejected(self):
        with pytest.raises(ConfigError):
            frame_count(100, FeatureConfig(frame_length_ms=0.01, hop_fraction=0.5), 1000)

    @given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=1, max_value=10**6))
    @settings(max_examples=200)
    def test_monotone_in_n_samples(self, n, delta):
        assert frame_count(n + delta, CFG, SR) >= frame_count(n, CFG, SR)


class TestMelFilterbank:
    def test_rows_have_positive_sums(self):
        fb = build_mel_filterbank(CFG, 513, SR)
        assert fb.shape == (64, 513)
        assert np.all(fb.sum(axis=1) > 0)
        assert np.all(fb >= 0)

    def test_single_band_spans_range(self):
        cfg = FeatureConfig(n_mels=1, fmin=100.0, fmax=6000.0)
        fb = build_mel_filterbank(cfg, 513, SR)
        freqs = np.arange(513) * (SR / 2) / 512
        support = freqs[fb[0] > 0]
        assert support.min() > 100.0 - 20.0
        assert support.max() < 6000.0 + 20.0

    def test_center_frequencies_strictly_increasing(self):
        # Oracle: recompute the mel-scale breakpoints directly and compare
        # against each row's argmax location.
        fb = build_mel_filterbank(CFG, 513, SR)
        freqs = np.arange(513) * (SR / 2) / 512
        centers_est = freqs[np.argmax(fb, axis=1)]
        assert np.all(np.diff(centers_est) > 0)

        edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SR / 2), 64 + 2))
        expected_centers = edges[1:-1]
        bin_width = (SR / 2) / 512
        assert np.all(np.abs(centers_est - expected_centers) <= bin_width)

    def test_single_peak_per_row(self):
        fb = build_mel_filterbank(CFG, 513, SR)
        for row in fb:
            peak = row.argmax()
            assert np.all(np.diff(row[: peak + 1]) >= 0)
            assert np.all(np.diff(row[peak:]) <= 0)

    def test_too_many_bands_rejected(self):
        with pytest.raises(ConfigError):
            build_mel_filterbank(FeatureConfig(n_mels=400), 65, SR)


class TestComputeLogMel:
    def test_silence_hits_floor(self):
        w = Waveform(samples=np.zeros(160000), sample_rate=SR)
        spec = compute_log_mel(w, CFG)
        assert np.allclose(spec.values, math.log(CFG.log_floor))

    def test_ten_second_shape(self):
        rng = np.random.default_rng(0)
        w = Waveform(samples=0.1 * rng.standard_normal(160000), sample_rate=SR)
        spec = compute_log_mel(w, CFG)
        assert spec.values.shape == (500, 64)
        assert spec.frame_hop_seconds == pytest.approx(0.020)
        assert np.all(np.isfinite(spec.values))

    def test_sine_peaks_in_matching_band(self):
        # Oracle: for mel band j, the filterbank response at the sine's FFT
        # bin is maximal in row j, so the per-frame argmax must be j.
        fb = build_mel_filterbank(CFG, 513, SR)
        freqs = np.arange(513) * (SR / 2) / 512
        t = np.arange(160000) / SR
        for j in (10, 25, 40, 55):
            center = freqs[np.argmax(fb[j])]
            w = Waveform(samples=0.5 * np.sin(2 * np.pi * center * t), sample_rate=SR)
            spec = compute_log_mel(w, CFG)
            band_hits = np.argmax(spec.values, axis=1)
            # Edge frames see the reflected (phase-discontinuous) padding, so
            # the claim is asserted on interior frames.
            assert np.all(band_hits[1:-1] == j), f"band {j}"

    def test_log_domain_scale_covariance(self):
        rng = np.random.default_rng(7)
        samples = 0.05 * rng.standard_normal(160000)
        cfg = with_disabled_floor(CFG)
        base = compute_log_mel(Waveform(samples=samples, sample_rate=SR), cfg)
        scaled = compute_log_mel(Waveform(samples=4.0 * samples, sample_rate=SR), cfg)
        # Energy convention: scaling the waveform by c shifts log energies by 2*log(c).
        np.testing.assert_allclose(
            scaled.values - base.values, 2.0 * math.log(4.0), atol=1e-4
        )

    def test_rejects_nan(self):
        samples = np.zeros(16000)
        samples[5] = np.nan
        with pytest.raises(InputError):
            compute_log_mel(Waveform(samples=samples, sample_rate=SR), CFG)

    def test_rejects_empty(self):
        with pytest.raises(InputError):
            compute_log_mel(Waveform(samples=np.zeros(0), sample_rate=SR), CFG)


class TestWavIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        samples = np.round(rng.uniform(-0.8, 0.8, 16000) * 32767) / 32767
        path = tmp_path / "clip.wav"
        write_wav(path, Waveform(samples=samples, sample_rate=SR))
        back = read_wav(path)
        assert back.sample_rate == SR
        np.testing.assert_allclose(back.samples, samples * 32767 / 32768, atol=1.0 / 32768)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        values = rng.standard_normal((500, 64)).astype(np.float32)
        spec = LogMelSpectrogram(values=values, frame_hop_seconds=0.02)
        path = tmp_path / "clip.lmel"
        save_features(path, spec)
        back = load_features(path)
        assert back.frame_hop_seconds == 0.02
        np.testing.assert_array_equal(back.values, values)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.lmel"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(ValidationError):
            load_features(path)
