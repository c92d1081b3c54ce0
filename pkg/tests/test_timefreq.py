import numpy as np
import pytest

from hemotriage.timefreq import (
    Spectrogram, TFFeatures, default_log_floor, featurize_segment, frame_starts,
    instantaneous_frequency, log_spectrogram, spectral_entropy, spectrogram,
)
from hemotriage.waveform import PPG, Segment, pad_to_radix2

from oracles import direct_onesided_power


def tone_segment(freq_hz, fs=1000.0, duration_s=15.0, amplitude=1.0):
    t = np.arange(int(duration_s * fs)) / fs
    return Segment(samples=amplitude * np.sin(2 * np.pi * freq_hz * t),
                   sample_rate_hz=fs, channel=PPG, subject_id="s", trial_id="t",
                   start_time_s=0.0)


def flat_spectrogram(value=1.0, bins=33, frames=5, fs=1000.0, window_len=64):
    return Spectrogram(power=np.full((bins, frames), value),
                       freqs_hz=np.fft.rfftfreq(window_len, 1 / fs),
                       frame_centers_s=np.arange(frames, dtype=float),
                       window_len=window_len, sample_rate_hz=fs)


class TestSpectrogramShape:
    def test_default_shape_33_by_261(self):
        spec = spectrogram(np.random.default_rng(0).normal(size=16384), 1000.0)
        assert spec.power.shape == (33, 261)
        assert spec.freq_bins == 33
        assert spec.frame_count == 261
        assert spec.freqs_hz[0] == 0.0
        assert spec.freqs_hz[-1] == pytest.approx(500.0)

    def test_all_zero_input(self):
        spec = spectrogram(np.zeros(4096), 1000.0)
        np.testing.assert_array_equal(spec.power, 0.0)

    def test_window_longer_than_signal_rejected(self):
        with pytest.raises(ValueError):
            spectrogram(np.zeros(32), 1000.0, window_len=64)

    def test_frame_starts_cover_signal(self):
        starts = frame_starts(16384, 64, 261)
        assert starts[0] == 0
        assert starts[-1] == 16384 - 64
        assert np.all(np.diff(starts) > 0)

    def test_frame_centers_shared_with_features(self):
        seg = tone_segment(125.0)
        feats = featurize_segment(seg)
        assert feats.inst_freq_hz.shape == (261,)
        assert feats.spectral_entropy.shape == (261,)
        assert feats.log_spectrogram.shape == (33, 261)
        assert feats.frame_centers_s.shape == (261,)


class TestSpectrogramAgainstDirectDFT:
    def test_impulse_frame_matches_oracle_and_parseval(self):
        # A unit impulse sitting at a frame start, rectangular window.
        n = 4096
        x = np.zeros(n)
        starts = frame_starts(n, 64, 261)
        frame_idx = 100
        x[starts[frame_idx] + 7] = 1.0
        spec = spectrogram(x, 1000.0, window="rectangular")
        window = np.ones(64)
        frame = x[starts[frame_idx]:starts[frame_idx] + 64]
        expected = direct_onesided_power(frame, window)
        np.testing.assert_allclose(spec.power[:, frame_idx], expected, rtol=1e-9, atol=1e-12)
        # Parseval: one-sided power total equals windowed-frame energy.
        energy = np.sum((frame * window) ** 2)
        assert spec.power[:, frame_idx].sum() == pytest.approx(energy, rel=1e-9)
        # Two-sided spectrum of an impulse is flat: interior bins equal,
        # DC and Nyquist at half (they appear once).
        interior = spec.power[1:-1, frame_idx]
        np.testing.assert_allclose(interior, interior[0], rtol=1e-9)
        assert spec.power[0, frame_idx] == pytest.approx(interior[0] / 2, rel=1e-9)

    def test_random_frames_match_oracle_hann(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=1024)
        spec = spectrogram(x, 500.0, window_len=64, frame_count=7, window="hann")
        starts = frame_starts(1024, 64, 7)
        window = np.hanning(64)
        for i in (0, 3, 6):
            expected = direct_onesided_power(x[starts[i]:starts[i] + 64], window)
            np.testing.assert_allclose(spec.power[:, i], expected, rtol=1e-9, atol=1e-12)

    def test_parseval_every_frame_random_signal(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=16384)
        spec = spectrogram(x, 1000.0, window="rectangular")
        starts = frame_starts(16384, 64, 261)
        energies = np.array([np.sum(x[s:s + 64] ** 2) for s in starts])
        np.testing.assert_allclose(spec.power.sum(axis=0), energies, rtol=1e-9)

    def test_onbin_tone_concentrates_power(self):
        # 125 Hz at fs 1000 with 64-sample windows lands exactly on bin 8.
        seg = tone_segment(125.0)
        spec = spectrogram(pad_to_radix2(seg.samples), 1000.0, window="rectangular")
        full_frames = frame_starts(16384, 64, 261) + 64 <= 15000
        frame = np.flatnonzero(full_frames)[100]
        power = spec.power[:, frame]
        assert power[8] / power.sum() >= 0.99


class TestInstantaneousFrequency:
    def test_onbin_tone_reads_125_hz(self):
        seg = tone_segment(125.0)
        spec = spectrogram(pad_to_radix2(seg.samples), 1000.0, window="rectangular")
        iff = instantaneous_frequency(spec)
        # Only frames fully inside the unpadded region are leakage-free.
        starts = frame_starts(16384, 64, 261)
        steady = (starts + 64) <= 15000
        np.testing.assert_allclose(iff[steady], 125.0, atol=0.5)

    def test_zero_frames_read_zero(self):
        spec = spectrogram(np.zeros(4096), 1000.0)
        np.testing.assert_array_equal(instantaneous_frequency(spec), 0.0)

    def test_white_noise_centroid_near_quarter_rate(self):
        rng = np.random.default_rng(21)
        iffs = []
        for _ in range(3):
            spec = spectrogram(rng.normal(size=16384), 1000.0, window="rectangular")
            iffs.append(instantaneous_frequency(spec))
        mean_if = float(np.mean(np.concatenate(iffs)))
        assert abs(mean_if - 250.0) < 25.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=4096)
        base = instantaneous_frequency(spectrogram(x, 1000.0))
        for c in (1e-6, 3.7, 1e6):
            scaled = instantaneous_frequency(spectrogram(c * x, 1000.0))
            np.testing.assert_allclose(scaled, base, rtol=1e-9)

    def test_bounded_by_nyquist(self):
        rng = np.random.default_rng(2)
        spec = spectrogram(rng.normal(size=4096), 1000.0)
        iff = instantaneous_frequency(spec)
        assert np.all(iff >= 0.0) and np.all(iff <= 500.0)


class TestSpectralEntropy:
    def test_single_bin_spectrum_reads_zero(self):
        power = np.zeros((33, 4))
        power[5, :] = 2.5
        spec = flat_spectrogram()
        spec = Spectrogram(power=power, freqs_hz=spec.freqs_hz,
                           frame_centers_s=np.arange(4, dtype=float),
                           window_len=64, sample_rate_hz=1000.0)
        np.testing.assert_allclose(spectral_entropy(spec), 0.0, atol=1e-12)

    def test_flat_spectrum_reads_one(self):
        np.testing.assert_allclose(spectral_entropy(flat_spectrogram()), 1.0, atol=1e-12)

    def test_unnormalized_flat_spectrum(self):
        se = spectral_entropy(flat_spectrogram(), normalized=False)
        np.testing.assert_allclose(se, np.log2(33), rtol=1e-12)

    def test_white_noise_entropy_high(self):
        # Monte-Carlo expectation for a 33-bin single-periodogram estimate of
        # a flat spectrum is ~0.88 (chi-squared estimator bias), well above
        # any narrowband signal.
        rng = np.random.default_rng(31)
        noise_se = float(np.mean([
            spectral_entropy(spectrogram(rng.normal(size=16384), 1000.0)).mean()
            for _ in range(5)]))
        assert 0.85 < noise_se < 0.92
        tone = tone_segment(125.0)
        tone_se = float(spectral_entropy(
            spectrogram(tone.samples[:8192], 1000.0)).mean())
        assert noise_se > tone_se + 0.2

    def test_zero_frames_read_zero(self):
        spec = spectrogram(np.zeros(4096), 1000.0)
        np.testing.assert_array_equal(spectral_entropy(spec), 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=4096)
        base = spectral_entropy(spectrogram(x, 1000.0))
        scaled = spectral_entropy(spectrogram(5e3 * x, 1000.0))
        np.testing.assert_allclose(scaled, base, rtol=1e-9)


class TestLogSpectrogram:
    def test_zero_power_with_floor(self):
        spec = flat_spectrogram(value=0.0)
        out = log_spectrogram(spec, floor=1e-12)
        np.testing.assert_allclose(out, np.log(1e-12))

    def test_nonpositive_floor_rejected(self):
        with pytest.raises(ValueError):
            log_spectrogram(flat_spectrogram(), floor=0.0)

    def test_scaling_shifts_by_log10(self):
        rng = np.random.default_rng(23)
        power = rng.uniform(1.0, 10.0, size=(33, 8))
        floor = 1e-9
        base = Spectrogram(power=power, freqs_hz=np.zeros(33),
                           frame_centers_s=np.arange(8, dtype=float),
                           window_len=64, sample_rate_hz=1000.0)
        scaled = Spectrogram(power=10 * power, freqs_hz=np.zeros(33),
                             frame_centers_s=np.arange(8, dtype=float),
                             window_len=64, sample_rate_hz=1000.0)
        diff = log_spectrogram(scaled, floor) - log_spectrogram(base, floor)
        np.testing.assert_allclose(diff, np.log(10.0), rtol=1e-6)

    def test_monotone_in_power(self):
        rng = np.random.default_rng(29)
        power = rng.uniform(0.0, 5.0, size=(33, 8))
        spec = Spectrogram(power=power, freqs_hz=np.zeros(33),
                           frame_centers_s=np.arange(8, dtype=float),
                           window_len=64, sample_rate_hz=1000.0)
        out = log_spectrogram(spec, floor=1e-6)
        flat_p = power.ravel()
        flat_o = out.ravel()
        order = np.argsort(flat_p)
        assert np.all(np.diff(flat_o[order]) >= 0)

    def test_default_floor_tracks_peak(self):
        spec = flat_spectrogram(value=4.0)
        assert default_log_floor(spec, rel=1e-10) == pytest.approx(4e-10)
        assert default_log_floor(flat_spectrogram(value=0.0)) == pytest.approx(1e-10)


class TestFeaturizeSegment:
    def test_meta_records_conventions(self):
        feats = featurize_segment(tone_segment(30.0))
        assert feats.meta["se_normalized"] is True
        assert feats.meta["window"] == "hann"
        assert feats.meta["log_floor"] > 0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            TFFeatures(inst_freq_hz=np.array([np.nan]), spectral_entropy=np.array([0.5]),
                       log_spectrogram=np.zeros((2, 1)), frame_centers_s=np.array([0.0]))
