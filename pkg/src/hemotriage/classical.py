"""Classical baseline feature extractors: QRS detection (Pan-Tompkins style),
PPG pulse-foot detection, time/frequency-domain beat-interval variability,
autoregressive coefficients, and PPG fiducial-point morphology.

These exist for baseline comparisons against the time-frequency pipeline and
share the segment/feature-vector contracts of the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, signal

from .waveform import Segment

# Physiological inter-beat bounds; out-of-range intervals are flagged, not dropped.
MIN_INTERVAL_S = 0.2
MAX_INTERVAL_S = 3.0

LF_BAND_HZ = (0.04, 0.15)
HF_BAND_HZ = (0.15, 0.40)

# Frequency-domain variability needs at least this much beat coverage;
# below it the spectral features are set to 0.0 and flagged "short-window".
MIN_SPECTRAL_SPAN_S = 30.0

SPECTRAL_SENTINEL = 0.0


@dataclass(frozen=True)
class BeatSeries:
    """Detected beat instants and the intervals between them."""

    beat_times_s: np.ndarray
    source: str  # "ECG_R_peaks" or "PPG_pulse_feet"
    flags: tuple = ()

    def __post_init__(self):
        times = np.asarray(self.beat_times_s, dtype=np.float64)
        object.__setattr__(self, "beat_times_s", times)
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("beat times must be strictly increasing")
        violations = []
        intervals = np.diff(times)
        for i, dt in enumerate(intervals):
            if not (MIN_INTERVAL_S < dt < MAX_INTERVAL_S):
                violations.append(f"interval_{i}_out_of_bounds={dt:.3f}s")
        if violations:
            object.__setattr__(self, "flags", tuple(self.flags) + tuple(violations))

    @property
    def intervals_s(self) -> np.ndarray:
        return np.diff(self.beat_times_s)

    @property
    def n_beats(self) -> int:
        return self.beat_times_s.size


@dataclass(frozen=True)
class FeatureVector:
    """Named features with a stable order; values must be finite."""

    names: tuple
    values: np.ndarray
    flags: tuple = ()
    schema_version: str = "1"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) != values.size:
            raise ValueError("feature names and values differ in length")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


# --------------------------------------------------------------------------
# Beat detection
# --------------------------------------------------------------------------

def _bandpass(x, fs, low, high, order=2):
    nyq = fs / 2.0
    high = min(high, 0.99 * nyq)
    b, a = signal.butter(order, [low / nyq, high / nyq], btype="band")
    return signal.filtfilt(b, a, x)


def detect_r_peaks(ecg: Segment) -> BeatSeries:
    """QRS detection: band-pass, derivative, squaring, moving-window
    integration, adaptive thresholding with search-back; each detection is
    refined to the local maximum of the filtered signal."""
    fs = ecg.sample_rate_hz
    x = ecg.samples
    if ecg.duration_s < 5.0:
        raise ValueError("insufficient beats: segment shorter than 5 s")
    if np.ptp(x) == 0:
        raise ValueError("insufficient beats: flat signal")

    filtered = _bandpass(x, fs, 5.0, 15.0)
    diff = np.diff(filtered)
    squared = diff ** 2
    win = max(1, int(round(0.150 * fs)))
    integrated = np.convolve(squared, np.ones(win) / win, mode="same")

    refractory = int(round(0.200 * fs))
    spacing = max(1, refractory)
    candidates = signal.find_peaks(integrated, distance=spacing)[0]
    if candidates.size == 0:
        raise ValueError("insufficient beats: no candidate peaks")

    spki = float(np.max(integrated[:int(2 * fs)])) * 0.5 if integrated.size else 0.0
    npki = float(np.mean(integrated[:int(2 * fs)])) * 0.5
    threshold = npki + 0.25 * (spki - npki)
    qrs = []
    noise = []
    for idx in candidates:
        value = integrated[idx]
        if value > threshold:
            qrs.append(idx)
            spki = 0.125 * value + 0.875 * spki
        else:
            noise.append(idx)
            npki = 0.125 * value + 0.875 * npki
        threshold = npki + 0.25 * (spki - npki)

    # Search-back: if a gap exceeds 1.66x the running average RR, re-admit the
    # strongest discarded candidate inside the gap at half threshold.
    if len(qrs) >= 2:
        rr_avg = float(np.mean(np.diff(qrs)))
        filled = [qrs[0]]
        for nxt in qrs[1:]:
            gap = nxt - filled[-1]
            if gap > 1.66 * rr_avg and noise:
                inside = [c for c in noise if filled[-1] + refractory < c < nxt - refractory]
                if inside:
                    best = max(inside, key=lambda c: integrated[c])
                    if integrated[best] > 0.5 * threshold:
                        filled.append(best)
            filled.append(nxt)
        qrs = filled

    # Refine to the raw-signal maximum near each integrator peak. The
    # integration window delays the peak by about win/2.
    half = int(round(0.1 * fs))
    peaks = []
    for idx in qrs:
        center = max(0, idx - win // 2)
        lo = max(0, center - half)
        hi = min(x.size, center + half + 1)
        peaks.append(lo + int(np.argmax(x[lo:hi])))
    peaks = np.unique(peaks)
    if peaks.size < 2:
        raise ValueError("insufficient beats: fewer than 2 QRS detections")
    return BeatSeries(beat_times_s=ecg.start_time_s + peaks / fs, source="ECG_R_peaks")


def detect_pulse_feet(ppg: Segment) -> BeatSeries:
    """Pulse onset detection: feet are the local minima immediately preceding
    the maximal-upslope points of each pulse."""
    fs = ppg.sample_rate_hz
    x = ppg.samples
    if ppg.duration_s < 5.0:
        raise ValueError("insufficient beats: segment shorter than 5 s")
    if np.ptp(x) == 0:
        raise ValueError("insufficient beats: flat signal")

    # Bandpassed slope locates the upstrokes; the foot itself is taken on the
    # raw signal (lightly smoothed) so filter transients cannot shift it.
    filtered = _bandpass(x, fs, 0.5, 10.0)
    slope = np.gradient(filtered)
    min_period = int(round(0.33 * fs))  # 180 bpm ceiling
    edge_guard = int(round(0.25 * fs))  # filtfilt edge transients
    interior_max = float(np.max(slope[edge_guard:-edge_guard]))
    upstrokes = signal.find_peaks(slope, distance=min_period,
                                  height=0.3 * interior_max)[0]
    upstrokes = upstrokes[upstrokes >= edge_guard]
    box = max(1, int(round(0.015 * fs)))
    smoothed = np.convolve(x, np.ones(box) / box, mode="same")
    feet = []
    search = int(round(0.3 * fs))
    for idx in upstrokes:
        lo = max(0, idx - search)
        window = smoothed[lo:idx + 1]
        if window.size == 0:
            continue
        # Ties (flat baselines) resolve toward the upstroke, so the foot sits
        # at the end of a quiescent run rather than its start.
        rev = window.size - 1 - int(np.argmin(window[::-1]))
        feet.append(lo + rev)
    feet = np.unique(feet)
    if feet.size < 2:
        raise ValueError("insufficient beats: fewer than 2 pulse feet")
    return BeatSeries(beat_times_s=ppg.start_time_s + feet / fs, source="PPG_pulse_feet")


# --------------------------------------------------------------------------
# Interval-variability features
# --------------------------------------------------------------------------

def hrv_features(beats: BeatSeries) -> FeatureVector:
    """Time-domain and frequency-domain variability of the interval series.

    Frequency features come from a periodogram of the interval series
    resampled at 4 Hz with cubic interpolation; they require at least 30 s of
    beat coverage, otherwise they are sentinel 0.0 with a "short-window" flag.
    """
    intervals = beats.intervals_s
    if intervals.size < 3:
        raise ValueError("insufficient beats: need at least 3 intervals")

    diffs = np.diff(intervals)
    mean_rr = float(np.mean(intervals))
    sdnn = float(np.std(intervals))
    rmssd = float(np.sqrt(np.mean(diffs ** 2))) if diffs.size else 0.0
    pnn50 = float(np.mean(np.abs(diffs) > 0.050)) * 100.0 if diffs.size else 0.0

    flags = list(beats.flags)
    span = float(beats.beat_times_s[-1] - beats.beat_times_s[0])
    if span < MIN_SPECTRAL_SPAN_S:
        lf = hf = lf_hf = SPECTRAL_SENTINEL
        flags.append("short-window")
    else:
        # Interval value at each beat time, resampled on a uniform 4 Hz grid.
        t_beats = beats.beat_times_s[1:]
        spline = interpolate.CubicSpline(t_beats, intervals)
        fs_resample = 4.0
        grid = np.arange(t_beats[0], t_beats[-1], 1.0 / fs_resample)
        resampled = spline(grid)
        freqs, psd = signal.periodogram(resampled - np.mean(resampled), fs=fs_resample)
        lf = float(np.trapezoid(psd[(freqs >= LF_BAND_HZ[0]) & (freqs < LF_BAND_HZ[1])],
                                freqs[(freqs >= LF_BAND_HZ[0]) & (freqs < LF_BAND_HZ[1])]))
        hf = float(np.trapezoid(psd[(freqs >= HF_BAND_HZ[0]) & (freqs < HF_BAND_HZ[1])],
                                freqs[(freqs >= HF_BAND_HZ[0]) & (freqs < HF_BAND_HZ[1])]))
        lf_hf = lf / hf if hf > 0 else 0.0
        if hf <= 0:
            flags.append("zero-hf-power")

    return FeatureVector(
        names=("mean_rr_s", "sdnn_s", "rmssd_s", "pnn50_pct",
               "lf_power", "hf_power", "lf_hf_ratio"),
        values=np.array([mean_rr, sdnn, rmssd, pnn50, lf, hf, lf_hf]),
        flags=tuple(flags),
    )


def ar_coefficients(seg: Segment, order: int = 4, decimate_factor: int = 10) -> FeatureVector:
    """Autoregressive coefficients via autocorrelation / Levinson-Durbin.

    The segment is z-scored and stride-decimated first; plain subsampling
    keeps white input white, so the coefficients reflect structure rather
    than oversampling. Positive convention: x_t = sum_k a_k x_{t-k} + e_t.
    """
    x = seg.samples[::decimate_factor].astype(np.float64)
    if x.size <= 10 * order:
        raise ValueError(f"segment too short for AR({order}) after decimation")
    std = np.std(x)
    if std == 0:
        raise ValueError("zero-variance input")
    x = (x - np.mean(x)) / std

    n = x.size
    r = np.array([np.dot(x[:n - k], x[k:]) / n for k in range(order + 1)])

    # Levinson-Durbin recursion on the monic polynomial a.
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for k in range(1, order + 1):
        acc = r[k] + np.dot(a[1:k], r[1:k][::-1])
        reflection = -acc / err
        updated = a.copy()
        updated[1:k] = a[1:k] + reflection * a[1:k][::-1]
        updated[k] = reflection
        a = updated
        err *= (1.0 - reflection ** 2)
        if err <= 0:
            raise ValueError("Levinson-Durbin recursion became singular")
    coeffs = -a[1:]  # prediction coefficients, positive convention
    return FeatureVector(
        names=tuple(f"ar_{k}" for k in range(1, order + 1)),
        values=coeffs,
        flags=(f"decimate_x{decimate_factor}",),
    )


# --------------------------------------------------------------------------
# PPG fiducial morphology
# --------------------------------------------------------------------------

def fiducial_features(ppg: Segment, beats: BeatSeries) -> FeatureVector:
    """Per-beat pulse morphology aggregated over the segment.

    For each foot-to-foot pulse: systolic peak amplitude above the foot
    baseline, foot-to-peak rise time, trapezoidal area above the straight
    baseline drawn between feet, and width at half amplitude.
    """
    if beats.n_beats < 3:
        raise ValueError("insufficient beats: need at least 3 feet")
    fs = ppg.sample_rate_hz
    x = ppg.samples
    feet = np.round((beats.beat_times_s - ppg.start_time_s) * fs).astype(np.int64)
    feet = feet[(feet >= 0) & (feet < x.size)]

    amplitudes, rise_times, areas, widths = [], [], [], []
    for a, b in zip(feet, feet[1:]):
        pulse = x[a:b + 1]
        if pulse.size < 3:
            continue
        peak_rel = int(np.argmax(pulse))
        baseline = np.linspace(pulse[0], pulse[-1], pulse.size)
        above = pulse - baseline
        amp = float(above[peak_rel])
        if amp <= 0:
            continue
        amplitudes.append(amp)
        rise_times.append(peak_rel / fs)
        areas.append(float(np.trapezoid(np.maximum(above, 0.0), dx=1.0 / fs)))
        half = amp / 2.0
        over = np.flatnonzero(above >= half)
        widths.append((over[-1] - over[0]) / fs if over.size else 0.0)

    if len(amplitudes) < 2:
        raise ValueError("insufficient beats: fewer than 2 usable pulses")

    def stats(values):
        arr = np.asarray(values)
        return float(np.mean(arr)), float(np.std(arr))

    amp_m, amp_s = stats(amplitudes)
    rise_m, rise_s = stats(rise_times)
    area_m, area_s = stats(areas)
    width_m, width_s = stats(widths)
    return FeatureVector(
        names=("peak_amp_mean", "peak_amp_std", "rise_time_mean_s", "rise_time_std_s",
               "pulse_area_mean", "pulse_area_std", "half_width_mean_s", "half_width_std_s"),
        values=np.array([amp_m, amp_s, rise_m, rise_s, area_m, area_s, width_m, width_s]),
        flags=tuple(beats.flags),
    )
