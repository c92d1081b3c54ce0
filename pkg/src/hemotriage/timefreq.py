"""Time-frequency featurization: power spectrograms, instantaneous frequency,
spectral entropy, and log-compressed spectrograms.

A segment is zero-padded to a power-of-two length and binned into a fixed
number of short windows (64 samples / 261 frames by default). Because
``(16384 - 64) / 260`` is not an integer, window centers are placed at evenly
spaced real-valued positions over ``[window_len/2, n - window_len/2]`` and
rounded to the nearest sample; this pins the frame count exactly while
keeping frames inside the signal.

Per-frame one-sided power is scaled so that the frame total equals the
time-domain energy of the windowed frame (interior bins doubled, divided by
the window length). Instantaneous frequency is the spectral first moment of
each frame; spectral entropy is the Shannon entropy of the frame's
normalized power, reported in [0, 1] via division by log2(n_bins).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container
from .waveform import Segment, pad_to_radix2

DEFAULT_WINDOW_LEN = 64
DEFAULT_FRAME_COUNT = 261
DEFAULT_LOG_FLOOR_REL = 1e-10

# Frames whose total power falls below this fraction of the strongest frame
# are treated as silent (IF and SE read 0 there).
ZERO_POWER_REL_EPS = 1e-12


@dataclass(frozen=True)
class Spectrogram:
    power: np.ndarray           # (freq_bins, frame_count), >= 0
    freqs_hz: np.ndarray        # (freq_bins,)
    frame_centers_s: np.ndarray  # (frame_count,)
    window_len: int
    sample_rate_hz: float
    window: str = "hann"

    def __post_init__(self):
        power = np.asarray(self.power, dtype=np.float64)
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "freqs_hz", np.asarray(self.freqs_hz, dtype=np.float64))
        object.__setattr__(self, "frame_centers_s", np.asarray(self.frame_centers_s, dtype=np.float64))
        if power.ndim != 2:
            raise ValueError("power must be 2-D (freq_bins x frames)")
        if power.shape[0] != self.freqs_hz.size or power.shape[1] != self.frame_centers_s.size:
            raise ValueError("power shape does not match axes")
        if np.any(power < 0) or not np.all(np.isfinite(power)):
            raise ValueError("power must be finite and non-negative")

    @property
    def freq_bins(self) -> int:
        return self.power.shape[0]

    @property
    def frame_count(self) -> int:
        return self.power.shape[1]


@dataclass(frozen=True)
class TFFeatures:
    """Per-segment feature bundle: IF and SE sequences plus the log spectrogram."""

    inst_freq_hz: np.ndarray       # (frame_count,)
    spectral_entropy: np.ndarray   # (frame_count,) in [0, 1]
    log_spectrogram: np.ndarray    # (freq_bins, frame_count)
    frame_centers_s: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("inst_freq_hz", "spectral_entropy", "log_spectrogram", "frame_centers_s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (np.all(np.isfinite(self.inst_freq_hz))
                and np.all(np.isfinite(self.spectral_entropy))
                and np.all(np.isfinite(self.log_spectrogram))):
            raise ValueError("features must be finite")
        if np.any(self.spectral_entropy < 0) or np.any(self.spectral_entropy > 1 + 1e-12):
            raise ValueError("spectral entropy out of [0, 1]")


def _window_function(name: str, length: int) -> np.ndarray:
    if name == "hann":
        return np.hanning(length)
    if name == "rectangular":
        return np.ones(length)
    raise ValueError(f"unknown window function {name!r}")


def frame_starts(n_samples: int, window_len: int, frame_count: int) -> np.ndarray:
    """Start indices of evenly spaced, center-aligned analysis windows."""
    centers = np.linspace(window_len / 2.0, n_samples - window_len / 2.0, frame_count)
    starts = np.rint(centers - window_len / 2.0).astype(np.int64)
    return np.clip(starts, 0, n_samples - window_len)


def spectrogram(samples: np.ndarray, sample_rate_hz: float,
                window_len: int = DEFAULT_WINDOW_LEN,
                frame_count: int = DEFAULT_FRAME_COUNT,
                window: str = "hann") -> Spectrogram:
    """One-sided power spectrogram over fixed-count, evenly spaced frames.

    Scaling satisfies Parseval per frame: ``power[:, t].sum()`` equals the
    energy of the windowed frame.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if window_len > n:
        raise ValueError(f"window_len {window_len} exceeds signal length {n}")
    if frame_count < 1:
        raise ValueError("frame_count must be positive")
    starts = frame_starts(n, window_len, frame_count)
    win = _window_function(window, window_len)
    frames = samples[starts[:, None] + np.arange(window_len)[None, :]] * win[None, :]
    spectra = np.fft.rfft(frames, axis=1)
    power = (spectra.real ** 2 + spectra.imag ** 2) / window_len
    power[:, 1:-1] *= 2.0  # fold negative frequencies; DC and Nyquist appear once
    freqs = np.fft.rfftfreq(window_len, d=1.0 / sample_rate_hz)
    centers_s = (starts + window_len / 2.0) / sample_rate_hz
    return Spectrogram(power=power.T, freqs_hz=freqs, frame_centers_s=centers_s,
                       window_len=window_len, sample_rate_hz=sample_rate_hz, window=window)


def _frame_power_mask(spec: Spectrogram):
    totals = spec.power.sum(axis=0)
    eps = ZERO_POWER_REL_EPS * totals.max() if totals.size else 0.0
    return totals, totals > eps


def instantaneous_frequency(spec: Spectrogram) -> np.ndarray:
    """Spectral first moment per frame; silent frames read 0 Hz."""
    totals, active = _frame_power_mask(spec)
    weighted = spec.freqs_hz @ spec.power
    out = np.zeros(spec.frame_count, dtype=np.float64)
    out[active] = weighted[active] / totals[active]
    return out


def spectral_entropy(spec: Spectrogram, normalized: bool = True) -> np.ndarray:
    """Shannon entropy of each frame's normalized power distribution.

    With ``normalized`` the result is divided by ``log2(freq_bins)`` so a
    flat spectrum reads 1 and a single-bin spectrum reads 0. Silent frames
    read 0. The ``0 * log 0`` terms are dropped.
    """
    totals, active = _frame_power_mask(spec)
    out = np.zeros(spec.frame_count, dtype=np.float64)
    if np.any(active):
        p = spec.power[:, active] / totals[active]
        plogp = np.where(p > 0, p * np.log2(np.maximum(p, 1e-300)), 0.0)
        entropy = -plogp.sum(axis=0)
        if normalized:
            entropy = entropy / np.log2(spec.freq_bins)
        out[active] = entropy
    return np.clip(out, 0.0, 1.0 if normalized else None)


def log_spectrogram(spec: Spectrogram, floor: float) -> np.ndarray:
    """Elementwise ``log(power + floor)``; compresses dynamic range."""
    if floor <= 0:
        raise ValueError("log floor must be positive")
    return np.log(spec.power + floor)


def default_log_floor(spec: Spectrogram, rel: float = DEFAULT_LOG_FLOOR_REL) -> float:
    peak = float(spec.power.max()) if spec.power.size else 0.0
    return rel * peak if peak > 0 else rel


def featurize_segment(seg: Segment, window_len: int = DEFAULT_WINDOW_LEN,
                      frame_count: int = DEFAULT_FRAME_COUNT, window: str = "hann",
                      log_floor_rel: float = DEFAULT_LOG_FLOOR_REL) -> TFFeatures:
    """Full featurization path: radix-2 padding, spectrogram, IF, SE, log power."""
    padded = pad_to_radix2(seg.samples)
    spec = spectrogram(padded, seg.sample_rate_hz, window_len=window_len,
                       frame_count=frame_count, window=window)
    floor = default_log_floor(spec, log_floor_rel)
    return TFFeatures(
        inst_freq_hz=instantaneous_frequency(spec),
        spectral_entropy=spectral_entropy(spec),
        log_spectrogram=log_spectrogram(spec, floor),
        frame_centers_s=spec.frame_centers_s,
        meta={
            "sample_rate_hz": seg.sample_rate_hz,
            "window_len": window_len,
            "frame_count": frame_count,
            "window": window,
            "log_floor": floor,
            "log_floor_rel": log_floor_rel,
            "se_normalized": True,
        },
    )


# --------------------------------------------------------------------------
# Feature cache
# --------------------------------------------------------------------------

def featurization_params_hash(window_len: int, frame_count: int, window: str,
                              log_floor_rel: float, window_s: float) -> str:
    payload = json.dumps({"window_len": window_len, "frame_count": frame_count,
                          "window": window, "log_floor_rel": log_floor_rel,
                          "window_s": window_s}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class FeatureCache:
    """On-disk cache keyed by (subject, trial, channel, featurization params).

    One container file per trial/channel holds stacked features for every
    segment start seen so far; lookups by start time reuse earlier work from
    any segmentation mode with the same window length.
    """

    def __init__(self, cache_dir, params_hash: str):
        self.cache_dir = cache_dir
        self.params_hash = params_hash
        os.makedirs(cache_dir, exist_ok=True)

    def _path(self, subject_id, trial_id, channel):
        return os.path.join(self.cache_dir,
                            f"{subject_id}_{trial_id}_{channel}_{self.params_hash}.feat")

    def get_or_compute(self, segments: list, compute) -> list:
        """Features for ``segments`` (same trial/channel), via cache when warm.

        ``compute`` maps a Segment to TFFeatures and runs only for misses.
        """
        if not segments:
            return []
        first = segments[0]
        path = self._path(first.subject_id, first.trial_id, first.channel)
        stored = {}
        meta = {}
        if os.path.exists(path):
            arrays, meta = container.load(path)
            for i, key in enumerate(meta.get("start_keys", [])):
                stored[key] = {
                    "inst_freq_hz": arrays["inst_freq_hz"][i],
                    "spectral_entropy": arrays["spectral_entropy"][i],
                    "log_spectrogram": arrays["log_spectrogram"][i],
                    "frame_centers_s": arrays["frame_centers_s"][i],
                    "log_floor": meta["log_floors"][i],
                }

        out = []
        added = False
        feature_meta = meta.get("feature_meta")
        for seg in segments:
            key = f"{seg.start_time_s:.6f}"
            if key not in stored:
                feats = compute(seg)
                floor = feats.meta.get("log_floor", 0.0)
                stored[key] = {
                    "inst_freq_hz": feats.inst_freq_hz,
                    "spectral_entropy": feats.spectral_entropy,
                    "log_spectrogram": feats.log_spectrogram,
                    "frame_centers_s": feats.frame_centers_s,
                    "log_floor": floor,
                }
                if feature_meta is None:
                    feature_meta = {k: v for k, v in feats.meta.items() if k != "log_floor"}
                added = True
            entry = stored[key]
            out.append(TFFeatures(
                inst_freq_hz=entry["inst_freq_hz"],
                spectral_entropy=entry["spectral_entropy"],
                log_spectrogram=entry["log_spectrogram"],
                frame_centers_s=entry["frame_centers_s"],
                meta=dict(feature_meta or {}, log_floor=entry["log_floor"]),
            ))

        if added:
            keys = sorted(stored, key=float)
            arrays = {
                "inst_freq_hz": np.stack([stored[k]["inst_freq_hz"] for k in keys]),
                "spectral_entropy": np.stack([stored[k]["spectral_entropy"] for k in keys]),
                "log_spectrogram": np.stack([stored[k]["log_spectrogram"] for k in keys]),
                "frame_centers_s": np.stack([stored[k]["frame_centers_s"] for k in keys]),
            }
            container.save(path, arrays, meta={
                "start_keys": keys,
                "log_floors": [stored[k]["log_floor"] for k in keys],
                "feature_meta": feature_meta or {},
                "params_hash": self.params_hash,
            })
        return out
