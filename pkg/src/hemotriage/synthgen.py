"""Deterministic synthetic session generator.

Produces sessions with a step-like pressure reference trace, a PPG channel
whose pulse rate rises and amplitude falls with the depth of the applied
level, and an ECG channel with R-waves at the matching rate. The modulation
model is not meant to be physiological; it exists so that the severity
classes are learnable and every stage of the pipeline can be tested against
known ground truth.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .annotation import map_class
from .waveform import ECG, LBNP_REF, PPG, Session, Waveform, write_session

DECADE_LEVELS = tuple(float(-10 * k) for k in range(9))  # 0 .. -80


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_subjects: int = 9
    trials_per_subject: int = 3
    sample_rate_hz: float = 1000.0
    n_levels: int = 6                      # dwell intervals per trial
    dwell_range_s: tuple = (120.0, 180.0)
    levels_mmhg: tuple = DECADE_LEVELS
    baseline_hr_bpm: float = 70.0
    hr_rise_bpm_per_10mmhg: float = 5.0
    amplitude_decay_per_10mmhg: float = 0.9
    noise_snr_db: float | None = 20.0      # None disables waveform noise
    ref_noise_mmhg: float = 0.5
    pulse_rise_s: float = 0.15

    def __post_init__(self):
        lo, hi = self.dwell_range_s
        if not (120.0 <= lo <= hi <= 180.0):
            raise ValueError("dwell times must lie within [120, 180] s")
        if any(lv < -80.0 or lv > 0.0 for lv in self.levels_mmhg):
            raise ValueError("levels must lie within [-80, 0] mmHg")
        if self.n_subjects < 1 or self.trials_per_subject < 1 or self.n_levels < 1:
            raise ValueError("counts must be positive")


@dataclass(frozen=True)
class SynthTruth:
    """Ground truth for one generated session."""

    boundaries: np.ndarray        # sample index where each dwell starts (first is 0)
    levels_mmhg: np.ndarray       # one level per dwell
    n_samples: int
    sample_rate_hz: float
    beat_times_s: np.ndarray      # cardiac cycle onsets
    ppg_foot_times_s: np.ndarray  # PPG pulse onsets (delayed beats)
    ppg_peak_times_s: np.ndarray
    ecg_r_times_s: np.ndarray
    flags: dict = field(default_factory=dict)

    @property
    def level_per_sample(self) -> np.ndarray:
        lengths = np.diff(np.concatenate([self.boundaries, [self.n_samples]]))
        return np.repeat(self.levels_mmhg, lengths)

    @property
    def class_per_sample(self) -> np.ndarray:
        lengths = np.diff(np.concatenate([self.boundaries, [self.n_samples]]))
        classes = np.array([int(map_class(lv)) for lv in self.levels_mmhg])
        return np.repeat(classes, lengths)


def _trial_rng(seed: int, subject_id: str, trial_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{subject_id}/{trial_id}".encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _draw_schedule(cfg: SynthConfig, rng) -> tuple:
    """Dwell levels and durations; starts at 0 mmHg, covers all three classes
    when enough dwells are available, and is never monotone non-increasing."""
    levels = np.asarray(cfg.levels_mmhg, dtype=np.float64)
    want_coverage = cfg.n_levels >= 3 and len({int(map_class(lv)) for lv in levels}) == 3
    for _ in range(1000):
        schedule = [0.0]
        for _ in range(cfg.n_levels - 1):
            choices = levels[levels != schedule[-1]]
            schedule.append(float(rng.choice(choices)))
        classes = {int(map_class(lv)) for lv in schedule}
        monotone = all(b <= a for a, b in zip(schedule, schedule[1:]))
        if want_coverage and classes != {1, 2, 3}:
            continue
        if len(schedule) > 1 and monotone:
            continue
        dwells = rng.uniform(cfg.dwell_range_s[0], cfg.dwell_range_s[1], size=cfg.n_levels)
        return np.array(schedule), dwells
    raise RuntimeError("could not draw a valid level schedule")


def _beat_times(level_per_sample, cfg: SynthConfig, fs: float, rng) -> np.ndarray:
    """Cycle onsets from an instantaneous rate that follows the level depth."""
    hr_bpm = cfg.baseline_hr_bpm + cfg.hr_rise_bpm_per_10mmhg * (-level_per_sample / 10.0)
    rate_hz = hr_bpm / 60.0
    phase = np.cumsum(rate_hz) / fs
    n_beats = int(np.floor(phase[-1]))
    if n_beats < 1:
        return np.array([])
    targets = np.arange(1, n_beats + 1, dtype=np.float64)
    idx = np.searchsorted(phase, targets)
    idx = np.clip(idx, 1, phase.size - 1)
    frac = (targets - phase[idx - 1]) / (phase[idx] - phase[idx - 1])
    return (idx - 1 + frac + 1.0) / fs  # +1: phase[i] is integral up to sample i


def _add_pulses(out: np.ndarray, fs: float, centers_s, widths_s, amplitudes) -> None:
    """Accumulate Gaussian bumps; each rendered on a local +-4 sigma window."""
    n = out.size
    for c, w, a in zip(np.atleast_1d(centers_s), np.atleast_1d(widths_s),
                       np.atleast_1d(amplitudes)):
        lo = max(0, int((c - 4 * w) * fs))
        hi = min(n, int((c + 4 * w) * fs) + 1)
        if hi <= lo:
            continue
        t = np.arange(lo, hi) / fs
        out[lo:hi] += a * np.exp(-0.5 * ((t - c) / w) ** 2)


def render_ppg(beat_times_s, beat_amplitudes, duration_s, fs,
               rise_s=0.15) -> tuple[np.ndarray, np.ndarray]:
    """Two-Gaussian pulse train; returns (signal, systolic peak times).

    The systolic lobe is a Gaussian (sigma = rise_s/2.5) clipped at its own
    onset value and rescaled, so it starts exactly at the pulse onset with a
    positive slope and peaks rise_s later: onset-to-peak time equals
    ``rise_s`` by construction and the onset is a genuine local minimum. A
    wider, smaller diastolic Gaussian follows.
    """
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    beat_times_s = np.asarray(beat_times_s, dtype=np.float64)
    amps = np.broadcast_to(np.asarray(beat_amplitudes, dtype=np.float64), beat_times_s.shape)
    sigma = rise_s / 2.5
    onset_value = np.exp(-0.5 * (rise_s / sigma) ** 2)
    peak_times = beat_times_s + rise_s
    dia_mu, dia_sigma, dia_rel = 0.42, 0.16, 0.35
    for t0, a in zip(beat_times_s, amps):
        lo = max(0, int(round(t0 * fs)))
        hi = min(n, int(round((t0 + dia_mu + 4 * dia_sigma) * fs)) + 1)
        if hi <= lo:
            continue
        t = np.arange(lo, hi) / fs
        lobe = (np.exp(-0.5 * ((t - t0 - rise_s) / sigma) ** 2) - onset_value) / (1 - onset_value)
        # Nothing renders before the onset: both lobes start at the foot.
        out[lo:hi] += a * (np.maximum(lobe, 0.0)
                           + dia_rel * np.exp(-0.5 * ((t - t0 - dia_mu) / dia_sigma) ** 2))
    return out, peak_times


def render_ecg(beat_times_s, duration_s, fs) -> np.ndarray:
    """R-wave train (narrow Gaussians) with small T-wave bumps."""
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    beats = np.asarray(beat_times_s, dtype=np.float64)
    _add_pulses(out, fs, beats, np.full_like(beats, 0.012), np.ones_like(beats))
    _add_pulses(out, fs, beats + 0.25, np.full_like(beats, 0.05), np.full_like(beats, 0.15))
    return out


def _add_noise(x: np.ndarray, snr_db, rng) -> np.ndarray:
    if snr_db is None:
        return x
    rms = float(np.sqrt(np.mean(x ** 2)))
    if rms == 0:
        return x
    sigma = rms * 10.0 ** (-snr_db / 20.0)
    return x + rng.normal(0.0, sigma, size=x.size)


PPG_ONSET_DELAY_S = 0.20  # pulse arrival lag behind the electrical beat


def generate_session(cfg: SynthConfig, subject_id: str, trial_id: str) -> tuple[Session, SynthTruth]:
    """One deterministic synthetic trial for (cfg.seed, subject_id, trial_id)."""
    rng = _trial_rng(cfg.seed, subject_id, trial_id)
    fs = cfg.sample_rate_hz
    schedule, dwells = _draw_schedule(cfg, rng)
    dwell_samples = np.round(dwells * fs).astype(np.int64)
    n = int(dwell_samples.sum())
    boundaries = np.concatenate([[0], np.cumsum(dwell_samples)[:-1]])
    level_per_sample = np.repeat(schedule, dwell_samples)
    duration_s = n / fs

    beats = _beat_times(level_per_sample, cfg, fs, rng)
    beat_idx = np.clip((beats * fs).astype(np.int64), 0, n - 1)
    beat_levels = level_per_sample[beat_idx]
    beat_amps = cfg.amplitude_decay_per_10mmhg ** (-beat_levels / 10.0)

    ppg_feet = beats + PPG_ONSET_DELAY_S
    keep = ppg_feet < duration_s - 1.0
    ppg, ppg_peaks = render_ppg(ppg_feet[keep], beat_amps[keep], duration_s, fs,
                                rise_s=cfg.pulse_rise_s)
    ecg = render_ecg(beats, duration_s, fs)

    ppg = _add_noise(ppg, cfg.noise_snr_db, rng)
    ecg = _add_noise(ecg, cfg.noise_snr_db, rng)
    ref = level_per_sample.copy()
    if cfg.ref_noise_mmhg > 0:
        ref = ref + rng.normal(0.0, cfg.ref_noise_mmhg, size=n)

    session = Session(
        subject_id=subject_id,
        trial_id=trial_id,
        channels={
            PPG: Waveform(ppg, fs, PPG),
            ECG: Waveform(ecg, fs, ECG),
            LBNP_REF: Waveform(ref, fs, LBNP_REF),
        },
        meta={"n_changepoints": len(schedule) - 1, "synthetic": True},
    )
    truth = SynthTruth(
        boundaries=boundaries,
        levels_mmhg=schedule,
        n_samples=n,
        sample_rate_hz=fs,
        beat_times_s=beats,
        ppg_foot_times_s=ppg_feet[keep],
        ppg_peak_times_s=ppg_peaks,
        ecg_r_times_s=beats,
        flags={"rise_s": cfg.pulse_rise_s},
    )
    return session, truth


def write_truth(truth: SynthTruth, path) -> None:
    payload = {
        "boundaries": truth.boundaries.tolist(),
        "levels_mmhg": truth.levels_mmhg.tolist(),
        "n_samples": truth.n_samples,
        "sample_rate_hz": truth.sample_rate_hz,
        "beat_times_s": np.round(truth.beat_times_s, 6).tolist(),
        "ppg_foot_times_s": np.round(truth.ppg_foot_times_s, 6).tolist(),
        "ppg_peak_times_s": np.round(truth.ppg_peak_times_s, 6).tolist(),
        "ecg_r_times_s": np.round(truth.ecg_r_times_s, 6).tolist(),
        "flags": truth.flags,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_truth(path) -> SynthTruth:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SynthTruth(
        boundaries=np.asarray(payload["boundaries"], dtype=np.int64),
        levels_mmhg=np.asarray(payload["levels_mmhg"], dtype=np.float64),
        n_samples=int(payload["n_samples"]),
        sample_rate_hz=float(payload["sample_rate_hz"]),
        beat_times_s=np.asarray(payload["beat_times_s"], dtype=np.float64),
        ppg_foot_times_s=np.asarray(payload["ppg_foot_times_s"], dtype=np.float64),
        ppg_peak_times_s=np.asarray(payload["ppg_peak_times_s"], dtype=np.float64),
        ecg_r_times_s=np.asarray(payload["ecg_r_times_s"], dtype=np.float64),
        flags=payload.get("flags", {}),
    )


def write_dataset(cfg: SynthConfig, out_dir) -> list:
    """All sessions for the config; returns manifest paths in a stable order."""
    os.makedirs(out_dir, exist_ok=True)
    manifests = []
    for s in range(cfg.n_subjects):
        subject_id = f"subject{s + 1:02d}"
        for t in range(cfg.trials_per_subject):
            trial_id = f"trial{t + 1}"
            session, truth = generate_session(cfg, subject_id, trial_id)
            manifests.append(write_session(session, out_dir))
            write_truth(truth, os.path.join(out_dir, f"{subject_id}_{trial_id}.truth.json"))
    return manifests
