"""Canonical waveform representation, validation, segmentation, radix-2 padding.

Sessions are stored on disk as one JSON manifest per trial plus one file per
channel. Channel file formats are selected by extension:

    .csv   headerless text, one amplitude per line
    .f32   raw little-endian float32
    .f64   raw little-endian float64
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PPG = "PPG"
ECG = "ECG"
LBNP_REF = "LBNP_REF"
CHANNELS = (PPG, ECG, LBNP_REF)

DEFAULT_WINDOW_S = 15.0
DEFAULT_OVERLAP_S = 10.0


@dataclass(frozen=True)
class Waveform:
    """A single-channel amplitude sequence at a fixed sampling rate."""

    samples: np.ndarray
    sample_rate_hz: float
    channel: str
    start_time_s: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class Session:
    """One subject-trial: a set of synchronized channels plus identity."""

    subject_id: str
    trial_id: str
    channels: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if not self.channels:
            raise ValueError("session has no channels")
        lengths = {name: len(w) for name, w in self.channels.items()}
        rates = {w.sample_rate_hz for w in self.channels.values()}
        if len(rates) != 1:
            raise ValueError("all channels must share one sample rate")
        # Duration equality within one sample.
        if max(lengths.values()) - min(lengths.values()) > 1:
            raise ValueError(f"channel durations differ by more than one sample: {lengths}")

    @property
    def sample_rate_hz(self) -> float:
        return next(iter(self.channels.values())).sample_rate_hz

    def channel(self, name: str) -> Waveform:
        if name not in self.channels:
            raise DataError(f"session {self.subject_id}/{self.trial_id} has no {name} channel")
        return self.channels[name]


@dataclass(frozen=True)
class Segment:
    """Fixed-length window cut from one channel of a session."""

    samples: np.ndarray
    sample_rate_hz: float
    channel: str
    subject_id: str
    trial_id: str
    start_time_s: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def midpoint_sample(self) -> int:
        """Index of the segment midpoint in session coordinates."""
        start = int(round(self.start_time_s * self.sample_rate_hz))
        return start + self.samples.size // 2

    def __len__(self) -> int:
        return self.samples.size


def segment(w: Waveform, window_s: float = DEFAULT_WINDOW_S, overlap_s: float = DEFAULT_OVERLAP_S,
            mode: str = "train", subject_id: str = "", trial_id: str = "") -> list:
    """Cut a waveform into fixed-length windows.

    Train mode uses stride ``window_s - overlap_s``; test mode ignores the
    overlap and strides by the full window. Trailing partial windows are
    dropped so every segment has the same sample count.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    fs = w.sample_rate_hz
    window_n = int(round(window_s * fs))
    if window_n <= 0:
        raise ValueError("window_s must be positive")
    if window_n > len(w):
        raise ValueError("waveform too short")
    if mode == "train":
        if overlap_s >= window_s:
            raise ValueError("non-positive stride")
        stride_n = int(round((window_s - overlap_s) * fs))
    else:
        stride_n = window_n
    if stride_n <= 0:
        raise ValueError("non-positive stride")

    out = []
    for start in range(0, len(w) - window_n + 1, stride_n):
        out.append(Segment(
            samples=w.samples[start:start + window_n],
            sample_rate_hz=fs,
            channel=w.channel,
            subject_id=subject_id,
            trial_id=trial_id,
            start_time_s=w.start_time_s + start / fs,
        ))
    return out


def next_pow2(n: int) -> int:
    if n <= 0:
        raise ValueError("length must be positive")
    return 1 << (n - 1).bit_length()


def pad_to_radix2(samples: np.ndarray) -> np.ndarray:
    """Zero-pad at the end to the smallest power-of-two length >= the input."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot pad an empty sequence")
    target = next_pow2(samples.size)
    if target == samples.size:
        return samples.copy()
    out = np.zeros(target, dtype=np.float64)
    out[:samples.size] = samples
    return out


# --------------------------------------------------------------------------
# Disk formats
# --------------------------------------------------------------------------

def read_channel_file(path) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".csv":
            data = np.loadtxt(path, dtype=np.float64, ndmin=1)
        elif ext == ".f32":
            data = np.fromfile(path, dtype="<f4").astype(np.float64)
        elif ext == ".f64":
            data = np.fromfile(path, dtype="<f8")
        else:
            raise DataError(f"{path}: unknown channel file extension {ext!r}")
    except OSError as exc:
        raise DataError(f"cannot read channel file {path}: {exc}") from exc
    return data


def write_channel_file(path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    ext = os.path.splitext(path)[1].lower()
    tmp = f"{path}.tmp"
    if ext == ".csv":
        np.savetxt(tmp, samples, fmt="%.9g")
    elif ext == ".f32":
        samples.astype("<f4").tofile(tmp)
    elif ext == ".f64":
        samples.astype("<f8").tofile(tmp)
    else:
        raise DataError(f"{path}: unknown channel file extension {ext!r}")
    os.replace(tmp, path)


def write_session(session: Session, directory) -> str:
    """Write channel files plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    stem = f"{session.subject_id}_{session.trial_id}"
    manifest = {
        "subject_id": session.subject_id,
        "trial_id": session.trial_id,
        "sample_rate_hz": session.sample_rate_hz,
        "channels": {},
    }
    manifest.update(session.meta)
    for name, wave in sorted(session.channels.items()):
        fname = f"{stem}_{name}.f32"
        write_channel_file(os.path.join(directory, fname), wave.samples)
        manifest["channels"][name] = fname
    manifest_path = os.path.join(directory, f"{stem}.session.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def read_session(manifest_path) -> Session:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc
    for key in ("subject_id", "trial_id", "sample_rate_hz", "channels"):
        if key not in manifest:
            raise DataError(f"manifest {manifest_path} missing key {key!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    fs = float(manifest["sample_rate_hz"])
    channels = {}
    for name, ref in manifest["channels"].items():
        samples = read_channel_file(os.path.join(base, ref))
        channels[name] = Waveform(samples=samples, sample_rate_hz=fs, channel=name)
    meta = {k: v for k, v in manifest.items()
            if k not in ("subject_id", "trial_id", "sample_rate_hz", "channels")}
    try:
        return Session(subject_id=manifest["subject_id"], trial_id=manifest["trial_id"],
                       channels=channels, meta=meta)
    except ValueError as exc:
        raise DataError(f"invalid session in {manifest_path}: {exc}") from exc


def find_manifests(data_dir) -> list:
    """All session manifests under ``data_dir``, sorted for determinism."""
    out = []
    for root, _dirs, files in os.walk(data_dir):
        for fname in files:
            if fname.endswith(".session.json"):
                out.append(os.path.join(root, fname))
    return sorted(out)
