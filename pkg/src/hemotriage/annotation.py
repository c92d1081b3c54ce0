"""Level annotation: changepoint detection on the pressure reference trace,
step-target construction, and mapping of step levels to severity classes.

``find_changepoints`` solves the piecewise-constant segmentation exactly:
for a requested number of changepoints it minimizes the total squared
deviation from per-interval means by dynamic programming. This is quadratic
in the trace length, so long traces go through
``find_changepoints_decimated`` which mean-pools the trace first and then
refines each breakpoint at full resolution.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .waveform import LBNP_REF, Segment, Session, Waveform

LEVEL_MIN_MMHG = -80.0
LEVEL_MAX_MMHG = 0.0


class SeverityClass(enum.IntEnum):
    """Ternary severity grading; ordering reflects increasing severity."""

    MILD = 1
    MODERATE = 2
    SEVERE = 3


@dataclass(frozen=True)
class ChangepointResult:
    """Breakpoints (indices where a new interval starts), interval means, and
    the total squared-error cost of the piecewise-constant fit."""

    breakpoints: tuple
    interval_means: tuple
    cost: float
    n_samples: int

    def __post_init__(self):
        bps = tuple(int(b) for b in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if bps and (bps[0] < 1 or bps[-1] >= self.n_samples):
            raise ValueError("breakpoints out of signal bounds")
        if len(self.interval_means) != len(bps) + 1:
            raise ValueError("need one mean per interval")


@dataclass(frozen=True)
class LabeledSegment:
    segment: Segment
    label: SeverityClass
    lbnp_level_mmhg: float


def _prefix_sums(x: np.ndarray):
    s1 = np.concatenate(([0.0], np.cumsum(x)))
    s2 = np.concatenate(([0.0], np.cumsum(x * x)))
    return s1, s2


def _interval_cost(s1, s2, i, j):
    """Squared deviation from the mean over x[i:j] (vectorized over i)."""
    n = j - i
    sums = s1[j] - s1[i]
    return (s2[j] - s2[i]) - sums * sums / n


def find_changepoints(trace: Waveform | np.ndarray, n: int) -> ChangepointResult:
    """Exact minimum-cost placement of ``n`` mean-shift changepoints.

    Cost is the sum over intervals of squared deviation from the interval
    mean. Ties resolve toward the earliest index, which makes the result
    deterministic on degenerate (e.g. constant) traces.
    """
    x = trace.samples if isinstance(trace, Waveform) else np.asarray(trace, dtype=np.float64)
    t = x.size
    if not np.all(np.isfinite(x)):
        raise ValueError("trace contains non-finite samples")
    if n < 1:
        raise ValueError("n must be a positive integer")
    if n >= t:
        raise ValueError(f"n={n} changepoints require more than {n} samples, got {t}")

    s1, s2 = _prefix_sums(x)
    idx = np.arange(t + 1)

    # cost_best[k][j] = optimal cost of x[0:j] split into k+1 intervals.
    cost_best = np.empty(t + 1)
    cost_best[0] = np.inf  # an interval cannot be empty
    cost_best[1:] = _interval_cost(s1, s2, np.zeros(t, dtype=np.int64), idx[1:])
    split = np.zeros((n, t + 1), dtype=np.int64)
    for k in range(1, n + 1):
        nxt = np.full(t + 1, np.inf)
        # First j admitting k+1 non-empty intervals is k+1.
        for j in range(k + 1, t + 1):
            i = np.arange(k, j)
            cand = cost_best[i] + _interval_cost(s1, s2, i, j)
            best = int(np.argmin(cand))  # first minimum -> earliest index
            nxt[j] = cand[best]
            split[k - 1, j] = k + best
        cost_best = nxt

    breakpoints = []
    j = t
    for k in range(n, 0, -1):
        j = int(split[k - 1, j])
        breakpoints.append(j)
    breakpoints.reverse()

    bounds = [0] + breakpoints + [t]
    means = tuple(float(np.mean(x[a:b])) for a, b in zip(bounds, bounds[1:]))
    return ChangepointResult(breakpoints=tuple(breakpoints), interval_means=means,
                             cost=float(cost_best[t]), n_samples=t)


def _refine_breakpoints(x: np.ndarray, breakpoints, radius: int) -> list:
    """Locally re-optimize each breakpoint at full resolution.

    Holding its neighbors fixed, each breakpoint moves within ``radius``
    samples to the position minimizing the squared error of the two adjacent
    intervals. One left-to-right pass is enough for step-like traces.
    """
    s1, s2 = _prefix_sums(x)
    bps = list(breakpoints)
    t = x.size
    for i, b in enumerate(bps):
        left = bps[i - 1] if i > 0 else 0
        right = bps[i + 1] if i + 1 < len(bps) else t
        lo = max(left + 1, b - radius)
        hi = min(right - 1, b + radius)
        if hi < lo:
            continue
        cand = np.arange(lo, hi + 1)
        costs = (_interval_cost(s1, s2, np.full(cand.size, left), cand)
                 + _interval_cost(s1, s2, cand, np.full(cand.size, right)))
        bps[i] = int(cand[np.argmin(costs)])
    return bps


def find_changepoints_decimated(trace: Waveform, n: int, max_dp_len: int = 4096) -> ChangepointResult:
    """Changepoints for long traces: mean-pool so the DP input stays at or
    below ``max_dp_len`` samples, solve exactly there, then refine each
    breakpoint at full resolution within one pooling bin."""
    x = trace.samples
    t = x.size
    factor = max(1, int(np.ceil(t / max_dp_len)))
    if factor == 1:
        return find_changepoints(trace, n)
    pooled_len = t // factor
    if n >= pooled_len:
        raise ValueError("trace too short for decimated changepoint search")
    pooled = x[:pooled_len * factor].reshape(pooled_len, factor).mean(axis=1)
    coarse = find_changepoints(pooled, n)
    mapped = [b * factor for b in coarse.breakpoints]
    refined = _refine_breakpoints(x, mapped, radius=factor)
    bounds = [0] + refined + [t]
    means = tuple(float(np.mean(x[a:b])) for a, b in zip(bounds, bounds[1:]))
    s1, s2 = _prefix_sums(x)
    cost = float(sum(_interval_cost(s1, s2, np.array([a]), np.array([b]))[0]
                     for a, b in zip(bounds, bounds[1:])))
    return ChangepointResult(breakpoints=tuple(refined), interval_means=means,
                             cost=cost, n_samples=t)


def snap_level(value: float) -> float:
    """Nearest multiple of 10 mmHg, clamped to the protocol range [-80, 0]."""
    snapped = float(np.round(value / 10.0) * 10.0)
    return float(min(LEVEL_MAX_MMHG, max(LEVEL_MIN_MMHG, snapped)))


def step_targets(trace: Waveform, cp: ChangepointResult) -> np.ndarray:
    """Per-sample step levels: each interval takes its snapped mean."""
    if cp.n_samples != len(trace):
        raise ValueError("changepoint result does not match trace length")
    out = np.empty(len(trace), dtype=np.float64)
    bounds = [0] + list(cp.breakpoints) + [len(trace)]
    for mean, (a, b) in zip(cp.interval_means, zip(bounds, bounds[1:])):
        out[a:b] = snap_level(mean)
    return out


def map_class(level_mmhg: float) -> SeverityClass:
    """Severity class for a snapped step level.

    0 and -10 are mild, -20 and -30 moderate, -40 and deeper severe. Intermediate
    values map monotonically (more negative never grades less severe).
    """
    if level_mmhg > 0:
        raise ValueError(f"invalid LBNP level {level_mmhg} (must be <= 0 mmHg)")
    if level_mmhg >= -10.0:
        return SeverityClass.MILD
    if level_mmhg >= -30.0:
        return SeverityClass.MODERATE
    return SeverityClass.SEVERE


def label_segments(session: Session, segments: list, n_changepoints: int | None = None,
                   levels: np.ndarray | None = None) -> list:
    """Label each segment with the step level at its midpoint sample.

    ``levels`` may carry a precomputed per-sample step sequence; otherwise it
    is derived from the session's reference trace using ``n_changepoints``
    (falling back to the manifest's ``n_changepoints`` entry).
    """
    if levels is None:
        ref = session.channel(LBNP_REF)
        if n_changepoints is None:
            n_changepoints = session.meta.get("n_changepoints")
        if n_changepoints is None:
            raise DataError(
                f"session {session.subject_id}/{session.trial_id}: number of changepoints "
                "not given and not present in the manifest")
        cp = find_changepoints_decimated(ref, int(n_changepoints))
        levels = step_targets(ref, cp)
    out = []
    for seg in segments:
        if seg.subject_id and seg.subject_id != session.subject_id:
            raise ValueError("segment does not belong to this session")
        mid = min(seg.midpoint_sample, levels.size - 1)
        level = float(levels[mid])
        out.append(LabeledSegment(segment=seg, label=map_class(level), lbnp_level_mmhg=level))
    return out


def write_labels_csv(path, labeled: list) -> None:
    """Label export: one row per segment with provenance columns."""
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "trial_id", "channel", "start_time_s",
                         "lbnp_level_mmHg", "class"])
        for item in labeled:
            seg = item.segment
            writer.writerow([seg.subject_id, seg.trial_id, seg.channel,
                             f"{seg.start_time_s:.6f}", f"{item.lbnp_level_mmhg:.1f}",
                             int(item.label)])
    os.replace(tmp, path)
