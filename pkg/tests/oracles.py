"""Independent reference implementations used to validate the library.

Everything here is deliberately brute-force: direct DFT sums, exhaustive
enumeration of breakpoint placements, pairwise rank statistics, and
per-threshold recounting. None of it shares code with the package.
"""

import itertools

import numpy as np


def direct_dft(x):
    """O(N^2) discrete Fourier transform."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return basis @ x


def direct_onesided_power(frame, window):
    """One-sided power of a windowed frame with the library's documented
    scaling: interior bins doubled, total divided by the window length."""
    xw = np.asarray(frame, dtype=np.float64) * np.asarray(window, dtype=np.float64)
    spectrum = direct_dft(xw)
    n = xw.size
    half = n // 2
    power = np.abs(spectrum[:half + 1]) ** 2 / n
    power[1:half] *= 2.0
    return power


def brute_force_changepoints(x, n):
    """Exhaustive minimum over all placements of n breakpoints.

    Returns (best_breakpoints, best_cost) where ties resolve to the
    lexicographically smallest breakpoint tuple.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.size

    def cost_of(bounds):
        total = 0.0
        for a, b in zip(bounds, bounds[1:]):
            seg = x[a:b]
            total += float(np.sum((seg - seg.mean()) ** 2))
        return total

    best = None
    best_cost = np.inf
    for combo in itertools.combinations(range(1, t), n):
        c = cost_of((0,) + combo + (t,))
        if c < best_cost - 1e-12:
            best_cost = c
            best = combo
    return best, best_cost


def mann_whitney_auroc(pos_scores, neg_scores):
    """Pairwise AUROC: fraction of (pos, neg) pairs ranked correctly, ties half.

    Computed as an exact integer numerator over 2*P*N so it can be compared
    bitwise against any implementation using the same final division.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    greater = int(np.sum(pos[:, None] > neg[None, :]))
    ties = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * greater + ties) / (2 * pos.size * neg.size)


def threshold_sweep_auprc(y_true, scores):
    """Average precision by recounting TP/FP from scratch at each distinct
    threshold (descending), summed as precision-weighted recall increments."""
    y_true = np.asarray(y_true, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        raise ValueError("no positives")
    area = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= thr
        tp = int(np.sum(predicted & y_true))
        fp = int(np.sum(predicted & ~y_true))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def central_difference_gradient(loss_fn, params, h=1e-4):
    """Finite-difference gradient of loss_fn(params) for a flat float array."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        hi = loss_fn(params)
        params[i] = orig - h
        lo = loss_fn(params)
        params[i] = orig
        grad[i] = (hi - lo) / (2 * h)
    return grad
