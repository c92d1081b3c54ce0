"""Neural-network building blocks with hand-written forward and backward
passes (float64, batch-first). Each layer caches what its backward pass
needs; parameter gradients land in ``grads`` keyed like ``params``.

Convolutions are 'valid' (no padding, stride 1) and run as im2col + matmul.
The unfolded input columns are memoized by input-array identity, which makes
repeated evaluations against the same batch (finite-difference sweeps, the
backward pass) cheap; do not mutate an input array in place between calls.
Pooling is 2x2 stride 2 with the trailing row/column dropped on odd sizes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def uniform_fan_in(shape, fan_in, rng, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base: parameter-free layers reuse these empty dicts."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def l2_weights(self):
        """Arrays included in the weight-decay penalty (biases excluded)."""
        return [v for k, v in self.params.items() if k == "w"]


class Conv1D(Layer):
    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float64):
        super().__init__()
        self.kernel = kernel
        self.params = {
            "w": uniform_fan_in((out_channels, in_channels, kernel),
                                in_channels * kernel, rng, dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cols = None
        self._cols_src = None
        self._in_shape = None

    def _unfold(self, x):
        if self._cols_src is not x:
            b, c, length = x.shape
            out_len = length - self.kernel + 1
            windows = sliding_window_view(x, self.kernel, axis=2)  # (B,C,L',K)
            self._cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)
                                              ).reshape(b * out_len, c * self.kernel)
            self._cols_src = x
            self._in_shape = x.shape
        return self._cols

    def forward(self, x):
        # x: (B, C, L) -> (B, O, L - K + 1)
        b, _, length = x.shape
        out_len = length - self.kernel + 1
        cols = self._unfold(x)
        out_ch = self.params["w"].shape[0]
        y = cols @ self.params["w"].reshape(out_ch, -1).T + self.params["b"]
        return y.reshape(b, out_len, out_ch).transpose(0, 2, 1)

    def backward(self, dy, need_dx: bool = True):
        b, out_ch, out_len = dy.shape
        _, in_ch, length = self._in_shape
        k = self.kernel
        dy_cols = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(b * out_len, out_ch)
        self.grads["w"][...] = (dy_cols.T @ self._cols).reshape(out_ch, in_ch, k)
        self.grads["b"][...] = dy_cols.sum(axis=0)
        if not need_dx:
            return None
        dyp = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1)))
        dy_windows = sliding_window_view(dyp, k, axis=2)  # (B, O, L, K)
        cols = np.ascontiguousarray(dy_windows.transpose(0, 2, 1, 3)
                                    ).reshape(b * length, out_ch * k)
        w_flipped = self.params["w"][:, :, ::-1]  # (O, C, K)
        w_mat = np.ascontiguousarray(w_flipped.transpose(0, 2, 1)).reshape(out_ch * k, in_ch)
        return (cols @ w_mat).reshape(b, length, in_ch).transpose(0, 2, 1)


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float64):
        super().__init__()
        self.kernel = kernel
        self.params = {
            "w": uniform_fan_in((out_channels, in_channels, kernel, kernel),
                                in_channels * kernel * kernel, rng, dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cols = None
        self._cols_src = None
        self._in_shape = None

    def _unfold(self, x):
        if self._cols_src is not x:
            b, c, h, w = x.shape
            k = self.kernel
            ho, wo = h - k + 1, w - k + 1
            buf = np.empty((b, ho, wo, c, k, k), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    buf[:, :, :, :, i, j] = x[:, :, i:i + ho, j:j + wo].transpose(0, 2, 3, 1)
            self._cols = buf.reshape(b * ho * wo, c * k * k)
            self._cols_src = x
            self._in_shape = x.shape
        return self._cols

    def forward(self, x):
        # x: (B, C, H, W) -> (B, O, H - K + 1, W - K + 1)
        b, _, h, w = x.shape
        k = self.kernel
        ho, wo = h - k + 1, w - k + 1
        cols = self._unfold(x)
        out_ch = self.params["w"].shape[0]
        y = cols @ self.params["w"].reshape(out_ch, -1).T + self.params["b"]
        return y.reshape(b, ho, wo, out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy, need_dx: bool = True):
        b, out_ch, ho, wo = dy.shape
        _, in_ch, h, w = self._in_shape
        k = self.kernel
        dy_cols = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * ho * wo, out_ch)
        self.grads["w"][...] = (dy_cols.T @ self._cols).reshape(out_ch, in_ch, k, k)
        self.grads["b"][...] = dy_cols.sum(axis=0)
        if not need_dx:
            return None
        # Scatter dy * W back over the k x k input taps; accumulate in a
        # channels-last buffer so the inner writes stay contiguous.
        dx_last = np.zeros((b, h, w, in_ch), dtype=dy.dtype)
        weights = self.params["w"]
        for i in range(k):
            for j in range(k):
                contrib = dy_cols @ weights[:, :, i, j]  # (B*Ho*Wo, C)
                dx_last[:, i:i + ho, j:j + wo, :] += contrib.reshape(b, ho, wo, in_ch)
        return np.ascontiguousarray(dx_last.transpose(0, 3, 1, 2))


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy, need_dx: bool = True):
        return dy * self._mask


class MaxPool2D(Layer):
    """2x2 stride-2 pooling; odd trailing rows/columns are dropped. Ties go
    to the first window element in row-major order, which keeps backward
    deterministic."""

    def __init__(self):
        super().__init__()
        self._shape = None
        self._masks = None

    def forward(self, x):
        self._shape = x.shape
        h2, w2 = x.shape[2] // 2, x.shape[3] // 2
        quads = (x[:, :, 0:h2 * 2:2, 0:w2 * 2:2], x[:, :, 0:h2 * 2:2, 1:w2 * 2:2],
                 x[:, :, 1:h2 * 2:2, 0:w2 * 2:2], x[:, :, 1:h2 * 2:2, 1:w2 * 2:2])
        out = np.maximum(np.maximum(quads[0], quads[1]),
                         np.maximum(quads[2], quads[3]))
        masks = []
        taken = np.zeros(out.shape, dtype=bool)
        for q in quads:
            m = (q == out) & ~taken
            taken |= m
            masks.append(m)
        self._masks = masks
        return out

    def backward(self, dy, need_dx: bool = True):
        h2, w2 = self._shape[2] // 2, self._shape[3] // 2
        dx = np.zeros(self._shape, dtype=dy.dtype)
        views = (dx[:, :, 0:h2 * 2:2, 0:w2 * 2:2], dx[:, :, 0:h2 * 2:2, 1:w2 * 2:2],
                 dx[:, :, 1:h2 * 2:2, 0:w2 * 2:2], dx[:, :, 1:h2 * 2:2, 1:w2 * 2:2])
        for view, mask in zip(views, self._masks):
            np.copyto(view, dy, where=mask)
        return dx


class GlobalAvgPool1D(Layer):
    def __init__(self):
        super().__init__()
        self._length = None

    def forward(self, x):
        self._length = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy, need_dx: bool = True):
        return np.repeat(dy[:, :, None], self._length, axis=2) / self._length


class GlobalAvgPool2D(Layer):
    def __init__(self):
        super().__init__()
        self._hw = None

    def forward(self, x):
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, dy, need_dx: bool = True):
        h, w = self._hw
        return np.broadcast_to(dy[:, :, None, None], dy.shape + (h, w)).copy() / (h * w)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float64):
        super().__init__()
        self.params = {
            "w": uniform_fan_in((in_features, out_features), in_features, rng, dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy, need_dx: bool = True):
        self.grads["w"][...] = self._x.T @ dy
        self.grads["b"][...] = dy.sum(axis=0)
        if not need_dx:
            return None
        return dy @ self.params["w"].T


PROB_CLAMP = 1e-12


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label_idx, sample_weights=None):
    """Mean weighted cross-entropy over a batch.

    Returns (loss, probs, dlogits, n_clamped); probabilities below
    ``PROB_CLAMP`` are clamped before the log and counted.
    """
    n = logits.shape[0]
    probs = softmax(logits)
    p_true = probs[np.arange(n), label_idx]
    n_clamped = int(np.sum(p_true < PROB_CLAMP))
    data = -np.log(np.maximum(p_true, PROB_CLAMP))
    if sample_weights is None:
        sample_weights = np.ones(n)
    loss = float(np.mean(sample_weights * data))
    dlogits = probs.copy()
    dlogits[np.arange(n), label_idx] -= 1.0
    dlogits *= (sample_weights / n)[:, None]
    return loss, probs, dlogits, n_clamped
