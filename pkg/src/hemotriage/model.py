"""Two-branch late-fusion classifier with hand-written training.

Branch 1 runs 1-D convolutions over the stacked instantaneous-frequency and
spectral-entropy sequences (2 x 261); branch 2 runs 2-D convolutions over
the log spectrogram (33 x 261). Their embeddings are concatenated and fed to
a small dense head producing three logits. Single-branch ablation modes keep
the head input width fixed by zero-padding the missing embedding.

Log-spectrum computation is part of the model's own forward path (see
``featurize``): a checkpoint pins the featurization parameters next to the
architecture hash, so a loaded model reproduces its training-time
preprocessing exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import container
from .annotation import SeverityClass
from .errors import DataError
from .layers import (
    Conv1D, Conv2D, Dense, GlobalAvgPool1D, GlobalAvgPool2D, MaxPool2D, ReLU,
    softmax, softmax_cross_entropy,
)
from .timefreq import (
    DEFAULT_FRAME_COUNT, DEFAULT_LOG_FLOOR_REL, DEFAULT_WINDOW_LEN, TFFeatures,
    featurize_segment,
)

MODES = ("fused", "branch1_only", "branch2_only")

N_CLASSES = 3
BRANCH1_DIM = 32
BRANCH2_DIM = 16
HEAD_HIDDEN = 32

DEFAULT_FEATURIZATION = {
    "window_len": DEFAULT_WINDOW_LEN,
    "frame_count": DEFAULT_FRAME_COUNT,
    "window": "hann",
    "log_floor_rel": DEFAULT_LOG_FLOOR_REL,
}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer hyper-parameters; the learning rate follows a piecewise
    schedule lr(e) = lr0 * drop_factor ** floor(e / drop_period)."""

    l2: float = 0.1
    batch_size: int = 10
    lr0: float = 0.001
    lr_drop_factor: float = 0.1
    lr_drop_period: int = 20
    max_epochs: int = 80
    seed: int = 0
    class_weighting: bool = False

    def __post_init__(self):
        if min(self.l2, self.lr0, self.lr_drop_factor) < 0 or self.lr0 == 0:
            raise ValueError("rates must be positive (l2 may be zero)")
        if self.batch_size < 1 or self.lr_drop_period < 1 or self.max_epochs < 0:
            raise ValueError("schedule parameters must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_drop_factor ** (epoch // self.lr_drop_period)

    def to_dict(self) -> dict:
        return {
            "l2": self.l2, "batch_size": self.batch_size, "lr0": self.lr0,
            "lr_drop_factor": self.lr_drop_factor, "lr_drop_period": self.lr_drop_period,
            "max_epochs": self.max_epochs, "seed": self.seed,
            "class_weighting": self.class_weighting,
        }


@dataclass(frozen=True)
class Prediction:
    class_probs: np.ndarray   # (3,), sums to 1
    predicted: SeverityClass  # argmax, ties to the lowest class
    logits: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64))
        if abs(float(probs.sum()) - 1.0) > 1e-6 or np.any(probs < 0):
            raise ValueError("class probabilities must be non-negative and sum to 1")


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # Per-layer streams: shared layers get identical weights across modes.
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def architecture_spec(mode: str, featurization: dict) -> dict:
    spec = {
        "family": "two-branch-late-fusion",
        "mode": mode,
        "n_classes": N_CLASSES,
        "branch1": [["conv1d", 2, 16, 5], ["relu"], ["conv1d", 16, 32, 5],
                    ["relu"], ["gap1d"]] if mode != "branch2_only" else [],
        "branch2": [["conv2d", 1, 8, 3], ["relu"], ["maxpool2"], ["conv2d", 8, 16, 3],
                    ["relu"], ["maxpool2"], ["gap2d"]] if mode != "branch1_only" else [],
        "head": [["dense", BRANCH1_DIM + BRANCH2_DIM, HEAD_HIDDEN], ["relu"],
                 ["dense", HEAD_HIDDEN, N_CLASSES]],
        "featurization": dict(featurization),
    }
    return spec


def architecture_hash(spec: dict) -> str:
    payload = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class FusionModel:
    """Trainable two-branch classifier; ``mode`` is fixed at construction."""

    def __init__(self, mode: str = "fused", seed: int = 0, featurization: dict | None = None,
                 dtype: str = "float64"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        self.mode = mode
        self.rng_seed = seed
        self.dtype = np.dtype(dtype)
        self.featurization = dict(featurization or DEFAULT_FEATURIZATION)
        self.norm_stats = None
        self.clamp_count = 0

        dt = self.dtype
        self.branch1 = []
        self.branch2 = []
        if mode != "branch2_only":
            self.branch1 = [
                ("b1_conv1", Conv1D(2, 16, 5, _layer_rng(seed, "b1_conv1"), dt)),
                ("b1_relu1", ReLU()),
                ("b1_conv2", Conv1D(16, 32, 5, _layer_rng(seed, "b1_conv2"), dt)),
                ("b1_relu2", ReLU()),
                ("b1_gap", GlobalAvgPool1D()),
            ]
        if mode != "branch1_only":
            self.branch2 = [
                ("b2_conv1", Conv2D(1, 8, 3, _layer_rng(seed, "b2_conv1"), dt)),
                ("b2_relu1", ReLU()),
                ("b2_pool1", MaxPool2D()),
                ("b2_conv2", Conv2D(8, 16, 3, _layer_rng(seed, "b2_conv2"), dt)),
                ("b2_relu2", ReLU()),
                ("b2_pool2", MaxPool2D()),
                ("b2_gap", GlobalAvgPool2D()),
            ]
        self.head = [
            ("head_dense1", Dense(BRANCH1_DIM + BRANCH2_DIM, HEAD_HIDDEN,
                                  _layer_rng(seed, "head_dense1"), dt)),
            ("head_relu", ReLU()),
            ("head_dense2", Dense(HEAD_HIDDEN, N_CLASSES,
                                  _layer_rng(seed, "head_dense2"), dt)),
        ]

    # -- parameter plumbing ------------------------------------------------

    def named_layers(self):
        return list(self.branch1) + list(self.branch2) + list(self.head)

    def named_params(self):
        for lname, layer in self.named_layers():
            for pname in sorted(layer.params):
                yield f"{lname}/{pname}", layer.params[pname], layer.grads[pname]

    def l2_penalty(self, l2: float) -> float:
        if l2 == 0:
            return 0.0
        total = 0.0
        for _, layer in self.named_layers():
            for w in layer.l2_weights():
                total += float(np.sum(w * w))
        return 0.5 * l2 * total

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p, _ in self.named_params()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        offset = 0
        for _, p, _ in self.named_params():
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValueError("parameter vector size mismatch")

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, _, g in self.named_params()])

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())

    def arch_spec(self) -> dict:
        return architecture_spec(self.mode, self.featurization)

    def arch_hash(self) -> str:
        return architecture_hash(self.arch_spec())

    # -- normalization -----------------------------------------------------

    def fit_normalization(self, features: list) -> None:
        """Scalar mean/std per input stream, from training data only."""
        def stats(arrays):
            total = 0.0
            total_sq = 0.0
            count = 0
            for a in arrays:
                total += float(a.sum())
                total_sq += float((a * a).sum())
                count += a.size
            mean = total / count
            var = max(total_sq / count - mean * mean, 0.0)
            std = float(np.sqrt(var))
            return mean, (std if std > 1e-12 else 1.0)

        self.norm_stats = {}
        if self.mode != "branch2_only":
            if_m, if_s = stats([f.inst_freq_hz for f in features])
            se_m, se_s = stats([f.spectral_entropy for f in features])
            self.norm_stats.update(if_mean=if_m, if_std=if_s, se_mean=se_m, se_std=se_s)
        if self.mode != "branch1_only":
            sp_m, sp_s = stats([f.log_spectrogram for f in features])
            self.norm_stats.update(sp_mean=sp_m, sp_std=sp_s)

    def assemble_inputs(self, features: list):
        """Normalized branch inputs: (x1 (N,2,F), x2 (N,1,BINS,F)); an unused
        branch gets None."""
        if self.norm_stats is None:
            raise ValueError("normalization stats not fitted; train or load first")
        ns = self.norm_stats
        x1 = x2 = None
        if self.mode != "branch2_only":
            x1 = np.stack([
                np.stack([(f.inst_freq_hz - ns["if_mean"]) / ns["if_std"],
                          (f.spectral_entropy - ns["se_mean"]) / ns["se_std"]])
                for f in features]).astype(self.dtype)
        if self.mode != "branch1_only":
            x2 = np.stack([(f.log_spectrogram - ns["sp_mean"]) / ns["sp_std"]
                           for f in features])[:, None, :, :].astype(self.dtype)
        return x1, x2

    # -- forward / backward ------------------------------------------------

    def forward_arrays(self, x1, x2) -> np.ndarray:
        """Logits for a batch of normalized inputs."""
        if x1 is not None and (x1.ndim != 3 or x1.shape[1] != 2):
            raise ValueError(f"branch-1 input must be (B, 2, frames), got {x1.shape}")
        if x2 is not None and (x2.ndim != 4 or x2.shape[1] != 1):
            raise ValueError(f"branch-2 input must be (B, 1, bins, frames), got {x2.shape}")
        n = x1.shape[0] if x1 is not None else x2.shape[0]
        if self.branch1:
            if x1 is None:
                raise ValueError("mode requires branch-1 input")
            h = x1
            for _, layer in self.branch1:
                h = layer.forward(h)
            emb1 = h
        else:
            emb1 = np.zeros((n, BRANCH1_DIM), dtype=self.dtype)
        if self.branch2:
            if x2 is None:
                raise ValueError("mode requires branch-2 input")
            h = x2
            for _, layer in self.branch2:
                h = layer.forward(h)
            emb2 = h
        else:
            emb2 = np.zeros((n, BRANCH2_DIM), dtype=self.dtype)
        h = np.concatenate([emb1, emb2], axis=1)
        for _, layer in self.head:
            h = layer.forward(h)
        return h

    def backward_arrays(self, dlogits, l2: float = 0.0) -> None:
        """Parameter gradients for the last forward batch (data term), plus
        the weight-decay contribution."""
        g = dlogits
        for _, layer in reversed(self.head):
            g = layer.backward(g)
        g1, g2 = g[:, :BRANCH1_DIM], g[:, BRANCH1_DIM:]
        # The first layer of each branch has no upstream: skip its input grad.
        for grad, branch in ((g1, self.branch1), (g2, self.branch2)):
            if not branch:
                continue
            h = grad
            stack = list(reversed(branch))
            for i, (_, layer) in enumerate(stack):
                h = layer.backward(h, need_dx=i < len(stack) - 1)
        if l2:
            for _, layer in self.named_layers():
                if "w" in layer.params:
                    layer.grads["w"] += l2 * layer.params["w"]

    def loss_on_arrays(self, x1, x2, label_idx, l2: float = 0.0,
                       sample_weights=None, with_grads: bool = False):
        """Total batch loss (mean cross-entropy + weight penalty); gradients
        optional."""
        logits = self.forward_arrays(x1, x2)
        ce, probs, dlogits, clamped = softmax_cross_entropy(logits, label_idx,
                                                            sample_weights)
        self.clamp_count += clamped
        loss = ce + self.l2_penalty(l2)
        if with_grads:
            self.backward_arrays(dlogits, l2=l2)
        return loss, probs

    # -- public inference --------------------------------------------------

    def featurize(self, seg) -> TFFeatures:
        """The model-owned featurization stage (pinned by the checkpoint)."""
        return featurize_segment(seg, **self.featurization)

    def predict_features(self, features: list):
        x1, x2 = self.assemble_inputs(features)
        logits = self.forward_arrays(x1, x2)
        probs = softmax(logits)
        predicted = probs.argmax(axis=1) + 1  # ties resolve to the lowest class
        return probs, predicted, logits

    def forward(self, feats: TFFeatures) -> Prediction:
        probs, predicted, logits = self.predict_features([feats])
        return Prediction(class_probs=probs[0], predicted=SeverityClass(int(predicted[0])),
                          logits=logits[0])

    def predict_segment(self, seg) -> Prediction:
        return self.forward(self.featurize(seg))


def loss(pred: Prediction, label: SeverityClass, model: FusionModel | None = None,
         l2: float = 0.0) -> float:
    """Cross-entropy of one prediction plus the model's weight penalty."""
    p_true = float(pred.class_probs[int(label) - 1])
    if p_true < 1e-12:
        p_true = 1e-12
        if model is not None:
            model.clamp_count += 1
    data = -np.log(p_true)
    penalty = model.l2_penalty(l2) if model is not None else 0.0
    return float(data + penalty)


def labels_to_idx(labels) -> np.ndarray:
    idx = np.asarray([int(lb) - 1 for lb in labels], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= N_CLASSES):
        raise ValueError("labels must be severity classes 1..3")
    return idx


def train(model: FusionModel, features: list, labels, config: TrainConfig):
    """SGD with the piecewise schedule; deterministic for a fixed seed.

    Returns per-epoch history rows (epoch, lr, mean loss, train accuracy).
    Normalization statistics are fitted here, on the training set only.
    """
    label_idx = labels_to_idx(labels)
    counts = np.bincount(label_idx, minlength=N_CLASSES)
    if np.any(counts == 0):
        raise ValueError("degenerate training set: every class must be present")

    model.fit_normalization(features)
    x1, x2 = model.assemble_inputs(features)
    n = label_idx.size

    sample_weights = None
    if config.class_weighting:
        class_w = n / (N_CLASSES * counts.astype(np.float64))
        sample_weights = class_w[label_idx]

    rng = np.random.default_rng([config.seed, 0x5d0])
    history = []
    for epoch in range(config.max_epochs):
        lr = config.lr_at(epoch)
        perm = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            batch = perm[start:start + config.batch_size]
            bx1 = x1[batch] if x1 is not None else None
            bx2 = x2[batch] if x2 is not None else None
            bw = sample_weights[batch] if sample_weights is not None else None
            batch_loss, probs = model.loss_on_arrays(bx1, bx2, label_idx[batch],
                                                     l2=config.l2, sample_weights=bw,
                                                     with_grads=True)
            losses.append(batch_loss)
            correct += int(np.sum(probs.argmax(axis=1) == label_idx[batch]))
            for _, p, g in model.named_params():
                p -= lr * g
        history.append({
            "epoch": epoch,
            "lr": lr,
            "mean_loss": float(np.mean(losses)),
            "train_accuracy": correct / n,
        })
    return history


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: FusionModel, path, extra_meta: dict | None = None) -> None:
    arrays = {f"param/{name}": p for name, p, _ in model.named_params()}
    meta = {
        "kind": "hemotriage-checkpoint",
        "version": CHECKPOINT_VERSION,
        "mode": model.mode,
        "dtype": model.dtype.name,
        "rng_seed": model.rng_seed,
        "arch": model.arch_spec(),
        "arch_hash": model.arch_hash(),
        "featurization": model.featurization,
        "norm_stats": model.norm_stats,
        "clamp_count": model.clamp_count,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    container.save(path, arrays, meta)


def load_checkpoint(path) -> FusionModel:
    arrays, meta = container.load(path)
    if meta.get("kind") != "hemotriage-checkpoint":
        raise DataError(f"{path}: not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model = FusionModel(mode=meta["mode"], seed=meta["rng_seed"],
                        featurization=meta["featurization"],
                        dtype=meta.get("dtype", "float64"))
    expected = model.arch_hash()
    if meta.get("arch_hash") != expected:
        raise DataError(
            f"{path}: architecture hash mismatch (checkpoint {meta.get('arch_hash')!r}, "
            f"library {expected!r}); refusing to load")
    for name, p, _ in model.named_params():
        key = f"param/{name}"
        if key not in arrays:
            raise DataError(f"{path}: missing parameter {name!r}")
        if arrays[key].shape != p.shape:
            raise DataError(f"{path}: parameter {name!r} has shape {arrays[key].shape}, "
                            f"expected {p.shape}")
        p[...] = arrays[key]
    model.norm_stats = meta.get("norm_stats")
    model.clamp_count = int(meta.get("clamp_count", 0))
    return model
