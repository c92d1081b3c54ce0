"""Subject-stratified cross-validation and classification metrics.

AUROC uses trapezoidal integration over distinct score thresholds with ties
contributing one half, accumulated in exact integer arithmetic so the result
equals the pairwise rank statistic bit for bit. AUPRC uses the step-wise
convention (precision evaluated at each achieved recall level, summed over
recall increments). Sensitivity/specificity come from the argmax decision.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .annotation import label_segments
from .errors import DataError
from .model import FusionModel, TrainConfig, train
from .timefreq import FeatureCache, featurization_params_hash, featurize_segment
from .waveform import segment as segment_waveform

N_CLASSES = 3


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every subject to exactly one fold."""

    k: int
    assignments: dict  # subject_id -> fold index
    seed: int

    def __post_init__(self):
        folds = set(self.assignments.values())
        if folds and (min(folds) < 0 or max(folds) >= self.k):
            raise ValueError("fold indices out of range")
        sizes = self.fold_sizes()
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes must be within one subject: {sizes}")

    def fold_sizes(self) -> list:
        sizes = [0] * self.k
        for fold in self.assignments.values():
            sizes[fold] += 1
        return sizes

    def test_subjects(self, fold: int) -> list:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_subjects(self, fold: int) -> list:
        return sorted(s for s, f in self.assignments.items() if f != fold)


def make_folds(subjects: list, k: int = 3, seed: int = 0) -> FoldPlan:
    """Seeded random partition into k folds of near-equal subject counts."""
    subjects = sorted(set(subjects))
    if k < 1 or k > len(subjects):
        raise ValueError(f"need at least k={k} subjects, got {len(subjects)}")
    rng = np.random.default_rng([seed, 0xF01d])
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    assignments = {}
    base, extra = divmod(len(subjects), k)
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        for subject in order[start:start + size]:
            assignments[subject] = fold
        start += size
    return FoldPlan(k=k, assignments=assignments, seed=seed)


# --------------------------------------------------------------------------
# Binary curves and areas
# --------------------------------------------------------------------------

def _threshold_groups(y_true, scores):
    """Descending distinct thresholds with cumulative TP/FP counts."""
    y_true = np.asarray(y_true, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_true = y_true[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) if scores.size > 1 else np.array([], dtype=np.int64)
    last = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(sorted_true)[last]
    fp = (last + 1) - tp
    thresholds = sorted_scores[last]
    return thresholds, tp.astype(np.int64), fp.astype(np.int64)


def binary_roc(y_true, scores):
    """ROC points plus AUROC. The area accumulates the integer trapezoid
    numerator (equivalently: correctly ranked pairs, ties counted half) and
    divides once, so it is exact."""
    y_true = np.asarray(y_true, dtype=bool)
    pos = int(y_true.sum())
    neg = int(y_true.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    thresholds, tp, fp = _threshold_groups(y_true, scores)
    tp_prev = np.concatenate([[0], tp[:-1]])
    fp_prev = np.concatenate([[0], fp[:-1]])
    numerator = int(np.sum((fp - fp_prev) * (tp + tp_prev)))
    auroc = numerator / (2 * pos * neg)
    tpr = np.concatenate([[0.0], tp / pos])
    fpr = np.concatenate([[0.0], fp / neg])
    thr = np.concatenate([[np.inf], thresholds])
    return thr, fpr, tpr, auroc


def binary_pr(y_true, scores):
    """Precision-recall points plus area (step-wise: sum of precision at each
    achieved recall times the recall increment)."""
    y_true = np.asarray(y_true, dtype=bool)
    pos = int(y_true.sum())
    if pos == 0:
        raise ValueError("PR needs at least one positive")
    thresholds, tp, fp = _threshold_groups(y_true, scores)
    precision = tp / (tp + fp)
    recall = tp / pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    auprc = float(np.sum((recall - recall_prev) * precision))
    return thresholds, recall, precision, auprc


def _one_vs_rest(scores, labels, area_fn):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray([int(lb) for lb in labels], dtype=np.int64)
    per_class = {}
    curves = {}
    flags = []
    for cls in range(1, N_CLASSES + 1):
        y = labels == cls
        if y.sum() == 0 or y.sum() == y.size:
            per_class[cls] = None
            curves[cls] = None
            flags.append(f"class_{cls}_skipped_degenerate")
            continue
        curve = area_fn(y, scores[:, cls - 1])
        curves[cls] = curve
        per_class[cls] = curve[-1]
    valid = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(valid)) if valid else float("nan")
    return per_class, mean, curves, flags


def auroc_ovr(scores, labels):
    """Per-class one-vs-rest AUROC and their mean; degenerate classes are
    skipped with a flag, never silently."""
    per_class, mean, curves, flags = _one_vs_rest(scores, labels, binary_roc)
    return {"per_class": per_class, "mean": mean, "curves": curves, "flags": flags}


def auprc_ovr(scores, labels):
    per_class, mean, curves, flags = _one_vs_rest(scores, labels, binary_pr)
    return {"per_class": per_class, "mean": mean, "curves": curves, "flags": flags}


def classification_report(preds, labels):
    """Confusion matrix (rows true, columns predicted) and macro one-vs-rest
    sensitivity, specificity, F1. Zero-denominator cells read 0 and flag."""
    preds = np.asarray([int(p) for p in preds], dtype=np.int64)
    labels = np.asarray([int(lb) for lb in labels], dtype=np.int64)
    if preds.size == 0 or preds.size != labels.size:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t - 1, p - 1] += 1

    flags = []
    sens, spec, f1s = [], [], []
    total = confusion.sum()
    for c in range(N_CLASSES):
        tp = confusion[c, c]
        fn = confusion[c, :].sum() - tp
        fp = confusion[:, c].sum() - tp
        tn = total - tp - fn - fp

        def ratio(num, den, name):
            if den == 0:
                flags.append(f"class_{c + 1}_{name}_zero_denominator")
                return 0.0
            return float(num / den)

        sensitivity = ratio(tp, tp + fn, "sensitivity")
        specificity = ratio(tn, tn + fp, "specificity")
        precision = ratio(tp, tp + fp, "precision")
        f1 = (2 * precision * sensitivity / (precision + sensitivity)
              if precision + sensitivity > 0 else 0.0)
        if precision + sensitivity == 0:
            flags.append(f"class_{c + 1}_f1_zero_denominator")
        sens.append(sensitivity)
        spec.append(specificity)
        f1s.append(f1)

    return {
        "confusion_matrix": confusion,
        "per_class_sensitivity": sens,
        "per_class_specificity": spec,
        "per_class_f1": f1s,
        "macro_sensitivity": float(np.mean(sens)),
        "macro_specificity": float(np.mean(spec)),
        "macro_f1": float(np.mean(f1s)),
        "flags": flags,
    }


# --------------------------------------------------------------------------
# Cross-validation driver
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    fold_plan: FoldPlan
    folds: list = field(default_factory=list)  # one dict per fold
    mean_metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def finalize(self):
        keys = ("auroc_mean", "auprc_mean", "macro_f1", "macro_sensitivity",
                "macro_specificity")
        self.mean_metrics = {
            key: float(np.mean([fold["metrics"][key] for fold in self.folds]))
            for key in keys
        }
        return self

    def to_json_dict(self) -> dict:
        def fold_payload(fold):
            payload = {
                "fold": fold["fold"],
                "test_subjects": fold["test_subjects"],
                "train_subjects": fold["train_subjects"],
                "counts": fold["counts"],
                "metrics": fold["metrics"],
                "confusion_matrix": fold["report"]["confusion_matrix"].tolist(),
                "flags": fold["flags"],
            }
            return payload

        return {
            "kind": "hemotriage-eval-report",
            "k": self.fold_plan.k,
            "fold_seed": self.fold_plan.seed,
            "fold_assignments": dict(sorted(self.fold_plan.assignments.items())),
            "folds": [fold_payload(f) for f in self.folds],
            "mean": self.mean_metrics,
            "mean_percent": {k: 100.0 * v for k, v in self.mean_metrics.items()},
            "metadata": self.metadata,
        }


def leakage_audit(fold_plan: FoldPlan, sessions: list) -> None:
    """Every subject must land in exactly one fold; train/test subject sets
    must be disjoint in every fold."""
    session_subjects = {s.subject_id for s in sessions}
    missing = session_subjects - set(fold_plan.assignments)
    if missing:
        raise DataError(f"subjects missing from fold plan: {sorted(missing)}")
    for fold in range(fold_plan.k):
        train_set = set(fold_plan.train_subjects(fold))
        test_set = set(fold_plan.test_subjects(fold))
        if train_set & test_set:
            raise DataError(f"fold {fold}: train/test subject overlap {train_set & test_set}")
        if not test_set:
            raise DataError(f"fold {fold}: empty test fold")


def _prepare_fold_data(sessions, subjects, mode, channel, window_s, overlap_s,
                       cache: FeatureCache | None, feat_params: dict):
    """Segment, label, and featurize every trial of the given subjects."""
    features, labels, provenance = [], [], []
    for session in sessions:
        if session.subject_id not in subjects:
            continue
        wave = session.channel(channel)
        segs = segment_waveform(wave, window_s=window_s, overlap_s=overlap_s,
                                mode=mode, subject_id=session.subject_id,
                                trial_id=session.trial_id)
        labeled = label_segments(session, segs)

        def compute(seg):
            return featurize_segment(seg, **feat_params)

        if cache is not None:
            feats = cache.get_or_compute([item.segment for item in labeled], compute)
        else:
            feats = [compute(item.segment) for item in labeled]
        for item, f in zip(labeled, feats):
            features.append(f)
            labels.append(int(item.label))
            provenance.append((session.subject_id, session.trial_id,
                               item.segment.start_time_s))
    return features, labels, provenance


def run_cv(sessions: list, fold_plan: FoldPlan, train_config: TrainConfig,
           channel: str = "PPG", mode: str = "fused", window_s: float = 15.0,
           overlap_s: float = 10.0, feat_params: dict | None = None,
           cache_dir=None, model_dtype: str = "float64",
           progress=None) -> tuple[EvalReport, list]:
    """Full subject-stratified cross-validation.

    Train folds use overlapped segmentation, test folds non-overlapped.
    Normalization and training see only training subjects. Returns the
    report and one trained model per fold.
    """
    leakage_audit(fold_plan, sessions)
    feat_params = dict(feat_params or {})
    cache = None
    if cache_dir is not None:
        params_hash = featurization_params_hash(
            window_len=feat_params.get("window_len", 64),
            frame_count=feat_params.get("frame_count", 261),
            window=feat_params.get("window", "hann"),
            log_floor_rel=feat_params.get("log_floor_rel", 1e-10),
            window_s=window_s)
        cache = FeatureCache(cache_dir, params_hash)

    report = EvalReport(fold_plan=fold_plan)
    report.metadata = {
        "channel": channel,
        "mode": mode,
        "window_s": window_s,
        "overlap_s": overlap_s,
        "train_config": train_config.to_dict(),
        "model_dtype": model_dtype,
        "operating_point": "argmax",
        "averaging": "macro",
        "auprc_convention": "stepwise-precision-at-recall",
    }
    models = []
    for fold in range(fold_plan.k):
        train_subjects = set(fold_plan.train_subjects(fold))
        test_subjects = set(fold_plan.test_subjects(fold))
        if progress:
            progress(f"fold {fold}: train={sorted(train_subjects)} test={sorted(test_subjects)}")
        train_feats, train_labels, _ = _prepare_fold_data(
            sessions, train_subjects, "train", channel, window_s, overlap_s,
            cache, feat_params)
        test_feats, test_labels, test_prov = _prepare_fold_data(
            sessions, test_subjects, "test", channel, window_s, overlap_s,
            cache, feat_params)
        if not train_feats or not test_feats:
            raise DataError(f"fold {fold}: empty train or test set")
        for subject, _, _ in test_prov:
            if subject in train_subjects:
                raise DataError(f"fold {fold}: leakage, test segment from training subject")

        model = FusionModel(mode=mode, seed=train_config.seed + fold,
                            featurization=feat_params or None, dtype=model_dtype)
        history = train(model, train_feats, train_labels, train_config)
        if progress:
            progress(f"fold {fold}: trained {len(history)} epochs, "
                     f"final loss {history[-1]['mean_loss']:.4f}" if history else
                     f"fold {fold}: trained 0 epochs")
        probs, preds, _ = model.predict_features(test_feats)

        roc = auroc_ovr(probs, test_labels)
        pr = auprc_ovr(probs, test_labels)
        rep = classification_report(preds, test_labels)
        counts = {
            "train": {str(c): int(np.sum(np.asarray(train_labels) == c))
                      for c in range(1, N_CLASSES + 1)},
            "test": {str(c): int(np.sum(np.asarray(test_labels) == c))
                     for c in range(1, N_CLASSES + 1)},
        }
        counts["train"]["total"] = len(train_labels)
        counts["test"]["total"] = len(test_labels)
        report.folds.append({
            "fold": fold,
            "train_subjects": sorted(train_subjects),
            "test_subjects": sorted(test_subjects),
            "counts": counts,
            "metrics": {
                "auroc_mean": roc["mean"],
                "auroc_per_class": {str(k): v for k, v in roc["per_class"].items()},
                "auprc_mean": pr["mean"],
                "auprc_per_class": {str(k): v for k, v in pr["per_class"].items()},
                "macro_f1": rep["macro_f1"],
                "macro_sensitivity": rep["macro_sensitivity"],
                "macro_specificity": rep["macro_specificity"],
            },
            "report": rep,
            "roc_curves": roc["curves"],
            "pr_curves": pr["curves"],
            "flags": roc["flags"] + pr["flags"] + rep["flags"],
            "history": history,
        })
        models.append(model)
    report.finalize()
    return report, models


# --------------------------------------------------------------------------
# Exports
# --------------------------------------------------------------------------

def write_report_json(report: EvalReport, path) -> None:
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_curves_csv(report: EvalReport, out_dir) -> list:
    """One CSV per (fold, class, curve kind): threshold, x, y rows."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for fold in report.folds:
        for kind, curves, headers in (("roc", fold["roc_curves"], ("threshold", "fpr", "tpr")),
                                      ("pr", fold["pr_curves"], ("threshold", "recall", "precision"))):
            for cls, curve in curves.items():
                if curve is None:
                    continue
                thr, x, y = curve[0], curve[1], curve[2]
                path = os.path.join(out_dir, f"{kind}_fold{fold['fold']}_class{cls}.csv")
                tmp = f"{path}.tmp"
                with open(tmp, "w", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(headers)
                    for row in zip(thr, x, y):
                        writer.writerow([f"{v:.10g}" for v in row])
                os.replace(tmp, path)
                written.append(path)
    return written


def write_segment_counts_csv(report: EvalReport, path) -> None:
    """Per-fold class counts for train and test splits."""
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "class", *(f"fold{f['fold']}" for f in report.folds)])
        for split in ("train", "test"):
            for cls in ("1", "2", "3", "total"):
                writer.writerow([split, cls,
                                 *(f["counts"][split][cls] for f in report.folds)])
    os.replace(tmp, path)
