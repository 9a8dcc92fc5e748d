"""Confusion matrices, classification metrics, feature extraction, and 2-D
PCA of learned features.

The four metrics follow the usual one-vs-rest definitions: precision
TP/(TP+FP), recall TP/(TP+FN), F1 as their harmonic mean, accuracy as
trace/total. Macro averages are unweighted class means.

PCA runs power iteration with deflation on the feature covariance matrix.
Eigenvector signs are arbitrary, which is exactly what produces mirrored
projection plots; the default `max_abs_positive` convention flips each
direction so its largest-magnitude component is positive, removing the
mirroring deterministically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import ImageCache, SampleRecord, batches
from .errors import ConfigurationError, DataError
from .ops import softmax
from .tensor import Tensor

__all__ = [
    "ConfusionMatrix", "MetricsReport", "PcaProjection",
    "confusion", "metrics", "evaluate_model", "extract_features", "pca2",
]


@dataclass
class ConfusionMatrix:
    """K x K integer counts; rows are actual classes, columns predicted."""

    counts: np.ndarray
    classes: tuple[str, ...]

    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def confusion(labels: np.ndarray, predictions: np.ndarray, num_classes: int,
              classes: tuple[str, ...] | None = None) -> ConfusionMatrix:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise DataError(f"labels ({labels.shape}) and predictions ({predictions.shape}) differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError("label index out of range")
    if predictions.size and (predictions.min() < 0 or predictions.max() >= num_classes):
        raise DataError("prediction index out of range")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    if classes is None:
        classes = tuple(f"class_{i}" for i in range(num_classes))
    return ConfusionMatrix(counts, tuple(classes))


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    per_class: dict[str, dict[str, float]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    total: int
    degenerate: list[str] = field(default_factory=list)
    eval_seconds: float | None = None

    def to_dict(self) -> dict:
        d = {
            "classes": list(self.classes),
            "per_class": self.per_class,
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "accuracy": self.accuracy,
            "total": self.total,
        }
        if self.degenerate:
            d["degenerate_classes"] = self.degenerate
        if self.eval_seconds is not None:
            d["eval_seconds"] = self.eval_seconds
        return d


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest precision/recall/F1 per class plus macro averages.

    Zero-denominator cases are defined as 0; a class with neither actual nor
    predicted samples is additionally flagged as degenerate.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total <= 0:
        raise DataError("confusion matrix is empty")
    per_class: dict[str, dict[str, float]] = {}
    degenerate = []
    precisions, recalls, f1s = [], [], []
    for i, cls in enumerate(cm.classes):
        tp = int(counts[i, i])
        fp = int(counts[:, i].sum()) - tp
        fn = int(counts[i, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if tp + fp == 0 and tp + fn == 0:
            degenerate.append(cls)
        per_class[cls] = {"precision": precision, "recall": recall, "f1": f1}
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    k = len(cm.classes)
    return MetricsReport(
        classes=cm.classes,
        per_class=per_class,
        macro_precision=sum(precisions) / k,
        macro_recall=sum(recalls) / k,
        macro_f1=sum(f1s) / k,
        accuracy=float(np.trace(counts)) / total,
        total=total,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# model evaluation and feature extraction

def predict_records(model, records: list[SampleRecord], *, batch_size: int = 32,
                    custom_only: bool = False,
                    cache: ImageCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(labels, predictions) index arrays over `records` in manifest order."""
    h, w, _ = model.input_shape
    all_labels, all_preds = [], []
    for imgs, labels in batches(records, classes=model.classes, image_size=(h, w),
                                batch_size=batch_size, shuffle=False, cache=cache):
        kwargs = {"custom_only": True} if custom_only else {}
        logits = model.forward(Tensor(imgs), mode="infer", **kwargs)
        probs = softmax(logits)
        all_labels.append(labels)
        all_preds.append(probs.data.argmax(axis=1))
    return np.concatenate(all_labels), np.concatenate(all_preds)


def evaluate_model(model, records: list[SampleRecord], *, batch_size: int = 32,
                   custom_only: bool = False,
                   cache: ImageCache | None = None) -> tuple[MetricsReport, ConfusionMatrix]:
    """Full evaluation pass: confusion, metrics, and wall-clock timing."""
    if not records:
        raise DataError("no records to evaluate")
    started = time.perf_counter()
    labels, preds = predict_records(model, records, batch_size=batch_size,
                                    custom_only=custom_only, cache=cache)
    cm = confusion(labels, preds, len(model.classes), model.classes)
    report = metrics(cm)
    report.eval_seconds = time.perf_counter() - started
    return report, cm


def extract_features(model, records: list[SampleRecord], tap: str = "penultimate_dense",
                     *, batch_size: int = 32,
                     cache: ImageCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(N, D) feature matrix at the named tap plus label indices, rows in
    manifest order. Inference mode, so dropout is off and the result is
    deterministic for a fixed checkpoint."""
    taps = getattr(model, "taps", {})
    if tap not in taps:
        raise ConfigurationError(f"model has no feature tap {tap!r}; available: {sorted(taps)}")
    layer = taps[tap]
    h, w, _ = model.input_shape
    feats, all_labels = [], []
    for imgs, labels in batches(records, classes=model.classes, image_size=(h, w),
                                batch_size=batch_size, shuffle=False, cache=cache):
        _, captured = model.forward_collect(Tensor(imgs), (layer,), mode="infer")
        f = captured[layer].data
        feats.append(f.reshape(f.shape[0], -1))
        all_labels.append(labels)
    return np.concatenate(feats), np.concatenate(all_labels)


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PcaProjection:
    coords: np.ndarray            # (N, 2)
    directions: np.ndarray        # (2, D), unit length
    eigenvalues: np.ndarray       # (2,)
    explained_variance_ratio: np.ndarray  # (2,)


def apply_sign_convention(direction: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive; idempotent."""
    pivot = int(np.argmax(np.abs(direction)))
    return -direction if direction[pivot] < 0 else direction


def pca2(features: np.ndarray, sign_convention: str = "max_abs_positive", *,
         seed: int = 0, tol: float = 1e-10, max_iter: int = 1000) -> PcaProjection:
    """Top-2 principal directions by power iteration with deflation.

    With `sign_convention="none"` the direction signs depend on the seeded
    iteration start, which is the arbitrary-sign effect that mirrors
    projection plots; `max_abs_positive` (default) pins the signs.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 3 or d < 2:
        raise DataError(f"need at least 3 samples and 2 feature dims, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("features contain NaN/Inf")
    if sign_convention not in ("none", "max_abs_positive"):
        raise ConfigurationError(f"unknown sign convention {sign_convention!r}")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total_var = float(np.trace(cov))
    if total_var <= 0.0:
        raise DataError("features have zero variance; nothing to project")

    rng = np.random.default_rng(seed)
    directions = []
    eigenvalues = []
    deflated = cov
    for comp in range(2):
        v = rng.standard_normal(d)
        for prev in directions:
            v -= (v @ prev) * prev
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise DataError("degenerate iteration start; feature space too small")
        v /= norm
        for _ in range(max_iter):
            w = deflated @ v
            for prev in directions:
                w -= (w @ prev) * prev
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break  # exactly rank-deficient; keep the current direction
            w /= norm
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        lam = float(v @ (cov @ v))
        directions.append(v)
        eigenvalues.append(max(lam, 0.0))
        deflated = deflated - eigenvalues[-1] * np.outer(v, v)

    dirs = np.stack(directions)
    if sign_convention == "max_abs_positive":
        dirs = np.stack([apply_sign_convention(v) for v in dirs])
    coords = centered @ dirs.T
    eig = np.array(eigenvalues)
    return PcaProjection(coords=coords, directions=dirs, eigenvalues=eig,
                         explained_variance_ratio=eig / total_var)
