"""Loss, Adam optimizer, and the two-phase training loop.

Phase 1 trains each residual branch on its binary class pair. Phase 2
composes the hybrid model and trains the custom CNN plus the fusion
projection, with the branch weights frozen by default (a flag enables
fine-tuning). Every epoch reports accuracy, macro precision/recall/F1, the
standard deviation of per-batch accuracy, and mean loss; stats append to a
JSONL training log.

All randomness (shuffle order, dropout masks) is a pure function of the run
seed and the absolute epoch index, so training resumed from a checkpoint
continues exactly as an uninterrupted run would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .data import ImageCache, SampleRecord, batches
from .errors import ConfigurationError, DataError, NumericsError
from .evaluation import ConfusionMatrix, metrics
from .fusion import HybridModel
from .graphs import BranchConfig, ModelGraph, build_branch
from .tensor import GradTape, Tensor, active_tape, backward

__all__ = ["cross_entropy", "Adam", "EpochStats", "run_training",
           "train_branches", "train_hybrid"]


def cross_entropy(probs: Tensor, labels: np.ndarray, *, name: str = "cross_entropy") -> Tensor:
    """Mean negative log-likelihood of the true classes.

    `probs` must be rows of probabilities (each summing to 1 within 1e-5),
    normally the output of :func:`hybridcnn.ops.softmax`. Probabilities are
    clamped to 1e-12 before the log. The backward rule is the fused
    softmax-cross-entropy gradient (probs - onehot) / N, applied to the
    pre-softmax logits when `probs` came from a softmax op, otherwise to
    `probs` itself.
    """
    if probs.ndim != 2:
        raise ConfigurationError(f"{name}: expected (N, K) probabilities, got {probs.shape}")
    n, k = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ConfigurationError(f"{name}: expected {n} labels, got shape {labels.shape}")
    row_sums = probs.data.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise ConfigurationError(f"{name}: probability rows do not sum to 1")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DataError(f"{name}: label {labels[bad[0]]} at index {bad[0]} outside [0, {k})")

    picked = np.clip(probs.data[np.arange(n), labels], 1e-12, None)
    loss_val = -np.log(picked).mean()
    out = Tensor(np.asarray(loss_val, dtype=probs.dtype))

    onehot = np.zeros_like(probs.data)
    onehot[np.arange(n), labels] = 1.0
    target = probs.softmax_src if probs.softmax_src is not None else probs

    def rule(g: np.ndarray):
        return [(probs.data - onehot) * (g / n)]

    tape = active_tape()
    if tape is not None:
        tape.record(out, (target,), rule, name)
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


class Adam:
    """Bias-corrected Adam; update = lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(m={}, v={})

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """One update over `params` in place; step counter advances once."""
        self.state.step += 1
        t = self.state.step
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for pname, tensor in params.items():
            g = grads[pname]
            if g.shape != tensor.data.shape:
                raise ConfigurationError(
                    f"gradient shape {g.shape} does not match parameter {pname} {tensor.data.shape}")
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {pname}")
            m = self.state.m.get(pname)
            if m is None:
                m = np.zeros_like(tensor.data)
                self.state.m[pname] = m
                self.state.v[pname] = np.zeros_like(tensor.data)
            v = self.state.v[pname]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def to_meta(self) -> dict:
        return {"algo": "adam", "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.state.step}

    @staticmethod
    def from_meta(meta: dict) -> "Adam":
        opt = Adam(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        opt.state.step = int(meta["step"])
        return opt


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              optimizer: Adam) -> Adam:
    """Functional spelling of :meth:`Adam.step`; returns the optimizer."""
    optimizer.step(params, grads)
    return optimizer


@dataclass
class EpochStats:
    """Per-epoch training report: accuracy, macro metrics, per-batch
    accuracy spread, and mean loss."""

    epoch: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    std_dev: float
    loss: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "std_dev": self.std_dev, "loss": self.loss}

    def table_line(self) -> str:
        return (f"{self.epoch:>5}  {100 * self.accuracy:>12.2f}  {100 * self.precision:>13.2f}  "
                f"{100 * self.recall:>10.2f}  {100 * self.f1:>12.2f}  {self.std_dev:>8.4f}")

    @staticmethod
    def table_header() -> str:
        return (f"{'Epoch':>5}  {'Accuracy (%)':>12}  {'Precision (%)':>13}  "
                f"{'Recall (%)':>10}  {'F1 (%)':>12}  {'Std Dev':>8}")


def _append_log(log_path: str | Path | None, payload: dict) -> None:
    if log_path is None:
        return
    p = Path(log_path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True) + "\n")


def run_training(model, records: list[SampleRecord], *, epochs: int,
                 batch_size: int = 32, lr: float = 0.001, seed: int = 0,
                 start_epoch: int = 0, optimizer: Adam | None = None,
                 log_path: str | Path | None = None, log_tag: str | None = None,
                 cache: ImageCache | None = None,
                 progress=None) -> tuple[list[EpochStats], Adam]:
    """Train `model` (a ModelGraph or HybridModel) on `records`.

    Accuracy and the confusion counts are accumulated on the fly, batch by
    batch, as the parameters move; that is what a training-progress report
    measures. Epoch indices are absolute so a resumed run replays the same
    shuffle and dropout streams as an uninterrupted one.
    """
    if epochs < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {epochs}")
    if not records and epochs > 0:
        raise DataError("no training records")
    optimizer = optimizer or Adam(lr=lr)
    params = model.trainable_parameters()
    h, w, _ = model.input_shape
    if cache is None:
        cache = ImageCache((h, w))
    num_classes = len(model.classes)

    stats: list[EpochStats] = []
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([seed, epoch, 7919])
        batch_accs = []
        loss_sum = 0.0
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        seen = 0
        for imgs, labels in batches(records, classes=model.classes, image_size=(h, w),
                                    batch_size=batch_size, seed=seed, epoch=epoch,
                                    cache=cache):
            with GradTape() as tape:
                logits = model.forward(Tensor(imgs), mode="train", rng=rng)
                probs = ops.softmax(logits)
                loss = cross_entropy(probs, labels)
            grads = backward(tape, loss)
            optimizer.step(params, {name: grads[t] for name, t in params.items()})

            preds = probs.data.argmax(axis=1)
            np.add.at(counts, (labels, preds), 1)
            batch_accs.append(float((preds == labels).mean()))
            loss_sum += loss.item() * len(labels)
            seen += len(labels)

        report = metrics(ConfusionMatrix(counts, model.classes))
        st = EpochStats(
            epoch=epoch + 1,
            accuracy=float(np.trace(counts)) / seen,
            precision=report.macro_precision,
            recall=report.macro_recall,
            f1=report.macro_f1,
            std_dev=float(np.std(batch_accs)),
            loss=loss_sum / seen,
        )
        stats.append(st)
        payload = st.to_dict()
        if log_tag:
            payload["phase"] = log_tag
        _append_log(log_path, payload)
        if progress is not None:
            progress(st)
    return stats, optimizer


def subset_for_task(records: list[SampleRecord], task_classes: tuple[str, ...],
                    ) -> list[SampleRecord]:
    """Records whose label belongs to the binary task pair."""
    chosen = [r for r in records if r.label in task_classes]
    for cls in task_classes:
        if not any(r.label == cls for r in chosen):
            raise DataError(f"no records for class {cls}; cannot train this branch")
    return chosen


def train_branches(records: list[SampleRecord], configs: tuple[BranchConfig, BranchConfig],
                   *, input_shape: tuple[int, int, int], epochs: int = 5,
                   batch_size: int = 32, lr: float = 0.001, seed: int = 0,
                   log_path: str | Path | None = None,
                   progress=None) -> dict[str, tuple[ModelGraph, list[EpochStats], Adam]]:
    """Phase 1: train each binary branch on its class pair only.

    Labels are remapped to {0, 1} through the branch graph's own class
    vocabulary, which checkpoints record. `progress`, if given, is called as
    progress(task, epoch_stats).
    """
    results = {}
    for offset, config in enumerate(configs):
        graph = build_branch(config, input_shape=input_shape)
        graph.initialize(seed + 1 + offset)
        chosen = subset_for_task(records, graph.classes)
        task_progress = (lambda st, task=config.task: progress(task, st)) if progress else None
        stats, opt = run_training(
            graph, chosen, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
            log_path=log_path, log_tag=f"branch:{config.task}", progress=task_progress)
        results[config.task] = (graph, stats, opt)
    return results


def train_hybrid(records: list[SampleRecord], model: HybridModel, *, epochs: int = 5,
                 batch_size: int = 32, lr: float = 0.001, seed: int = 0,
                 freeze_branches: bool = True, start_epoch: int = 0,
                 optimizer: Adam | None = None, log_path: str | Path | None = None,
                 cache: ImageCache | None = None,
                 progress=None) -> tuple[list[EpochStats], Adam]:
    """Phase 2: train the custom CNN and fusion projection.

    Branches stay bitwise frozen by default (their forward runs in inference
    mode, off the tape); `freeze_branches=False` fine-tunes them jointly.
    Requesting zero epochs returns immediately with empty stats.
    """
    model.freeze_branches = freeze_branches
    return run_training(model, records, epochs=epochs, batch_size=batch_size, lr=lr,
                        seed=seed, start_epoch=start_epoch, optimizer=optimizer,
                        log_path=log_path, log_tag="hybrid", cache=cache,
                        progress=progress)
