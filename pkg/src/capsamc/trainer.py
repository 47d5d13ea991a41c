"""Mini-batch SGD-with-momentum training with validation-based model selection."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import capsnet
from . import nncore as nn
from .dataio import FrameArrays, Splits
from .modsig import ModulationScheme

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "flip", "phase")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 250
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 30
    lr_decay: float = 0.1
    lr_period: int = 10
    early_stop_patience: int = 5
    seed: int = 0
    deterministic: bool = True
    normalize_input: bool = True
    weight_decay: float = 0.0
    augment: str = "none"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.augment not in AUGMENTATIONS:
            raise ValueError(f"augment must be one of {AUGMENTATIONS}, got {self.augment!r}")
        if self.max_epochs < 0 or self.lr_period < 1 or self.lr_decay <= 0:
            raise ValueError("max_epochs >= 0, lr_period >= 1 and lr_decay > 0 required")
        nn.OptimizerState(self.learning_rate, self.momentum)  # validates both

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_period)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    batch_loss: list[list[float]] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch] if self.best_epoch >= 0 else math.nan

    def reproducible(self) -> dict:
        """Everything except timings; identical across deterministic reruns."""
        d = asdict(self)
        d.pop("wall_time")
        return d

    def log_lines(self) -> list[str]:
        return [
            f"epoch={e} loss={l!r} val_acc={a!r} val_loss={v!r} lr={r!r}"
            for e, (l, a, v, r) in enumerate(zip(self.train_loss, self.val_accuracy, self.val_loss, self.learning_rate))
        ]


def label_map(config: capsnet.NetworkConfig) -> dict[int, int]:
    """Global scheme label -> output index of the model."""
    return {int(ModulationScheme.from_name(n)): i for i, n in enumerate(config.class_names)}


def to_model_labels(config: capsnet.NetworkConfig, labels: np.ndarray) -> np.ndarray:
    lm = label_map(config)
    missing = sorted({int(l) for l in np.unique(labels)} - set(lm))
    if missing:
        raise ValueError(
            "dataset contains schemes the model has no branch for: "
            + ", ".join(ModulationScheme(m).label for m in missing)
        )
    return np.array([lm[int(l)] for l in labels], dtype=np.int64)


def batches(n: int, batch_size: int) -> list[slice]:
    """Consecutive batch slices; the short tail is kept, but a lone trailing
    sample is folded into the previous batch because train-mode batch norm
    needs at least two samples."""
    edges = list(range(0, n, batch_size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] == 1:
        edges.pop(-2)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def predict_indices(model: capsnet.ModelState, iq: np.ndarray, chunk: int = 250) -> np.ndarray:
    return np.argmax(capsnet.infer(model, iq, chunk), axis=1)


def evaluate_split(model: capsnet.ModelState, data: FrameArrays, index_set, normalize: bool = True):
    """Overall accuracy and a per-class accuracy vector (NaN for absent classes).

    Classes are the model's output order.
    """
    idx = np.asarray(index_set, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot evaluate an empty index set")
    sub = data.subset(idx)
    if normalize:
        sub = sub.normalized()
    truth = to_model_labels(model.config, sub.labels)
    pred = predict_indices(model, sub.iq)
    per_class = np.full(model.config.branch_count, np.nan)
    for c in range(model.config.branch_count):
        mask = truth == c
        if mask.any():
            per_class[c] = float(np.mean(pred[mask] == c))
    return float(np.mean(pred == truth)), per_class


def rotate_phase(iq: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Multiply each ``(2, L)`` frame by ``exp(j * phase)``."""
    c = np.cos(phases).astype(iq.dtype)[:, None]
    s = np.sin(phases).astype(iq.dtype)[:, None]
    out = np.empty_like(iq)
    out[:, 0] = c * iq[:, 0] - s * iq[:, 1]
    out[:, 1] = s * iq[:, 0] + c * iq[:, 1]
    return out


def augment_batch(iq: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Training-time symmetry augmentation.

    ``flip`` negates I and Q independently with probability 1/2 each, i.e. a
    random choice among identity, conjugation, negation and negated
    conjugation.  Every constellation here is invariant under those maps and
    so is any CFO interval symmetric about zero.  ``phase`` applies a uniform
    random carrier phase.
    """
    if kind == "none":
        return iq
    if kind == "flip":
        signs = rng.choice(np.array([-1, 1], dtype=iq.dtype), size=(len(iq), 2, 1))
        return iq * signs
    if kind == "phase":
        return rotate_phase(iq, rng.uniform(0, 2 * np.pi, len(iq)))
    raise ValueError(f"unknown augmentation {kind!r}")


def _improves(report: TrainReport, acc: float, val_loss: float) -> bool:
    """Higher validation accuracy wins; equal accuracy is broken by lower
    validation loss, so a saturated accuracy still tracks the better model."""
    if report.best_epoch < 0 or acc > report.best_accuracy:
        return True
    return acc == report.best_accuracy and val_loss < report.val_loss[report.best_epoch]


class TrainingDiverged(FloatingPointError):
    pass


def _blas_limit(threads: int | None):
    from contextlib import nullcontext

    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def train(
    model: capsnet.ModelState,
    data: FrameArrays,
    splits: Splits,
    config: TrainConfig = TrainConfig(),
    *,
    dataset_tag: str = "",
    threads: int | None = None,
    progress=None,
) -> tuple[capsnet.ModelState, TrainReport]:
    """Train ``model`` in place; return a copy of the best-validation state.

    Each epoch shuffles the training split with a generator seeded from
    ``(seed, epoch)``, so reruns see the same order.  In deterministic mode
    BLAS is pinned to one thread.
    """
    report = TrainReport()
    if config.max_epochs == 0:
        return model.copy(), report
    if len(splits.validation) == 0:
        raise ValueError("training needs a non-empty validation split")
    train_data = data.subset(splits.train)
    val_data = data.subset(splits.validation)
    if config.normalize_input:
        train_data, val_data = train_data.normalized(), val_data.normalized()
    y_train = to_model_labels(model.config, train_data.labels)
    y_val = to_model_labels(model.config, val_data.labels)
    x_train = train_data.iq.astype(model.dtype, copy=False)
    opt = nn.OptimizerState(config.learning_rate, config.momentum)
    best = model.copy()
    since_best = 0
    with _blas_limit(1 if config.deterministic else threads):
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            opt.learning_rate = config.lr_at(epoch)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, epoch])))
            order = rng.permutation(len(y_train))
            losses = []
            for b, sl in enumerate(batches(len(order), config.batch_size)):
                idx = order[sl]
                xb = x_train[idx]
                xb = augment_batch(xb, config.augment, rng)
                _, cache = capsnet.forward(model, xb, train=True)
                grads, loss = capsnet.backward(model, cache, y_train[idx])
                del cache
                if config.weight_decay:
                    for name, g in grads.items():
                        if name.endswith(".weight"):
                            g += model.dtype.type(config.weight_decay) * model.params[name]
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {opt.learning_rate}")
                nn.sgdm_step(model.params, grads, opt)
                losses.append(loss)
            probs = capsnet.infer(model, val_data.iq.astype(model.dtype, copy=False))
            acc = float(np.mean(np.argmax(probs, axis=1) == y_val))
            val_loss = float(np.mean(nn.cross_entropy(probs, y_val)))
            report.batch_loss.append(losses)
            report.train_loss.append(float(np.mean(losses)))
            report.val_accuracy.append(acc)
            report.val_loss.append(val_loss)
            report.learning_rate.append(opt.learning_rate)
            report.steps.append(len(losses))
            report.wall_time.append(time.perf_counter() - t0)
            if _improves(report, acc, val_loss):
                report.best_epoch = epoch
                best = model.copy()
                since_best = 0
            else:
                since_best += 1
            log.info("epoch %d loss %.4f val_acc %.4f val_loss %.4f lr %g (%.1fs)", epoch, report.train_loss[-1],
                     acc, val_loss, opt.learning_rate, report.wall_time[-1])
            if progress is not None:
                progress(epoch, report)
            if since_best >= config.early_stop_patience:
                report.stopped_early = True
                break
    best.provenance = {
        "dataset": dataset_tag,
        "epoch": report.best_epoch,
        "val_accuracy": report.best_accuracy,
        "seed": config.seed,
    }
    return best, report
