"""Confusion matrices, accuracy-vs-SNR curves and the dataset-shift experiment."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import capsnet, dataio, modsig, trainer
from .dataio import FrameArrays

# Full-scale figures reported for the original 112k-frame datasets; desk-scale
# runs cannot reproduce them and only carry them along for comparison.
REFERENCE_ACCURACY = {
    "ds1_on_ds1": 0.937357,
    "ds2_on_ds2": 0.974607,
    "ds1_on_ds2": 0.27925,
    "ds2_on_ds1": 0.262107,
    "mixed_on_mixed": 0.944975,
}
RANDOM_GUESS = 1 / 8


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / rows, np.nan)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist(),
                "accuracy": self.accuracy, "recall": [None if math.isnan(r) else r for r in self.recall()]}


def confusion_from_predictions(truth, pred, class_names) -> ConfusionMatrix:
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(truth), np.asarray(pred)), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def _predictions(model, data: FrameArrays, index_set, normalize: bool = True):
    idx = np.asarray(index_set, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot evaluate an empty index set")
    sub = data.subset(idx)
    if normalize:
        sub = sub.normalized()
    truth = trainer.to_model_labels(model.config, sub.labels)
    return truth, trainer.predict_indices(model, sub.iq), sub.snr_db


def confusion(model: capsnet.ModelState, data: FrameArrays, index_set) -> ConfusionMatrix:
    """Rows are true classes, columns predicted, both in the model's class order."""
    truth, pred, _ = _predictions(model, data, index_set)
    return confusion_from_predictions(truth, pred, model.config.class_names)


@dataclass
class SnrAccuracyCurve:
    edges: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    @property
    def nonempty(self) -> np.ndarray:
        return self.count > 0

    def points(self) -> list[tuple[float, float, int]]:
        """(bin centre, accuracy, count) for bins that hold any frames."""
        return [(float(c), float(a), int(n)) for c, a, n in zip(self.centers, self.accuracy, self.count) if n > 0]

    def overall(self) -> float:
        m = self.nonempty
        return float(np.sum(self.accuracy[m] * self.count[m]) / self.count[m].sum())


def snr_curve_from_predictions(truth, pred, snr_db, bin_width_db: float = 1.0) -> SnrAccuracyCurve:
    snr = np.asarray(snr_db, dtype=float)
    lo = math.floor(snr.min() / bin_width_db) * bin_width_db
    hi = math.floor(snr.max() / bin_width_db) * bin_width_db + bin_width_db
    nbins = int(round((hi - lo) / bin_width_db))
    edges = lo + bin_width_db * np.arange(nbins + 1)
    which = np.clip(np.floor((snr - lo) / bin_width_db).astype(int), 0, nbins - 1)
    correct = np.asarray(truth) == np.asarray(pred)
    count = np.bincount(which, minlength=nbins)
    hits = np.bincount(which, weights=correct, minlength=nbins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(count > 0, hits / np.maximum(count, 1), np.nan)
    return SnrAccuracyCurve(edges, acc, count)


def accuracy_vs_snr(model, data: FrameArrays, index_set, bin_width_db: float = 1.0) -> SnrAccuracyCurve:
    """Accuracy per labelled-SNR bin ``[lo + k*w, lo + (k+1)*w)``; empty bins carry NaN."""
    truth, pred, snr = _predictions(model, data, index_set)
    return snr_curve_from_predictions(truth, pred, snr, bin_width_db)


# -- experiments -------------------------------------------------------------------

@dataclass
class EvalResult:
    tag: str
    confusion: ConfusionMatrix
    curve: SnrAccuracyCurve | None = None
    extra: dict = field(default_factory=dict)


def evaluate(model, data: FrameArrays, index_set, tag: str, bin_width_db: float = 1.0) -> EvalResult:
    truth, pred, snr = _predictions(model, data, index_set)
    return EvalResult(
        tag,
        confusion_from_predictions(truth, pred, model.config.class_names),
        snr_curve_from_predictions(truth, pred, snr, bin_width_db),
    )


@dataclass
class ShiftReport:
    train_profile: str
    test_profile: str
    seed: int
    scale: int
    matched: EvalResult
    shifted: EvalResult
    train_report: trainer.TrainReport
    reference: dict = field(default_factory=lambda: dict(REFERENCE_ACCURACY))

    @property
    def matched_accuracy(self) -> float:
        return self.matched.confusion.accuracy

    @property
    def shifted_accuracy(self) -> float:
        return self.shifted.confusion.accuracy

    @property
    def gap(self) -> float:
        return self.matched_accuracy - self.shifted_accuracy

    def summary(self) -> dict:
        return {
            "train_profile": self.train_profile,
            "test_profile": self.test_profile,
            "seed": self.seed,
            "scale": self.scale,
            "matched_accuracy": self.matched_accuracy,
            "shifted_accuracy": self.shifted_accuracy,
            "gap": self.gap,
            "best_epoch": self.train_report.best_epoch,
            "reference_full_scale": self.reference,
        }


def shift_experiment(
    train_profile: modsig.DatasetProfile,
    test_profile: modsig.DatasetProfile,
    scale: int,
    seed: int,
    net_config: capsnet.NetworkConfig | None = None,
    train_config: trainer.TrainConfig | None = None,
    *,
    allow_overlap: bool = False,
    split_spec: dataio.SplitSpec | None = None,
) -> ShiftReport:
    """Train on ``scale`` frames of profile A; test on A's test split and on all
    of ``scale`` frames of profile B."""
    if not allow_overlap:
        modsig.check_disjoint_cfo(train_profile, test_profile)
    if train_profile.length != test_profile.length:
        raise ValueError("both profiles must produce frames of the same length")
    seeds = np.random.SeedSequence(seed).generate_state(3)
    data_a = FrameArrays.from_signals(modsig.generate(train_profile, scale, seed=int(seeds[0])))
    data_b = FrameArrays.from_signals(modsig.generate(test_profile, scale, seed=int(seeds[1])))
    if net_config is None:
        net_config = capsnet.scaled_config(train_profile.length, train_profile.schemes, seed=int(seeds[2]) % 2**31)
    train_config = train_config or trainer.TrainConfig(seed=seed)
    splits = dataio.split(data_a.labels, split_spec or dataio.SplitSpec(seed=seed))
    model = capsnet.build(net_config)
    best, report = trainer.train(model, data_a, splits, train_config, dataset_tag=train_profile.name)
    matched = evaluate(best, data_a, splits.test, f"{train_profile.name}_on_{train_profile.name}")
    shifted = evaluate(best, data_b, np.arange(len(data_b)), f"{train_profile.name}_on_{test_profile.name}")
    return ShiftReport(train_profile.name, test_profile.name, seed, scale, matched, shifted, report)


# -- report files ----------------------------------------------------------------------

def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name, *map(int, row)])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, names)


def write_curve_csv(curve: SnrAccuracyCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center_db", "accuracy", "count"])
        for c, a, n in curve.points():
            w.writerow([repr(c), repr(a), n])


def emit_report(results, out_dir, tag: str = "", seed: int | None = None, fmt: str = "csv") -> list[Path]:
    """Write one confusion CSV and one curve CSV per result plus a JSON summary.

    File names are ``<tag>_seed<seed>_<result tag>_{confusion,snr}.csv``.
    ``fmt="lines"`` writes the summary as JSON lines instead of one document.
    """
    if fmt not in ("csv", "lines"):
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(results, EvalResult):
        results = [results]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = "_".join(p for p in (tag, f"seed{seed}" if seed is not None else "") if p)
    written = []
    summary = []
    for r in results:
        base = f"{stem}_{r.tag}" if stem else r.tag
        cpath = out / f"{base}_confusion.csv"
        write_confusion_csv(r.confusion, cpath)
        written.append(cpath)
        if r.curve is not None:
            spath = out / f"{base}_snr.csv"
            write_curve_csv(r.curve, spath)
            written.append(spath)
        summary.append({"tag": r.tag, **r.confusion.to_dict(), **r.extra})
    spath = out / (f"{stem}_summary" if stem else "summary")
    if fmt == "csv":
        spath = spath.with_suffix(".json")
        spath.write_text(json.dumps(summary, indent=2) + "\n")
    else:
        spath = spath.with_suffix(".jsonl")
        spath.write_text("".join(json.dumps(s) + "\n" for s in summary))
    written.append(spath)
    return written
