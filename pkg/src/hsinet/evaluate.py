"""Repeated-run evaluation, paired significance testing, and artifact export.

A "variant" is named by the subset of tricks it enables, written as a
subset of the string "RSL": R keeps the adjacent-weight penalty active,
S the smoothing augmentation, L the label propagation. The empty string
is the plain baseline (noise augmentation only).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from math import comb
from pathlib import Path

import numpy as np

from . import augment, net, sampling
from .core import Dataset, GroundTruth, LabeledSet, ShapeError, ValidationError

VARIANT_FLAGS = "RSL"


class ExperimentError(RuntimeError):
    """Failure inside one run, tagged with the run index and pipeline stage."""

    def __init__(self, run: int, stage: str, cause: BaseException):
        super().__init__(f"run {run}, stage {stage}: {cause}")
        self.run = run
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunResult:
    variant: str
    setting: str
    seed: int
    accuracy: float
    per_class_accuracy: np.ndarray
    predictions: np.ndarray
    test_rows: np.ndarray
    test_cols: np.ndarray


@dataclass(frozen=True)
class RunSummary:
    variant: str
    setting: str
    mean: float
    std: float
    n_runs: int


@dataclass(frozen=True)
class ComparisonResult:
    n_discordant: int
    wins_a: int
    p_value: float


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of exact matches."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ShapeError(f"prediction/truth shapes differ: {pred.shape} vs {truth.shape}")
    return float((pred == truth).mean())


def per_class_accuracy(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class hit rate; classes absent from the truth vector get NaN."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    out = np.full(num_classes, np.nan)
    for k in range(1, num_classes + 1):
        mask = truth == k
        if mask.any():
            out[k - 1] = float((pred[mask] == k).mean())
    return out


def exact_binomial_p(wins: int, n: int) -> float:
    """Two-sided exact binomial tail at rate 1/2, capped at 1.

    p = 2 * sum_{k >= max(wins, n - wins)} C(n, k) / 2^n. The count
    arithmetic is exact; only the final division rounds.
    """
    if not 0 <= wins <= n:
        raise ValidationError(f"wins={wins} outside [0, {n}]")
    m = max(wins, n - wins)
    tail = sum(comb(n, k) for k in range(m, n + 1))
    return min(1.0, 2 * tail / 2**n)


def binomial_compare(
    preds_a: np.ndarray, preds_b: np.ndarray, truth: np.ndarray
) -> ComparisonResult:
    """Sign test over the pixels where exactly one classifier is correct."""
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    truth = np.asarray(truth)
    if not preds_a.shape == preds_b.shape == truth.shape:
        raise ShapeError("prediction and truth vectors must have equal length")
    correct_a = preds_a == truth
    correct_b = preds_b == truth
    discordant = correct_a != correct_b
    n = int(discordant.sum())
    wins_a = int((correct_a & discordant).sum())
    return ComparisonResult(n, wins_a, exact_binomial_p(wins_a, n))


def apply_variant(
    variant: str, hyper: net.HyperParams, opts: augment.AugmentOptions
) -> tuple[net.HyperParams, augment.AugmentOptions]:
    """Translate an "RSL" subset into concrete hyperparameter/augmentation flags."""
    flags = set(variant)
    if not flags <= set(VARIANT_FLAGS):
        raise ValidationError(f"variant {variant!r} must be a subset of {VARIANT_FLAGS!r}")
    hyper = replace(hyper, lambda2=hyper.lambda2 if "R" in flags else 0.0)
    opts = replace(opts, use_smoothing="S" in flags, use_label_aug="L" in flags)
    return hyper, opts


def held_out_pixels(gt: GroundTruth, labeled: LabeledSet) -> tuple[np.ndarray, np.ndarray]:
    """Foreground pixels not in the sampled labeled set, row-major order."""
    mask = gt.labels > 0
    mask[labeled.rows, labeled.cols] = False
    return np.nonzero(mask)


def _as_training_set(
    spectra: np.ndarray, class_ids: np.ndarray, num_classes: int, params: augment.RescaleParams
) -> augment.TrainingSet:
    onehot = np.zeros((len(class_ids), num_classes))
    onehot[np.arange(len(class_ids)), class_ids - 1] = 1.0
    return augment.TrainingSet(spectra, onehot, params)


def run_single(
    dataset: Dataset,
    sampling_spec: sampling.SamplingSpec,
    variant: str,
    hyper: net.HyperParams,
    opts: augment.AugmentOptions,
    seed: int,
    val_fraction: float = 0.1,
    threads: int = 1,
    test_on_smoothed: bool | None = None,
    prediction_source: augment.SpectralCube | None = None,
) -> tuple[RunResult, net.NetworkParams, augment.RescaleParams, net.TrainReport]:
    """One sample/augment/train/predict cycle with every stage seeded by ``seed``."""
    hyper, opts = apply_variant(variant, hyper, opts)
    spec = replace(sampling_spec, seed=seed)
    opts = replace(opts, seed=seed)
    hyper = replace(hyper, seed=seed)

    labeled = sampling.sample(dataset.gt, spec)
    train_lab, val_lab = sampling.split_validation(labeled, val_fraction, seed)
    if len(val_lab) == 0:
        warnings.warn(
            "validation split is empty (all classes have a single entry); "
            "early stopping will monitor the training pixels themselves"
        )
        val_lab = train_lab

    trainset = augment.assemble_training_set(dataset, train_lab, opts, threads=threads)

    if prediction_source is None:
        prediction_source = augment.prediction_spectrum_source(
            dataset, opts, threads=threads, use_smoothed=test_on_smoothed
        )
    val_x = augment.apply_rescale(
        prediction_source.spectra_at(val_lab.rows, val_lab.cols), trainset.rescale
    )
    valset = _as_training_set(val_x, val_lab.labels, dataset.num_classes, trainset.rescale)

    params, report = net.train(trainset, valset, hyper, dataset.cube.bands, dataset.num_classes)

    test_rows, test_cols = held_out_pixels(dataset.gt, labeled)
    overlap = np.zeros((dataset.gt.height, dataset.gt.width), dtype=bool)
    overlap[labeled.rows, labeled.cols] = True
    assert not overlap[test_rows, test_cols].any(), "test pixels overlap the labeled set"

    test_x = augment.apply_rescale(
        prediction_source.spectra_at(test_rows, test_cols), trainset.rescale
    )
    pred, _ = net.predict(params, test_x)
    truth = dataset.gt.labels[test_rows, test_cols].astype(np.int64)
    result = RunResult(
        variant=variant,
        setting=opts.setting,
        seed=seed,
        accuracy=accuracy(pred, truth),
        per_class_accuracy=per_class_accuracy(pred, truth, dataset.num_classes),
        predictions=pred,
        test_rows=test_rows.astype(np.int64),
        test_cols=test_cols.astype(np.int64),
    )
    return result, params, trainset.rescale, report


def run_experiment(
    dataset: Dataset,
    sampling_spec: sampling.SamplingSpec,
    variant: str,
    hyper: net.HyperParams,
    opts: augment.AugmentOptions,
    n_runs: int,
    base_seed: int,
    val_fraction: float = 0.1,
    threads: int = 1,
    test_on_smoothed: bool | None = None,
    keep_models: bool = False,
) -> tuple[list[RunResult], RunSummary, list]:
    """Repeat ``run_single`` with seeds base_seed + r and summarize accuracies.

    The summary standard deviation uses the n-1 denominator and is 0 for a
    single run. The per-pixel spectrum source for prediction does not
    depend on the run seed, so it is computed once and shared.
    """
    if n_runs < 1:
        raise ValidationError("n_runs must be >= 1")
    _, applied_opts = apply_variant(variant, hyper, opts)
    source = augment.prediction_spectrum_source(
        dataset, applied_opts, threads=threads, use_smoothed=test_on_smoothed
    )
    results: list[RunResult] = []
    models: list = []
    for r in range(n_runs):
        stage = "sample/train/predict"
        try:
            result, params, rescale, _ = run_single(
                dataset, sampling_spec, variant, hyper, opts,
                seed=base_seed + r, val_fraction=val_fraction, threads=threads,
                test_on_smoothed=test_on_smoothed, prediction_source=source,
            )
        except net.DivergenceError as exc:
            raise ExperimentError(r, "train", exc) from exc
        except Exception as exc:
            raise ExperimentError(r, stage, exc) from exc
        results.append(result)
        if keep_models:
            models.append((params, rescale))
    accs = np.array([r.accuracy for r in results])
    std = float(accs.std(ddof=1)) if n_runs > 1 else 0.0
    summary = RunSummary(variant, results[0].setting, float(accs.mean()), std, n_runs)
    return results, summary, models


def export_map(
    predictions: np.ndarray, labeled: LabeledSet, gt: GroundTruth, path: str | Path
) -> None:
    """Write the classification map as a binary PGM (P5, maxval 255).

    Gray levels are class ids scaled by floor(255 / K); background stays
    black, labeled pixels show their true class, every other foreground
    pixel shows its prediction. ``predictions`` must cover exactly the
    foreground pixels outside the labeled set, in row-major order.
    """
    predictions = np.asarray(predictions)
    test_rows, test_cols = held_out_pixels(gt, labeled)
    if predictions.shape != test_rows.shape:
        raise ShapeError(
            f"{len(predictions)} predictions for {len(test_rows)} test pixels"
        )
    num_classes = max(gt.num_classes, 1)
    scale = 255 // num_classes
    img = np.zeros((gt.height, gt.width), dtype=np.uint8)
    img[labeled.rows, labeled.cols] = gt.labels[labeled.rows, labeled.cols] * scale
    img[test_rows, test_cols] = predictions.astype(np.uint16) * scale
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (gt.width, gt.height))
        fh.write(img.tobytes())


def read_pgm_header(path: str | Path) -> tuple[int, int, int]:
    """(width, height, maxval) of a binary PGM; used by round-trip checks."""
    raw = Path(path).read_bytes()
    fields = raw.split(b"\n", 3)
    if fields[0] != b"P5":
        raise ShapeError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in fields[1].split())
    return width, height, int(fields[2])


# ---------------------------------------------------------------------------
# CSV artifacts.
# ---------------------------------------------------------------------------

def write_results_csv(
    results: list[RunResult], summary: RunSummary, path: str | Path
) -> None:
    """Run rows followed by one summary row reusing the run/seed/accuracy columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "setting", "run", "seed", "accuracy"])
        for i, r in enumerate(results):
            writer.writerow([r.variant, r.setting, i, r.seed, repr(r.accuracy)])
        writer.writerow(
            [summary.variant, summary.setting, repr(summary.mean), repr(summary.std), summary.n_runs]
        )


def write_comparison_csv(
    name_a: str, name_b: str, comparison: ComparisonResult, path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant_a", "variant_b", "n_discordant", "wins_a", "p_value"])
        writer.writerow(
            [name_a, name_b, comparison.n_discordant, comparison.wins_a, repr(comparison.p_value)]
        )


def write_predictions_csv(result: RunResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "label"])
        for r, c, y in zip(result.test_rows, result.test_cols, result.predictions):
            writer.writerow([int(r), int(c), int(y)])


def load_predictions_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "label"]:
            raise ShapeError(f"{path}: unexpected predictions header {header}")
        for line in reader:
            if not line:
                continue
            rows.append(int(line[0]))
            cols.append(int(line[1]))
            labels.append(int(line[2]))
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
    )
