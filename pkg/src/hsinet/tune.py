"""Random grid search with stratified cross-validated scoring.

Each draw samples every axis independently and uniformly from its
declared set or integer range; regularization and learning-rate axes are
sampled as integer powers of ten. Scoring trains one network per fold on
the remaining folds and averages the held-out accuracy.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import augment, net
from .core import Dataset, LabeledSet, ValidationError, class_counts

DEFAULT_SIGMA_CHOICES = (1.0, 1.67, 2.33, 3.0, 3.67, 4.33, 5.0)


class TuningError(RuntimeError):
    """No fold of any configuration could be evaluated."""


@dataclass(frozen=True)
class SearchSpace:
    """Axis domains for the random search."""

    num_kernels_choices: tuple[int, ...] = (4, 8, 16, 32)
    kernel_size_range: tuple[int, int] = (2, 91)
    stride_range: tuple[int, int] = (1, 4)
    lambda_exponent_range: tuple[int, int] = (-4, 4)
    eta_exponent_range: tuple[int, int] = (-4, -1)
    sigma_choices: tuple[float, ...] = DEFAULT_SIGMA_CHOICES
    num_draws: int = 50
    folds: int = 10

    def __post_init__(self) -> None:
        if not self.num_kernels_choices or not self.sigma_choices:
            raise ValidationError("choice axes must be non-empty")
        for lo, hi in (self.kernel_size_range, self.stride_range,
                       self.lambda_exponent_range, self.eta_exponent_range):
            if lo > hi:
                raise ValidationError(f"empty range [{lo}, {hi}]")
        if self.num_draws < 1:
            raise ValidationError("num_draws must be >= 1")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")

    def contains(self, hyper: net.HyperParams, sigma: float) -> bool:
        def in_range(v, rng):
            return rng[0] <= v <= rng[1]

        def is_power(v, rng):
            if v <= 0:
                return False
            n = round(np.log10(v))
            return in_range(n, rng) and np.isclose(v, 10.0**n)

        return (
            hyper.num_kernels in self.num_kernels_choices
            and in_range(hyper.kernel_size, self.kernel_size_range)
            and in_range(hyper.stride, self.stride_range)
            and is_power(hyper.lambda1, self.lambda_exponent_range)
            and is_power(hyper.lambda2, self.lambda_exponent_range)
            and is_power(hyper.eta, self.eta_exponent_range)
            and any(np.isclose(sigma, s) for s in self.sigma_choices)
        )


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    mean_accuracy: float
    hyper: net.HyperParams
    sigma: float
    seed: int


def random_configs(
    space: SearchSpace, seed, base: net.HyperParams | None = None
) -> list[tuple[net.HyperParams, float]]:
    """Draw ``space.num_draws`` configurations; duplicates are allowed.

    Axes are consumed in a fixed order (kernels, kernel size, stride,
    lambda1, lambda2, eta, sigma) so a seed pins the whole list. Fields
    not searched (momentum, batch size, epochs, patience) are copied from
    ``base``.
    """
    base = base or net.HyperParams()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(space.num_draws):
        nk = int(rng.choice(space.num_kernels_choices))
        ks = int(rng.integers(space.kernel_size_range[0], space.kernel_size_range[1] + 1))
        stride = int(rng.integers(space.stride_range[0], space.stride_range[1] + 1))
        lo, hi = space.lambda_exponent_range
        lam1 = 10.0 ** int(rng.integers(lo, hi + 1))
        lam2 = 10.0 ** int(rng.integers(lo, hi + 1))
        elo, ehi = space.eta_exponent_range
        eta = 10.0 ** int(rng.integers(elo, ehi + 1))
        sigma = float(rng.choice(space.sigma_choices))
        hyper = replace(
            base, num_kernels=nk, kernel_size=ks, stride=stride,
            lambda1=lam1, lambda2=lam2, eta=eta,
        )
        out.append((hyper, sigma))
    return out


def _fold_assignment(labeled: LabeledSet, folds: int, rng) -> np.ndarray:
    """Stratified fold id per entry: shuffle each class, deal round-robin."""
    assignment = np.zeros(len(labeled), dtype=np.int64)
    for k in np.unique(labeled.labels):
        idx = np.nonzero(labeled.labels == k)[0]
        perm = rng.permutation(len(idx))
        assignment[idx[perm]] = np.arange(len(idx)) % folds
    return assignment


def cross_validate(
    dataset: Dataset,
    labeled: LabeledSet,
    hyper: net.HyperParams,
    opts: augment.AugmentOptions,
    folds: int,
    seed,
    threads: int = 1,
) -> float:
    """Mean held-out accuracy over a stratified k-fold split of ``labeled``.

    The fold count is reduced to the smallest per-class entry count when
    classes are tiny (never below 2). A fold whose training part lost an
    entire class is skipped with a warning; if every fold is skipped a
    TuningError is raised. The held-out fold also serves as the early
    stopping monitor, and its pixels read spectra by the same rule as
    test pixels of the active learning setting.
    """
    if folds < 2:
        raise ValidationError("folds must be >= 2")
    if len(labeled) == 0:
        raise ValidationError("cannot cross-validate an empty labeled set")
    counts = class_counts(labeled, dataset.num_classes)
    smallest = int(counts[counts > 0].min())
    effective = max(2, min(folds, smallest))
    if effective < folds:
        warnings.warn(f"reducing {folds} folds to {effective} (smallest class has {smallest})")

    hyper = replace(hyper, kernel_size=min(hyper.kernel_size, dataset.cube.bands))
    root = np.random.SeedSequence(seed)
    assign_rng = np.random.default_rng(root.spawn(1)[0])
    assignment = _fold_assignment(labeled, effective, assign_rng)
    fold_seqs = root.spawn(effective)

    source = augment.prediction_spectrum_source(dataset, opts, threads=threads)
    scores = []
    for f in range(effective):
        held = assignment == f
        train_lab = labeled.subset(~held)
        val_lab = labeled.subset(held)
        if len(val_lab) == 0:
            continue
        train_counts = class_counts(train_lab, dataset.num_classes)
        starved = (counts > 0) & (train_counts == 0)
        if starved.any():
            warnings.warn(f"fold {f}: class lost from training part, skipping")
            continue
        fold_seed = int(fold_seqs[f].generate_state(1, np.uint64)[0])
        fold_opts = replace(opts, seed=fold_seed)
        fold_hyper = replace(hyper, seed=fold_seed)
        trainset = augment.assemble_training_set(dataset, train_lab, fold_opts, threads=threads)
        val_x = augment.apply_rescale(
            source.spectra_at(val_lab.rows, val_lab.cols), trainset.rescale
        )
        onehot = np.zeros((len(val_lab), dataset.num_classes))
        onehot[np.arange(len(val_lab)), val_lab.labels - 1] = 1.0
        valset = augment.TrainingSet(val_x, onehot, trainset.rescale)
        params, _ = net.train(
            trainset, valset, fold_hyper, dataset.cube.bands, dataset.num_classes
        )
        pred, _ = net.predict(params, val_x)
        scores.append(float((pred == val_lab.labels).mean()))
    if not scores:
        raise TuningError("every cross-validation fold was skipped")
    return float(np.mean(scores))


def rgs_cv(
    dataset: Dataset,
    labeled: LabeledSet,
    space: SearchSpace,
    opts: augment.AugmentOptions,
    seed,
    base_hyper: net.HyperParams | None = None,
    threads: int = 1,
) -> tuple[net.HyperParams, float, list[LeaderboardRow]]:
    """Evaluate every drawn configuration; the best mean accuracy wins.

    Ties keep the earliest draw. The leaderboard contains one row per
    evaluated (non-skipped) draw, sorted by mean accuracy descending.
    """
    draws = random_configs(space, seed, base=base_hyper)
    eval_seqs = np.random.SeedSequence(seed).spawn(len(draws))
    scored: list[tuple[float, int, net.HyperParams, float, int]] = []
    for i, (hyper, sigma) in enumerate(draws):
        cfg_opts = replace(opts, sigma=sigma)
        cfg_seed = int(eval_seqs[i].generate_state(1, np.uint64)[0])
        try:
            score = cross_validate(
                dataset, labeled, hyper, cfg_opts, space.folds, cfg_seed, threads=threads
            )
        except TuningError as exc:
            warnings.warn(f"draw {i} skipped: {exc}")
            continue
        scored.append((score, i, hyper, sigma, cfg_seed))
    if not scored:
        raise TuningError("no configuration could be scored")

    best = max(scored, key=lambda t: (t[0], -t[1]))
    ordered = sorted(scored, key=lambda t: (-t[0], t[1]))
    leaderboard = [
        LeaderboardRow(rank=r + 1, mean_accuracy=s, hyper=h, sigma=sg, seed=sd)
        for r, (s, _, h, sg, sd) in enumerate(ordered)
    ]
    return best[2], best[3], leaderboard


def write_leaderboard_csv(rows: list[LeaderboardRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rank", "mean_acc", "num_kernels", "kernel_size", "stride",
             "lambda1", "lambda2", "eta", "sigma", "seed"]
        )
        for row in rows:
            h = row.hyper
            writer.writerow(
                [row.rank, repr(row.mean_accuracy), h.num_kernels, h.kernel_size,
                 h.stride, repr(h.lambda1), repr(h.lambda2), repr(h.eta),
                 repr(row.sigma), row.seed]
            )
