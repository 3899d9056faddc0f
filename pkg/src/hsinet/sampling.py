"""Training-pixel selection under three regimes, plus a stratified validation split.

All samplers are pure functions of (ground truth, parameters, seed): the
same inputs reproduce the same labeled set entry for entry. Within each
class the chosen pixels are emitted in row-major order, classes ascending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SAMPLED, GroundTruth, LabeledSet, ValidationError

SAMPLING_MODES = ("fraction_per_class", "count_per_class", "patch_per_class")


@dataclass(frozen=True)
class SamplingSpec:
    """Which sampler to run and its single active parameter."""

    mode: str
    fraction: float | None = None
    count: int | None = None
    patch_size: int = 7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in SAMPLING_MODES:
            raise ValidationError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "fraction_per_class":
            if self.fraction is None or not 0.0 < self.fraction <= 1.0:
                raise ValidationError("fraction mode needs fraction in (0, 1]")
        elif self.mode == "count_per_class":
            if self.count is None or self.count < 1:
                raise ValidationError("count mode needs a positive count")
        else:
            if self.patch_size < 1 or self.patch_size % 2 == 0:
                raise ValidationError("patch_size must be odd and positive")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _class_pixels(gt: GroundTruth, k: int) -> tuple[np.ndarray, np.ndarray]:
    return np.nonzero(gt.labels == k)


def _build(rows: list, cols: list, labels: list) -> LabeledSet:
    return LabeledSet(
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        np.full(len(rows), SAMPLED, dtype=np.uint8),
    )


def _sorted_rowmajor(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.lexsort((cols, rows))


def sample_fraction(gt: GroundTruth, fraction: float, seed) -> LabeledSet:
    """Pick round(fraction * class size) pixels per class, at least one each."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    out_r, out_c, out_y = [], [], []
    for k in range(1, gt.num_classes + 1):
        rows, cols = _class_pixels(gt, k)
        total = len(rows)
        n = min(total, max(1, _round_half_up(fraction * total)))
        chosen = rng.choice(total, size=n, replace=False)
        rows, cols = rows[chosen], cols[chosen]
        order = _sorted_rowmajor(rows, cols)
        out_r.extend(rows[order])
        out_c.extend(cols[order])
        out_y.extend([k] * n)
    return _build(out_r, out_c, out_y)


def sample_count(gt: GroundTruth, count: int, seed) -> LabeledSet:
    """Pick min(count, class size) pixels per class without replacement."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out_r, out_c, out_y = [], [], []
    for k in range(1, gt.num_classes + 1):
        rows, cols = _class_pixels(gt, k)
        n = min(count, len(rows))
        chosen = rng.choice(len(rows), size=n, replace=False)
        rows, cols = rows[chosen], cols[chosen]
        order = _sorted_rowmajor(rows, cols)
        out_r.extend(rows[order])
        out_c.extend(cols[order])
        out_y.extend([k] * n)
    return _build(out_r, out_c, out_y)


def sample_patch_per_class(gt: GroundTruth, patch_size: int, seed) -> LabeledSet:
    """Pick one window per class centered on a random pixel of that class.

    Only same-class pixels inside the window are kept, so each class
    contributes between 1 and patch_size**2 entries. The window is clipped
    at the image borders.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValidationError("patch_size must be odd and positive")
    if patch_size > min(gt.height, gt.width):
        raise ValidationError("patch_size exceeds image dimensions")
    rng = np.random.default_rng(seed)
    half = patch_size // 2
    out_r, out_c, out_y = [], [], []
    for k in range(1, gt.num_classes + 1):
        rows, cols = _class_pixels(gt, k)
        center = int(rng.integers(len(rows)))
        cr, cc = int(rows[center]), int(cols[center])
        inside = (np.abs(rows - cr) <= half) & (np.abs(cols - cc) <= half)
        rows, cols = rows[inside], cols[inside]
        order = _sorted_rowmajor(rows, cols)
        out_r.extend(rows[order])
        out_c.extend(cols[order])
        out_y.extend([k] * len(rows))
    return _build(out_r, out_c, out_y)


def sample(gt: GroundTruth, spec: SamplingSpec) -> LabeledSet:
    if spec.mode == "fraction_per_class":
        return sample_fraction(gt, spec.fraction, spec.seed)
    if spec.mode == "count_per_class":
        return sample_count(gt, spec.count, spec.seed)
    return sample_patch_per_class(gt, spec.patch_size, spec.seed)


def split_validation(
    labeled: LabeledSet, val_fraction: float, seed
) -> tuple[LabeledSet, LabeledSet]:
    """Stratified split for early stopping.

    Per class, round(val_fraction * count) entries go to validation (at
    least one, at most count - 1); classes with a single entry stay
    entirely in the training part. Entry order within each part follows
    the input set.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val_fraction must be in (0, 1)")
    if len(labeled) == 0:
        raise ValidationError("cannot split an empty labeled set")
    rng = np.random.default_rng(seed)
    to_val = np.zeros(len(labeled), dtype=bool)
    for k in np.unique(labeled.labels):
        idx = np.nonzero(labeled.labels == k)[0]
        if len(idx) < 2:
            continue
        n_val = min(len(idx) - 1, max(1, _round_half_up(val_fraction * len(idx))))
        picked = rng.choice(len(idx), size=n_val, replace=False)
        to_val[idx[picked]] = True
    return labeled.subset(~to_val), labeled.subset(to_val)
