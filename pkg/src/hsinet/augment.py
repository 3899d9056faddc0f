"""Data-level augmentation: Gaussian noise, spatial smoothing, label propagation.

The three procedures compose into ``assemble_training_set``: the image is
noise-perturbed, optionally smoothed, the labeled set is optionally
expanded to pixel neighbors with a small-class bias, and every labeled
pixel contributes its spectrum from each available image variant. The
resulting matrix is rescaled to [0, 1] by one global affine map.

Seed handling: ``AugmentOptions.seed`` is split into two independent child
streams (noise first, label propagation second) via
``numpy.random.SeedSequence(seed).spawn(2)``, so the two stages never
share random state and the expansion can be replayed in isolation with
``expanded_labeled_set``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    LABEL_AUGMENTED,
    Dataset,
    LabeledSet,
    SpectralCube,
    ValidationError,
    class_counts,
)

SETTINGS = ("transductive", "non_overlapping")

# Moore neighborhood, row-major order.
MOORE_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


class EmptyTrainingSet(ValueError):
    """Raised when assembly is attempted with no labeled pixels."""


@dataclass(frozen=True)
class AugmentOptions:
    """Switches and parameters for the augmentation pipeline."""

    beta: float = 0.01
    sigma: float = 3.0
    use_smoothing: bool = True
    use_label_aug: bool = True
    setting: str = "transductive"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.setting not in SETTINGS:
            raise ValidationError(f"unknown learning setting {self.setting!r}")
        if self.use_smoothing and self.sigma <= 0:
            raise ValidationError("sigma must be positive when smoothing is enabled")
        if self.setting == "non_overlapping" and self.use_label_aug:
            raise ValidationError(
                "label augmentation would pull unlabeled pixels into the training "
                "set and is not available in the non_overlapping setting"
            )


@dataclass(frozen=True)
class RescaleParams:
    min_value: float
    max_value: float

    def __post_init__(self) -> None:
        if not self.max_value > self.min_value:
            raise ValidationError("max_value must exceed min_value")


@dataclass(frozen=True)
class TrainingSet:
    """Rescaled spectra with one-hot labels, ready for gradient descent."""

    spectra: np.ndarray
    labels: np.ndarray
    rescale: RescaleParams

    def __post_init__(self) -> None:
        spectra = np.ascontiguousarray(self.spectra, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if spectra.ndim != 2 or labels.ndim != 2 or len(spectra) != len(labels):
            raise ValidationError("spectra and labels must be matching 2-D arrays")
        ones = labels == 1.0
        if not (ones.sum(axis=1) == 1).all() or not ((labels == 0.0) | ones).all():
            raise ValidationError("every label row must be exactly one-hot")
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.spectra)

    def class_ids(self) -> np.ndarray:
        """1-based class id per row."""
        return np.argmax(self.labels, axis=1) + 1


def _child_seeds(seed) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    noise_seq, label_seq = np.random.SeedSequence(seed).spawn(2)
    return noise_seq, label_seq


def add_noise(cube: SpectralCube, beta: float, seed) -> SpectralCube:
    """Perturb every value with i.i.d. zero-mean Gaussian noise of scale beta."""
    if cube.kind != "original":
        raise ValidationError(f"noise is added to the original image, got {cube.kind!r}")
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(cube.data.shape, dtype=np.float32)
    return SpectralCube(cube.data + np.float32(beta) * noise, kind="noisy")


def _disc_offsets(sigma: float) -> list[tuple[int, int, float]]:
    """Offsets within Euclidean distance 3*sigma and their unnormalized weights."""
    radius = int(math.floor(3.0 * sigma))
    limit = (3.0 * sigma) ** 2
    offsets = []
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            d2 = di * di + dj * dj
            if d2 <= limit:
                offsets.append((di, dj, math.exp(-d2 / (2.0 * sigma))))
    return offsets


def _support_mask(support, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.float64)
    pts = np.asarray(list(support) if not isinstance(support, np.ndarray) else support)
    if pts.size == 0:
        raise ValidationError("support must be non-empty when given")
    pts = pts.reshape(-1, 2)
    if pts.min() < 0 or pts[:, 0].max() >= height or pts[:, 1].max() >= width:
        raise ValidationError("support pixel out of image bounds")
    mask[pts[:, 0], pts[:, 1]] = 1.0
    return mask


def _smooth_rows(
    data: np.ndarray,
    masked: np.ndarray | None,
    mask: np.ndarray | None,
    offsets: list[tuple[int, int, float]],
    r0: int,
    r1: int,
) -> np.ndarray:
    height, width, _ = data.shape
    acc = np.zeros((r1 - r0, width, data.shape[2]))
    norm = np.zeros((r1 - r0, width))
    for di, dj, w in offsets:
        si0, si1 = max(0, r0 + di), min(height, r1 + di)
        if si0 >= si1:
            continue
        oi0, oi1 = si0 - di - r0, si1 - di - r0
        jo0, jo1 = max(0, -dj), min(width, width - dj)
        if jo0 >= jo1:
            continue
        js0, js1 = jo0 + dj, jo1 + dj
        if mask is None:
            acc[oi0:oi1, jo0:jo1] += w * data[si0:si1, js0:js1]
            norm[oi0:oi1, jo0:jo1] += w
        else:
            acc[oi0:oi1, jo0:jo1] += w * masked[si0:si1, js0:js1]
            norm[oi0:oi1, jo0:jo1] += w * mask[si0:si1, js0:js1]
    covered = norm > 0
    safe = np.where(covered, norm, 1.0)
    out = acc / safe[:, :, None]
    # pixels whose neighborhood is empty (possible only with a support
    # restriction) keep their input spectrum
    if not covered.all():
        out = np.where(covered[:, :, None], out, data[r0:r1])
    return out.astype(np.float32)


def gaussian_smooth(
    cube: SpectralCube,
    sigma: float,
    support=None,
    threads: int = 1,
) -> SpectralCube:
    """Spatially smooth every band with a disc-truncated Gaussian filter.

    Each output pixel is the weighted average of the input pixels within
    Euclidean distance 3*sigma, weight exp(-d^2 / (2*sigma)), normalized
    by the weight sum actually present. When ``support`` (an iterable of
    (row, col) pairs) is given, only support pixels contribute; a pixel
    whose truncated neighborhood contains no support pixel is passed
    through unchanged.

    Bands are independent and pixels never share mutable state, so the
    image is cut into row blocks processed by ``threads`` workers. The
    result is bitwise identical for any thread count.
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    height, width = cube.height, cube.width
    offsets = _disc_offsets(sigma)
    data = cube.data.astype(np.float64)
    if support is not None:
        mask = _support_mask(support, height, width)
        masked = data * mask[:, :, None]
    else:
        mask = masked = None

    threads = max(1, int(threads))
    bounds = np.linspace(0, height, min(threads, height) + 1, dtype=int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]
    if len(chunks) == 1:
        out = _smooth_rows(data, masked, mask, offsets, 0, height)
    else:
        out = np.empty_like(cube.data)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                (r0, r1, pool.submit(_smooth_rows, data, masked, mask, offsets, r0, r1))
                for r0, r1 in chunks
            ]
            for r0, r1, fut in futures:
                out[r0:r1] = fut.result()
    return SpectralCube(out, kind="smoothed")


def neighbor_accept_prob(counts: np.ndarray) -> np.ndarray:
    """Per-class probability of keeping a proposed neighbor.

    Linear in the class count: 1 for the smallest class, 0 for the
    largest. When all counts are equal the ratio degenerates and the
    small-class limit (probability 1) applies.
    """
    counts = np.asarray(counts, dtype=np.float64)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return np.ones_like(counts)
    return 1.0 - (counts - lo) / (hi - lo)


def label_augment(
    labeled: LabeledSet, gt_dims: tuple[int, int], num_classes: int, seed
) -> LabeledSet:
    """Propagate each entry's label to its Moore neighbors, biased to small classes.

    Every in-bounds neighbor of entry (i, y_i) is kept independently with
    the class-count probability of y_i, computed once from the input set.
    Accepted neighbors are appended after the original entries with
    provenance ``label_augmented``; the same pixel may be added several
    times, possibly with conflicting labels.
    """
    if len(labeled) == 0:
        raise ValidationError("cannot augment an empty labeled set")
    if labeled.provenance.max() != 0 or labeled.provenance.min() != 0:
        raise ValidationError("label augmentation expects a purely sampled set")
    height, width = gt_dims
    probs = neighbor_accept_prob(class_counts(labeled, num_classes))
    rng = np.random.default_rng(seed)
    new_r, new_c, new_y = [], [], []
    for r, c, y in zip(labeled.rows, labeled.cols, labeled.labels):
        p = probs[y - 1]
        for dr, dc in MOORE_OFFSETS:
            nr, nc = int(r) + dr, int(c) + dc
            if 0 <= nr < height and 0 <= nc < width and rng.random() < p:
                new_r.append(nr)
                new_c.append(nc)
                new_y.append(int(y))
    added = LabeledSet(
        np.asarray(new_r, dtype=np.int64),
        np.asarray(new_c, dtype=np.int64),
        np.asarray(new_y, dtype=np.int64),
        np.full(len(new_r), LABEL_AUGMENTED, dtype=np.uint8),
    )
    return labeled.concat(added)


def expanded_labeled_set(
    labeled: LabeledSet, gt_dims: tuple[int, int], num_classes: int, opts: AugmentOptions
) -> LabeledSet:
    """The labeled set ``assemble_training_set`` will actually emit rows for."""
    if not opts.use_label_aug:
        return labeled
    _, label_seq = _child_seeds(opts.seed)
    return label_augment(labeled, gt_dims, num_classes, label_seq)


def rescale(spectra: np.ndarray) -> tuple[np.ndarray, RescaleParams]:
    """Map the whole matrix affinely onto [0, 1] using its global min/max."""
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.size == 0:
        raise ValidationError("cannot rescale an empty matrix")
    lo, hi = float(spectra.min()), float(spectra.max())
    if hi == lo:
        warnings.warn("constant spectra: rescale degenerates to the identity map")
        return spectra.copy(), RescaleParams(0.0, 1.0)
    return (spectra - lo) / (hi - lo), RescaleParams(lo, hi)


def apply_rescale(spectra: np.ndarray, params: RescaleParams) -> np.ndarray:
    """Rescale with stored parameters, clamping out-of-range values to [0, 1]."""
    spectra = np.asarray(spectra, dtype=np.float64)
    scaled = (spectra - params.min_value) / (params.max_value - params.min_value)
    return np.clip(scaled, 0.0, 1.0)


def _validate_labeled(dataset: Dataset, labeled: LabeledSet) -> None:
    if len(labeled) == 0:
        raise EmptyTrainingSet("no labeled pixels to assemble a training set from")
    if labeled.rows.max() >= dataset.cube.height or labeled.cols.max() >= dataset.cube.width:
        raise ValidationError("labeled pixel outside the image")
    if labeled.labels.max() > dataset.num_classes:
        raise ValidationError("labeled class id exceeds the dataset's class count")


def assemble_training_set(
    dataset: Dataset,
    labeled: LabeledSet,
    opts: AugmentOptions,
    threads: int = 1,
) -> TrainingSet:
    """Build the rescaled training matrix from all enabled image variants.

    Steps, in order: (1) noise the full image; (2) if enabled, smooth the
    noisy image (support restricted to the labeled pixels in the
    non_overlapping setting); (3) if enabled, expand the labeled set by
    label propagation; (4) emit each final entry's spectrum from every
    available variant (original and noisy always, smoothed when enabled);
    (5) rescale everything to [0, 1] with one global affine map.

    The row count is exactly (number of variants) x (final labeled
    entries), ordered variant-major.
    """
    _validate_labeled(dataset, labeled)
    noise_seq, label_seq = _child_seeds(opts.seed)
    noisy = add_noise(dataset.cube, opts.beta, noise_seq)
    variants = [dataset.cube, noisy]
    if opts.use_smoothing:
        support = None
        if opts.setting == "non_overlapping":
            support = np.unique(labeled.positions(), axis=0)
        variants.append(gaussian_smooth(noisy, opts.sigma, support=support, threads=threads))

    final = labeled
    if opts.use_label_aug:
        final = label_augment(
            labeled, (dataset.cube.height, dataset.cube.width), dataset.num_classes, label_seq
        )

    spectra = np.vstack([v.spectra_at(final.rows, final.cols) for v in variants])
    onehot = np.zeros((len(final), dataset.num_classes))
    onehot[np.arange(len(final)), final.labels - 1] = 1.0
    labels = np.tile(onehot, (len(variants), 1))
    scaled, params = rescale(spectra)
    return TrainingSet(scaled, labels, params)


def prediction_spectrum_source(
    dataset: Dataset,
    opts: AugmentOptions,
    threads: int = 1,
    use_smoothed: bool | None = None,
) -> SpectralCube:
    """Image variant that held-out pixels read their spectra from.

    In the transductive setting a model trained with smoothing sees test
    pixels smoothed the same way (from the noise-free image, using the
    full image as support); otherwise, and always in the non_overlapping
    setting, test pixels keep their original spectra. Pass
    ``use_smoothed`` to override the rule either way.
    """
    if use_smoothed is None:
        use_smoothed = opts.use_smoothing and opts.setting == "transductive"
    if not use_smoothed:
        return dataset.cube
    return gaussian_smooth(dataset.cube, opts.sigma, support=None, threads=threads)
