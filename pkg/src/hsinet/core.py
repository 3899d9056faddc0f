"""Hyperspectral data model: cubes, ground truth, labeled pixel sets, strict NPY I/O.

Cubes are stored as float32 (they can be large); all optimization math
elsewhere runs in float64. Every type is immutable after construction and
safe to share across workers.
"""

from __future__ import annotations

import ast
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

CUBE_KINDS = ("original", "noisy", "smoothed")

# Provenance codes for LabeledSet entries.
SAMPLED = 0
LABEL_AUGMENTED = 1
PROVENANCE_NAMES = ("sampled", "label_augmented")


class FormatError(ValueError):
    """File is not a well-formed NPY v1.0 container."""


class ShapeError(ValueError):
    """Array rank, element type, or dimensions violate the expected layout."""


class DataError(ValueError):
    """Array payload contains non-finite values."""


class ValidationError(ValueError):
    """A domain invariant is violated (labels, class coverage, set consistency)."""


class PixelIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class SpectralCube:
    """H x W x M tensor of per-pixel spectra.

    ``kind`` records which processing stage produced the values: the raw
    input image, its noise-perturbed copy, or a spatially smoothed copy.
    """

    data: np.ndarray
    kind: str = "original"

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"cube must be 3-D (H, W, M), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("cube contains NaN or Inf values")
        if self.kind not in CUBE_KINDS:
            raise ValidationError(f"unknown cube kind {self.kind!r}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def spectra_at(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Gather pixel spectra as a float64 (n, bands) matrix."""
        return self.data[np.asarray(rows), np.asarray(cols)].astype(np.float64)


@dataclass(frozen=True)
class GroundTruth:
    """Per-pixel class raster; 0 marks background, 1..K are foreground classes."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeError(f"ground truth must be 2-D, got shape {arr.shape}")
        if arr.dtype.kind == "i":
            if arr.size and arr.min() < 0:
                raise ValidationError("ground-truth labels must be non-negative")
            arr = arr.astype(_smallest_unsigned(int(arr.max()) if arr.size else 0))
        elif arr.dtype.kind != "u":
            raise ShapeError(f"ground-truth labels must be integers, got {arr.dtype}")
        object.__setattr__(self, "labels", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


@dataclass(frozen=True)
class Dataset:
    """A cube paired with its ground truth and class metadata."""

    cube: SpectralCube
    gt: GroundTruth
    num_classes: int | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if (self.gt.height, self.gt.width) != (self.cube.height, self.cube.width):
            raise ValidationError(
                f"ground truth {self.gt.labels.shape} does not match cube "
                f"spatial dims {(self.cube.height, self.cube.width)}"
            )
        inferred = self.gt.num_classes
        if inferred < 1:
            raise ValidationError("ground truth has no foreground pixels")
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", inferred)
        elif self.num_classes != inferred:
            raise ValidationError(
                f"num_classes={self.num_classes} but maximum label is {inferred}"
            )
        present = np.unique(self.gt.labels)
        missing = sorted(set(range(1, inferred + 1)) - set(int(v) for v in present))
        if missing:
            raise ValidationError(f"classes without any foreground pixel: {missing}")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != inferred:
                raise ValidationError(
                    f"{len(names)} class names given for {inferred} classes"
                )
            object.__setattr__(self, "class_names", names)


@dataclass(frozen=True)
class LabeledSet:
    """Ordered multiset of (pixel, class) pairs with per-entry provenance.

    Entries drawn by a sampler carry provenance ``sampled`` and must be
    unique; entries produced by label propagation carry
    ``label_augmented`` and may duplicate any pixel, possibly with a
    conflicting class.
    """

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray

    def __post_init__(self) -> None:
        rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        prov = np.ascontiguousarray(self.provenance, dtype=np.uint8)
        n = len(rows)
        if not (len(cols) == len(labels) == len(prov) == n):
            raise ValidationError("labeled-set arrays must have equal length")
        if n and labels.min() < 1:
            raise ValidationError("class labels must be >= 1")
        if n and prov.max() > LABEL_AUGMENTED:
            raise ValidationError("unknown provenance code")
        sampled = prov == SAMPLED
        if sampled.any():
            pairs = np.stack([rows[sampled], cols[sampled]], axis=1)
            if len(np.unique(pairs, axis=0)) != len(pairs):
                raise ValidationError("duplicate pixel among sampled entries")
        for name, arr in (("rows", rows), ("cols", cols), ("labels", labels), ("provenance", prov)):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.rows)

    def entries(self) -> Iterator[tuple[PixelIndex, int]]:
        for r, c, y in zip(self.rows, self.cols, self.labels):
            yield PixelIndex(int(r), int(c)), int(y)

    def positions(self) -> np.ndarray:
        """(n, 2) array of row/col positions in entry order."""
        return np.stack([self.rows, self.cols], axis=1)

    def subset(self, mask: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.rows[mask], self.cols[mask], self.labels[mask], self.provenance[mask])

    def concat(self, other: "LabeledSet") -> "LabeledSet":
        return LabeledSet(
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.provenance, other.provenance]),
        )

    @classmethod
    def from_entries(
        cls, entries: list[tuple[int, int, int]], provenance: int = SAMPLED
    ) -> "LabeledSet":
        rows = [e[0] for e in entries]
        cols = [e[1] for e in entries]
        labels = [e[2] for e in entries]
        return cls(np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                   np.array(labels, dtype=np.int64),
                   np.full(len(entries), provenance, dtype=np.uint8))

    @classmethod
    def empty(cls) -> "LabeledSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0, dtype=np.uint8))


def foreground_indices(gt: GroundTruth) -> list[PixelIndex]:
    """All pixels with a nonzero label, in row-major order."""
    rows, cols = np.nonzero(gt.labels)
    return [PixelIndex(int(r), int(c)) for r, c in zip(rows, cols)]


def foreground_arrays(gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    """Row/col arrays of foreground pixels, row-major order."""
    return np.nonzero(gt.labels)


def class_counts(labeled: LabeledSet, num_classes: int) -> np.ndarray:
    """Per-class entry multiplicities C_1..C_K as an int64 vector."""
    if len(labeled) and labeled.labels.max() > num_classes:
        raise ValidationError(
            f"labeled set contains class {int(labeled.labels.max())} > K={num_classes}"
        )
    return np.bincount(labeled.labels, minlength=num_classes + 1)[1:]


# ---------------------------------------------------------------------------
# NPY v1.0 reading and writing.
#
# Only the strict v1.0 subset is accepted: little-endian IEEE floats or
# unsigned ints, C order.  Parsing is done by hand so that malformed files
# produce FormatError rather than whatever numpy.load would raise, and so
# that pickled or Fortran-order payloads are rejected outright.
# ---------------------------------------------------------------------------

_NPY_MAGIC = b"\x93NUMPY"
_CUBE_DESCRS = ("<f4", "<f8")
# numpy writes single-byte unsigned as '|u1'; accept it as an alias of '<u1'.
_GT_DESCRS = ("<u1", "<u2", "<u4", "|u1")
_WRITE_DESCRS = {"u1": "<u1", "u2": "<u2", "u4": "<u4", "f4": "<f4", "f8": "<f8"}


def _smallest_unsigned(max_value: int) -> np.dtype:
    for dt in (np.uint8, np.uint16, np.uint32):
        if max_value <= np.iinfo(dt).max:
            return np.dtype(dt)
    raise ValidationError(f"label value {max_value} exceeds 32-bit unsigned range")


def _read_npy(path: str | Path, allowed_descrs: tuple[str, ...]) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise FormatError(f"{path}: missing NPY magic string")
    if raw[6:8] != b"\x01\x00":
        raise FormatError(f"{path}: only NPY version 1.0 is supported")
    header_len = int.from_bytes(raw[8:10], "little")
    end = 10 + header_len
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10:end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparseable header") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise FormatError(f"{path}: header missing required keys")
    if header["fortran_order"] is not False:
        raise FormatError(f"{path}: Fortran-order arrays are not supported")
    descr = header["descr"]
    if descr not in allowed_descrs:
        raise ShapeError(f"{path}: element type {descr!r} not in {allowed_descrs}")
    shape = header["shape"]
    if not (isinstance(shape, tuple) and all(isinstance(s, int) and s >= 0 for s in shape)):
        raise FormatError(f"{path}: malformed shape {shape!r}")
    dtype = np.dtype(descr)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[end:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def _write_npy(path: str | Path, arr: np.ndarray) -> None:
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _WRITE_DESCRS:
        raise ShapeError(f"cannot serialize dtype {arr.dtype}")
    descr = _WRITE_DESCRS[key]
    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(arr.shape))
    # Pad so the payload starts on a 64-byte boundary (same layout numpy emits).
    pad = 64 - ((10 + len(header) + 1) % 64)
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(len(header).to_bytes(2, "little"))
        fh.write(header.encode("latin1"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_cube(path: str | Path) -> SpectralCube:
    """Read a cube from NPY v1.0; float64 payloads are narrowed to float32."""
    arr = _read_npy(path, _CUBE_DESCRS)
    if arr.ndim != 3:
        raise ShapeError(f"{path}: cube must be 3-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: cube contains NaN or Inf values")
    return SpectralCube(arr.astype(np.float32), kind="original")


def write_cube(cube: SpectralCube, path: str | Path) -> None:
    _write_npy(path, cube.data)


def load_ground_truth(path: str | Path) -> GroundTruth:
    arr = _read_npy(path, _GT_DESCRS)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: ground truth must be 2-D, got shape {arr.shape}")
    return GroundTruth(arr)


def write_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    _write_npy(path, gt.labels)


def load_dataset(cube_path: str | Path, gt_path: str | Path,
                 class_names: tuple[str, ...] | None = None) -> Dataset:
    return Dataset(load_cube(cube_path), load_ground_truth(gt_path), class_names=class_names)


# ---------------------------------------------------------------------------
# LabeledSet CSV: header row,col,label,provenance, one entry per line.
# ---------------------------------------------------------------------------

def save_labeled_set(labeled: LabeledSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "label", "provenance"])
        for r, c, y, p in zip(labeled.rows, labeled.cols, labeled.labels, labeled.provenance):
            writer.writerow([int(r), int(c), int(y), PROVENANCE_NAMES[p]])


def load_labeled_set(path: str | Path) -> LabeledSet:
    rows, cols, labels, prov = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "label", "provenance"]:
            raise FormatError(f"{path}: unexpected labeled-set header {header}")
        for line in reader:
            if not line:
                continue
            rows.append(int(line[0]))
            cols.append(int(line[1]))
            labels.append(int(line[2]))
            try:
                prov.append(PROVENANCE_NAMES.index(line[3]))
            except ValueError as exc:
                raise FormatError(f"{path}: unknown provenance {line[3]!r}") from exc
    return LabeledSet(np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                      np.array(labels, dtype=np.int64), np.array(prov, dtype=np.uint8))
