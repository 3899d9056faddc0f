"""Synthetic banded-spectrum scenes for experiments and the acceptance benchmark.

Each class occupies one horizontal strip of the image and carries a
narrow Gaussian bump at a class-specific band; pixel spectra are the
class signature plus white noise. At the default noise level a pixel on
its own is often ambiguous, which is exactly the regime where spatial
smoothing pays off.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import Dataset, GroundTruth, SpectralCube, write_cube, write_ground_truth


def class_signatures(
    bands: int, num_classes: int, amplitude: float = 1.0, width: float = 1.2
) -> np.ndarray:
    """(K, bands) matrix of non-overlapping spectral bumps."""
    centers = np.linspace(0.15 * bands, 0.85 * bands, num_classes)
    grid = np.arange(bands)
    sig = amplitude * np.exp(-((grid[None, :] - centers[:, None]) ** 2) / (2.0 * width**2))
    return sig


def make_synthetic_dataset(
    height: int = 60,
    width: int = 60,
    bands: int = 32,
    num_classes: int = 4,
    amplitude: float = 1.0,
    noise_scale: float = 0.6,
    seed: int = 0,
) -> Dataset:
    """Strip-layout scene: class k fills rows [k*height/K, (k+1)*height/K)."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((height, width), dtype=np.uint8)
    bounds = np.linspace(0, height, num_classes + 1, dtype=int)
    for k in range(num_classes):
        labels[bounds[k] : bounds[k + 1]] = k + 1
    sig = class_signatures(bands, num_classes, amplitude=amplitude)
    clean = sig[labels - 1]
    data = clean + noise_scale * rng.standard_normal((height, width, bands))
    return Dataset(SpectralCube(data.astype(np.float32)), GroundTruth(labels))


def write_synthetic_dataset(
    out_dir: str | Path, name: str = "synthetic", **kwargs
) -> tuple[Path, Path]:
    """Generate a scene and store it as ``<name>_cube.npy`` / ``<name>_gt.npy``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = make_synthetic_dataset(**kwargs)
    cube_path = out_dir / f"{name}_cube.npy"
    gt_path = out_dir / f"{name}_gt.npy"
    write_cube(ds.cube, cube_path)
    write_ground_truth(ds.gt, gt_path)
    return cube_path, gt_path
