"""Shallow 1D convolutional classifier: one conv layer, flatten, softmax output.

No pooling and no fully-connected hidden layer; the small parameter count
is the point when only a handful of labeled pixels exist. Training is
plain minibatch SGD with momentum, early-stopped on validation error.
All math runs in float64; gradients are exact (verified against central
finite differences in the test suite).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .augment import RescaleParams, TrainingSet
from .core import FormatError, ShapeError, ValidationError

MODEL_MAGIC = b"CNNRSL1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss diverged to {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class HyperParams:
    """All tunables of the classifier and its optimizer."""

    num_kernels: int = 16
    kernel_size: int = 7
    stride: int = 1
    lambda1: float = 1e-3
    lambda2: float = 0.1
    eta: float = 1e-3
    momentum: float = 0.7
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_kernels < 1 or self.kernel_size < 1 or self.stride < 1:
            raise ValidationError("num_kernels, kernel_size and stride must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.eta < 0:
            raise ValidationError("lambda1, lambda2 and eta must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValidationError("batch_size/max_epochs must be >= 1, patience >= 0")


@dataclass
class NetworkParams:
    """Weights and the two structural constants the tensors cannot encode.

    ``stride`` and ``bands`` are carried here because the flattened dense
    layer only fixes num_kernels * feature_count, which does not determine
    the input length once stride > 1.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    stride: int
    bands: int

    @property
    def num_kernels(self) -> int:
        return self.w1.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def features_per_kernel(self) -> int:
        return num_features(self.bands, self.kernel_size, self.stride)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.stride, self.bands,
        )

    def all_finite(self) -> bool:
        return all(
            np.isfinite(t).all() for t in (self.w1, self.b1, self.w2, self.b2)
        )


class Gradients(NamedTuple):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


class ForwardCache(NamedTuple):
    windows: np.ndarray
    pre_activation: np.ndarray
    features: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    best_epoch: int
    train_loss_history: tuple[float, ...]
    val_error_history: tuple[float, ...]


def num_features(bands: int, kernel_size: int, stride: int) -> int:
    """Valid cross-correlation output length: floor((M - N) / s) + 1."""
    if kernel_size > bands:
        raise ValidationError(f"kernel_size {kernel_size} exceeds band count {bands}")
    return (bands - kernel_size) // stride + 1


def glorot_init(hyper: HyperParams, bands: int, num_classes: int, seed=None) -> NetworkParams:
    """Uniform init with bound sqrt(6 / (fan_in + fan_out)); biases start at zero.

    For a conv kernel both fans equal the kernel length; for the dense
    layer fan_in is the flattened feature count and fan_out the class
    count. Tensor draw order (w1 then w2) is fixed for reproducibility.
    """
    feats = num_features(bands, hyper.kernel_size, hyper.stride)
    rng = np.random.default_rng(hyper.seed if seed is None else seed)
    bound1 = np.sqrt(6.0 / (hyper.kernel_size + hyper.kernel_size))
    w1 = rng.uniform(-bound1, bound1, size=(hyper.num_kernels, hyper.kernel_size))
    fan_in = hyper.num_kernels * feats
    bound2 = np.sqrt(6.0 / (fan_in + num_classes))
    w2 = rng.uniform(-bound2, bound2, size=(num_classes, fan_in))
    return NetworkParams(
        w1=w1,
        b1=np.zeros(hyper.num_kernels),
        w2=w2,
        b2=np.zeros(num_classes),
        stride=hyper.stride,
        bands=bands,
    )


def _windows(spectra: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    """(n, M) -> strided view (n, F, N) of the positions each kernel touches."""
    view = np.lib.stride_tricks.sliding_window_view(spectra, kernel_size, axis=1)
    return view[:, ::stride, :]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(params: NetworkParams, spectra: np.ndarray) -> ForwardCache:
    spectra = np.atleast_2d(np.asarray(spectra, dtype=np.float64))
    if spectra.shape[1] != params.bands:
        raise ShapeError(
            f"spectra have {spectra.shape[1]} bands, network expects {params.bands}"
        )
    win = _windows(spectra, params.kernel_size, params.stride)
    z1 = np.einsum("nfk,ck->ncf", win, params.w1) + params.b1[None, :, None]
    a1 = np.maximum(z1, 0.0)
    feats = a1.reshape(len(spectra), -1)  # kernel-major flatten
    logits = feats @ params.w2.T + params.b2
    return ForwardCache(win, z1, feats, _softmax(logits))


def forward(params: NetworkParams, spectrum: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities for one spectrum, plus the activation cache."""
    cache = _forward_batch(params, np.asarray(spectrum, dtype=np.float64)[None, :])
    return cache.probs[0], cache


def shift_penalty(w1: np.ndarray) -> float:
    """Sum of squared differences between horizontally adjacent kernel weights."""
    diff = w1[:, :-1] - w1[:, 1:]
    return float((diff * diff).sum())


def loss(
    params: NetworkParams,
    spectra: np.ndarray,
    labels: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> float:
    """Mean cross-entropy plus weight decay plus the adjacent-weight penalty.

    Biases are excluded from both penalties; log arguments are floored at
    1e-12 so a confidently wrong prediction cannot produce -inf.
    """
    cache = _forward_batch(params, spectra)
    labels = np.atleast_2d(labels)
    if labels.shape != cache.probs.shape:
        raise ShapeError("labels must be one-hot rows matching the batch")
    ce = -(labels * np.log(np.maximum(cache.probs, 1e-12))).sum() / len(labels)
    reg = lambda1 * ((params.w1 ** 2).sum() + (params.w2 ** 2).sum())
    return float(ce + reg + lambda2 * shift_penalty(params.w1))


def backward(
    params: NetworkParams,
    spectra: np.ndarray,
    labels: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> Gradients:
    """Exact gradient of ``loss`` with respect to every parameter tensor.

    The ReLU subgradient at exactly zero is taken as zero. The penalty
    gradient at interior position n is 2*lambda2*(2w_n - w_{n-1} -
    w_{n+1}), with one-sided terms at the kernel ends.
    """
    spectra = np.atleast_2d(np.asarray(spectra, dtype=np.float64))
    labels = np.atleast_2d(labels)
    cache = _forward_batch(params, spectra)
    n = len(spectra)
    dlogits = (cache.probs - labels) / n
    gw2 = dlogits.T @ cache.features + 2.0 * lambda1 * params.w2
    gb2 = dlogits.sum(axis=0)
    dfeat = dlogits @ params.w2
    dz1 = dfeat.reshape(cache.pre_activation.shape) * (cache.pre_activation > 0.0)
    gw1 = np.einsum("ncf,nfk->ck", dz1, cache.windows) + 2.0 * lambda1 * params.w1
    if lambda2 != 0.0:
        diff = params.w1[:, :-1] - params.w1[:, 1:]
        gw1[:, :-1] += 2.0 * lambda2 * diff
        gw1[:, 1:] -= 2.0 * lambda2 * diff
    gb1 = dz1.sum(axis=(0, 2))
    return Gradients(gw1, gb1, gw2, gb2)


def predict(params: NetworkParams, spectra: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1-based class ids (ties go to the lowest id) and the full probability rows."""
    probs = _forward_batch(params, spectra).probs
    return np.argmax(probs, axis=1) + 1, probs


def train(
    trainset: TrainingSet,
    valset: TrainingSet,
    hyper: HyperParams,
    bands: int,
    num_classes: int,
) -> tuple[NetworkParams, TrainReport]:
    """Minibatch SGD with momentum, early-stopped on validation error.

    Velocity update: v <- momentum*v - eta*g, params <- params + v. The
    epoch order is reshuffled from a seeded stream. Validation error is
    the misclassified fraction; training stops once it has not strictly
    improved for ``patience`` consecutive epochs (or at max_epochs) and
    the parameters from the best epoch are returned.
    """
    if len(trainset) == 0 or len(valset) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if trainset.spectra.shape[1] != bands or trainset.labels.shape[1] != num_classes:
        raise ShapeError("training set shape inconsistent with (bands, num_classes)")

    init_seq, shuffle_seq = np.random.SeedSequence(hyper.seed).spawn(2)
    params = glorot_init(hyper, bands, num_classes, seed=init_seq)
    rng = np.random.default_rng(shuffle_seq)
    velocity = Gradients(*(np.zeros_like(t) for t in (params.w1, params.b1, params.w2, params.b2)))

    x, y = trainset.spectra, trainset.labels
    val_truth = valset.class_ids()

    best_params = params.copy()
    best_err = np.inf
    best_epoch = 0
    stale = 0
    losses: list[float] = []
    errors: list[float] = []
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(len(x))
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            g = backward(params, x[batch], y[batch], hyper.lambda1, hyper.lambda2)
            velocity = Gradients(
                *(hyper.momentum * v - hyper.eta * gi for v, gi in zip(velocity, g))
            )
            params.w1 += velocity.w1
            params.b1 += velocity.b1
            params.w2 += velocity.w2
            params.b2 += velocity.b2

        epoch_loss = loss(params, x, y, hyper.lambda1, hyper.lambda2)
        if not np.isfinite(epoch_loss) or not params.all_finite():
            raise DivergenceError(epoch, epoch_loss)
        val_pred, _ = predict(params, valset.spectra)
        val_err = float((val_pred != val_truth).mean())
        losses.append(epoch_loss)
        errors.append(val_err)

        if val_err < best_err:
            best_err = val_err
            best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break

    report = TrainReport(
        epochs_run=epoch,
        best_epoch=best_epoch,
        train_loss_history=tuple(losses),
        val_error_history=tuple(errors),
    )
    return best_params, report


# ---------------------------------------------------------------------------
# Model file: magic, five little-endian u32 (M, K, num_kernels, kernel_size,
# stride), the rescale interval as two f64, then w1, b1, w2, b2 as f32.
# ---------------------------------------------------------------------------

def save_model(params: NetworkParams, rescale: RescaleParams, path: str | Path) -> None:
    feats = params.features_per_kernel
    if params.w2.shape[1] != params.num_kernels * feats:
        raise ShapeError("dense weight shape inconsistent with conv geometry")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack(
            "<5I", params.bands, params.num_classes,
            params.num_kernels, params.kernel_size, params.stride,
        ))
        fh.write(struct.pack("<2d", rescale.min_value, rescale.max_value))
        for tensor in (params.w1, params.b1, params.w2, params.b2):
            fh.write(tensor.astype(np.float32).tobytes())


def load_model(path: str | Path) -> tuple[NetworkParams, RescaleParams]:
    raw = Path(path).read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    off = len(MODEL_MAGIC)
    bands, num_classes, num_kernels, kernel_size, stride = struct.unpack_from("<5I", raw, off)
    off += 20
    lo, hi = struct.unpack_from("<2d", raw, off)
    off += 16
    feats = num_features(bands, kernel_size, stride)
    sizes = (
        ("w1", (num_kernels, kernel_size)),
        ("b1", (num_kernels,)),
        ("w2", (num_classes, num_kernels * feats)),
        ("b2", (num_classes,)),
    )
    tensors = {}
    for name, shape in sizes:
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated tensor {name}")
        tensors[name] = (
            np.frombuffer(raw[off:end], dtype="<f4").astype(np.float64).reshape(shape)
        )
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    params = NetworkParams(stride=stride, bands=bands, **tensors)
    return params, RescaleParams(lo, hi)
