"""Pixel color categories and the linear classifier that assigns them.

The classifier is a multinomial logistic model on RGB scaled to [0, 1]. The
same softmax-regression trainer is reused by the pixel-level baseline in
:mod:`organseg.pipeline`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, TrainingDataError
from .raster import BitMask, RasterImage, Rect, crop

log = logging.getLogger(__name__)


class ColorCategory(Enum):
    CAT1 = 0
    CAT2 = 1
    CAT3 = 2
    CAT4 = 3
    BACKGROUND = 4

    @property
    def index(self) -> int:
        return self.value


N_CATEGORIES = len(ColorCategory)
N_FEATURES = 3
MAGIC = b"OSCM1"


@dataclass(frozen=True)
class PixelSample:
    r: int
    g: int
    b: int
    label: ColorCategory

    def __post_init__(self):
        for c in (self.r, self.g, self.b):
            if not 0 <= c <= 255:
                raise ValueError(f"channel value {c} outside 0..255")


@dataclass(frozen=True, eq=False)
class ColorModel:
    """Weights are (5 classes x 3 channels); rows follow ``ColorCategory`` order."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32)
        b = np.array(self.bias, dtype=np.float32)
        if w.shape != (N_CATEGORIES, N_FEATURES) or b.shape != (N_CATEGORIES,):
            raise ValueError(f"bad color model shapes {w.shape}, {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("color model weights must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def scores(self, rgb: np.ndarray) -> np.ndarray:
        x = np.asarray(rgb, dtype=np.float64).reshape(-1, N_FEATURES) / 255.0
        return x @ self.weights.astype(np.float64).T + self.bias.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, ColorModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)

    __hash__ = None


# --- softmax regression ------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    epochs: int = 60,
    learning_rate: float = 0.5,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit a multinomial logistic model with seeded mini-batch SGD.

    ``x`` holds pre-scaled features, one row per sample. Returns float32
    ``(weights, bias)`` with weights shaped (n_classes, n_features).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    rng = np.random.default_rng(seed)
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            p = _softmax(x[idx] @ w.T + b)
            g = (p - onehot[idx]) / len(idx)
            w -= learning_rate * (g.T @ x[idx])
            b -= learning_rate * g.sum(axis=0)
    return w.astype(np.float32), b.astype(np.float32)


def train_color_model_arrays(
    rgb: np.ndarray,
    labels: np.ndarray,
    epochs: int = 60,
    learning_rate: float = 0.5,
    seed: int = 0,
) -> ColorModel:
    """Array form of :func:`train_color_model`: ``rgb`` is (n, 3), labels are class indices."""
    rgb = np.asarray(rgb)
    labels = np.asarray(labels, dtype=np.int64)
    if len(rgb) == 0:
        raise ValueError("no training pixels")
    present = np.unique(labels)
    if len(present) < 2:
        raise TrainingDataError("color model needs at least two distinct categories")
    w, b = fit_softmax(
        rgb.astype(np.float64) / 255.0, labels, N_CATEGORIES,
        epochs=epochs, learning_rate=learning_rate, seed=seed,
    )
    model = ColorModel(w, b)
    acc = float(np.mean(classify_pixels(model, rgb) == labels))
    log.info("color model trained: n=%d classes=%d train_accuracy=%.4f", len(rgb), len(present), acc)
    return model


def train_color_model(
    samples: Sequence[PixelSample],
    epochs: int = 60,
    learning_rate: float = 0.5,
    seed: int = 0,
) -> ColorModel:
    if len(samples) == 0:
        raise ValueError("no training samples")
    rgb = np.array([(s.r, s.g, s.b) for s in samples], dtype=np.uint8)
    labels = np.array([s.label.index for s in samples], dtype=np.int64)
    return train_color_model_arrays(rgb, labels, epochs, learning_rate, seed)


def training_accuracy(model: ColorModel, samples: Sequence[PixelSample]) -> float:
    rgb = np.array([(s.r, s.g, s.b) for s in samples], dtype=np.uint8)
    labels = np.array([s.label.index for s in samples])
    return float(np.mean(classify_pixels(model, rgb) == labels))


# --- classification ----------------------------------------------------------


def classify_pixels(model: ColorModel, rgb: np.ndarray) -> np.ndarray:
    """Category index for each row of an (..., 3) RGB array; ties go to the lower index."""
    rgb = np.asarray(rgb)
    idx = np.argmax(model.scores(rgb), axis=1)
    return idx.reshape(rgb.shape[:-1])


def classify_pixel(model: ColorModel, r: int, g: int, b: int) -> ColorCategory:
    return ColorCategory(int(classify_pixels(model, np.array([[r, g, b]]))[0]))


def classify_image(model: ColorModel, img: RasterImage) -> np.ndarray:
    """(H, W) array of category indices for every pixel of ``img``."""
    return classify_pixels(model, img.pixels).astype(np.uint8)


def filter_to_shape(img: RasterImage, box: Rect, model: ColorModel, category: ColorCategory) -> BitMask:
    """Keep only the pixels of ``box`` whose color falls in ``category``."""
    if category is ColorCategory.BACKGROUND:
        raise ValueError("cannot filter on the background category")
    patch = crop(img, box)
    return BitMask(classify_image(model, patch) == category.index)


# --- serialization -----------------------------------------------------------


def save_color_model(model: ColorModel, path) -> None:
    payload = MAGIC + struct.pack("<II", N_CATEGORIES, N_FEATURES)
    payload += model.weights.astype("<f4").tobytes()
    payload += model.bias.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def load_color_model(path) -> ColorModel:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a color model file")
    header_end = len(MAGIC) + 8
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated header")
    n_cls, n_feat = struct.unpack("<II", data[len(MAGIC):header_end])
    if (n_cls, n_feat) != (N_CATEGORIES, N_FEATURES):
        raise FormatError(f"{path}: unexpected shape {n_cls}x{n_feat}")
    expected = header_end + 4 * (n_cls * n_feat + n_cls)
    if len(data) != expected:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    floats = np.frombuffer(data, dtype="<f4", offset=header_end)
    weights = floats[:n_cls * n_feat].reshape(n_cls, n_feat)
    bias = floats[n_cls * n_feat:]
    try:
        return ColorModel(weights, bias)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
