"""A small convolutional shape classifier written directly against numpy.

Activations are NHWC float32. The network maps a binarized shape image to
six class probabilities ordered (Brain, Heart, Liver, Kidney, Spine, None).
Forward, backward and the SGD loop live here; nothing is delegated to a deep
learning framework.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError, TrainingDivergence
from .raster import BitMask, resize_bilinear

log = logging.getLogger(__name__)

CLASS_NAMES = ("Brain", "Heart", "Liver", "Kidney", "Spine", "None")
N_CLASSES = len(CLASS_NAMES)
NONE_CLASS = N_CLASSES - 1
INPUT_SHAPE = (128, 128, 1)
STAGE_WIDTHS = (32, 32, 64, 64, 64)
MAGIC = b"OSNW1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0
    rate: float = 0.0

    KINDS = ("conv3x3", "relu", "maxpool2x2", "flatten", "dense", "dropout", "softmax")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "dense") and self.size < 1:
            raise ValueError(f"{self.kind} needs a positive size")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate {self.rate} outside [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv3x3", "dense")


def conv3x3(channels: int) -> LayerSpec:
    return LayerSpec("conv3x3", channels)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


RELU = LayerSpec("relu")
MAXPOOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")


def architecture(conv_stages: int = 3, dropout_rate: float = 0.5) -> tuple[LayerSpec, ...]:
    """conv/relu/pool stages, then dense(128), dense(64), dropout, dense(6), softmax."""
    if not 1 <= conv_stages <= len(STAGE_WIDTHS):
        raise ValueError(f"conv_stages must be in 1..{len(STAGE_WIDTHS)}")
    layers: list[LayerSpec] = []
    for width in STAGE_WIDTHS[:conv_stages]:
        layers += [conv3x3(width), RELU, MAXPOOL]
    layers += [FLATTEN, dense(128), RELU, dense(64), RELU, dropout(dropout_rate), dense(N_CLASSES), SOFTMAX]
    return tuple(layers)


def tiny_architecture() -> tuple[LayerSpec, ...]:
    """Two-channel 8x8 network used for gradient checking."""
    return (conv3x3(2), RELU, MAXPOOL, FLATTEN, dense(4), RELU, dense(N_CLASSES), SOFTMAX)


def param_shapes(layers: Sequence[LayerSpec], input_shape: tuple[int, int, int]) -> list[tuple[int, ...]]:
    """Weight/bias shapes implied by a layer chain; raises ShapeError if it does not chain."""
    h, w, c = input_shape
    flat = None
    shapes = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "conv3x3":
            if flat is not None:
                raise ShapeError(f"layer {i}: conv after flatten")
            shapes += [(3, 3, c, layer.size), (layer.size,)]
            c = layer.size
        elif k == "maxpool2x2":
            if flat is not None:
                raise ShapeError(f"layer {i}: pool after flatten")
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: feature map pooled away")
        elif k == "flatten":
            flat = h * w * c
        elif k == "dense":
            if flat is None:
                raise ShapeError(f"layer {i}: dense before flatten")
            shapes += [(flat, layer.size), (layer.size,)]
            flat = layer.size
        elif k == "softmax" and i != len(layers) - 1:
            raise ShapeError("softmax must be the final layer")
    if not layers or layers[-1].kind != "softmax":
        raise ShapeError("network must end in softmax")
    return shapes


@dataclass(frozen=True, eq=False)
class ShapeNet:
    layers: tuple[LayerSpec, ...]
    params: tuple[np.ndarray, ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        expected = param_shapes(self.layers, self.input_shape)
        if len(expected) != len(self.params):
            raise ShapeError(f"expected {len(expected)} weight tensors, got {len(self.params)}")
        frozen = []
        for i, (shape, p) in enumerate(zip(expected, self.params)):
            arr = np.array(p, dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(f"weight tensor {i}: shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def n_classes(self) -> int:
        return self.params[-1].shape[0]

    @property
    def conv_stages(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "conv3x3")

    def with_params(self, params) -> ShapeNet:
        return replace(self, params=tuple(params))

    def __eq__(self, other):
        if not isinstance(other, ShapeNet):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.input_shape == other.input_shape
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )

    __hash__ = None


def init_params(layers, input_shape, seed: int) -> list[np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in param_shapes(layers, input_shape):
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            params.append((rng.standard_normal(shape) * std).astype(np.float32))
    return params


def default_architecture(seed: int = 0, conv_stages: int = 3, dropout_rate: float = 0.5) -> ShapeNet:
    layers = architecture(conv_stages, dropout_rate)
    return ShapeNet(layers, tuple(init_params(layers, INPUT_SHAPE, seed)), INPUT_SHAPE)


def tiny_net(seed: int = 0) -> ShapeNet:
    layers = tiny_architecture()
    shape = (8, 8, 2)
    return ShapeNet(layers, tuple(init_params(layers, shape, seed)), shape)


def zero_like(net: ShapeNet) -> ShapeNet:
    return net.with_params(np.zeros_like(p) for p in net.params)


# --- layer kernels -----------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(n, h, w, c) -> (n*h*w, 9c) patches, columns ordered (dy, dx, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(windows).reshape(n * h * w, 9 * c)


def _conv_matrix(w: np.ndarray) -> np.ndarray:
    return w.reshape(-1, w.shape[3])


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w, :] += d[:, :, :, dy, dx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _pool(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    x = x[:, :2 * h2, :2 * w2, :]
    return np.maximum(
        np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
        np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]),
    )


def _pool_backward(x: np.ndarray, out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # gradient goes to the first maximal element of each window (row-major)
    h2, w2 = out.shape[1], out.shape[2]
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for dy in (0, 1):
        for dxo in (0, 1):
            sub = x[:, dy:2 * h2:2, dxo:2 * w2:2]
            hit = (sub == out) & ~taken
            dx[:, dy:2 * h2:2, dxo:2 * w2:2] = np.where(hit, dout, 0.0)
            taken |= hit
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(net: ShapeNet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != tuple(net.input_shape):
        raise ShapeError(f"expected batch shaped (n, {', '.join(map(str, net.input_shape))}), got {batch.shape}")
    return batch


QUADS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _im2col_quads(x: np.ndarray) -> np.ndarray:
    """Patches grouped by 2x2 pool position: rows ordered (quad, n, y/2, x/2)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    out = np.empty((4, n, h // 2, w // 2, 3, 3, c), dtype=x.dtype)
    for k, (qy, qx) in enumerate(QUADS):
        out[k] = windows[:, qy::2, qx::2]
    return out.reshape(-1, 9 * c)


def _unpool_quads(z: np.ndarray, pooled: np.ndarray, d: np.ndarray) -> np.ndarray:
    # each window's gradient goes to its first maximal quad
    dz = np.empty(z.shape, dtype=d.dtype)
    taken = z[0] == pooled
    dz[0] = np.where(taken, d, 0.0)
    for k in (1, 2, 3):
        hit = z[k] == pooled
        hit &= ~taken
        dz[k] = np.where(hit, d, 0.0)
        taken |= hit
    return dz


def _col2im_quads(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    h2, w2 = h // 2, w // 2
    d = dcols.reshape(4, n, h2, w2, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k, (qy, qx) in enumerate(QUADS):
        for dy in range(3):
            for dx in range(3):
                y0, x0 = qy + dy, qx + dx
                dxp[:, y0:y0 + 2 * h2:2, x0:x0 + 2 * w2:2, :] += d[k, :, :, :, dy, dx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _binary_pool_table(net: ShapeNet) -> np.ndarray:
    """Pooled first-conv outputs for every 4x4 binary patch, built once per net.

    Row ``code`` holds the max over the four 3x3 windows of the 2x2 pool when
    bit ``4r + s`` of ``code`` is pixel (r, s) of the patch.
    """
    table = getattr(net, "_pool_table", None)
    if table is None:
        w = _conv_matrix(net.params[0])
        patterns = ((np.arange(512)[:, None] >> np.arange(9)) & 1).astype(np.float32)
        per_window = patterns @ w
        codes = np.arange(1 << 16)
        quads = []
        for qy, qx in QUADS:
            sub = np.zeros(codes.shape, dtype=np.int64)
            for dy in range(3):
                for dx in range(3):
                    sub |= ((codes >> (4 * (qy + dy) + qx + dx)) & 1) << (3 * dy + dx)
            quads.append(per_window[sub])
        table = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        object.__setattr__(net, "_pool_table", table)
    return table


def _binary_conv_pool(net: ShapeNet, x: np.ndarray) -> np.ndarray:
    """First conv + 2x2 max-pool (before bias) of a binary single-channel batch by table lookup."""
    n, h, w, _ = x.shape
    h2, w2 = h // 2, w // 2
    xp = np.zeros((n, h + 2, w + 2), dtype=np.uint16)
    xp[:, 1:-1, 1:-1] = x[..., 0]
    code = np.zeros((n, h2, w2), dtype=np.uint16)
    for r in range(4):
        for s in range(4):
            code |= xp[:, r:r + 2 * h2:2, s:s + 2 * w2:2] << np.uint16(4 * r + s)
    return _binary_pool_table(net)[code]


def _run(net: ShapeNet, x: np.ndarray, train_mode: bool, rng, keep: bool, fuse: bool = True):
    """Forward pass; returns (probabilities, logits, per-layer caches).

    With ``fuse`` a conv followed by relu and max-pool is evaluated as
    pool, bias, relu. The result is identical because the bias is constant per
    channel and relu is monotone; the gradient still reaches the first
    maximal element of each window. Without caches, a binary single-channel
    input to the first conv is pooled by table lookup, which yields the same
    values as the GEMM.
    """
    caches = []
    p = 0
    logits = None
    layers = net.layers
    skip = 0

    def fuse_next(i):
        return i + 2 < len(layers) and layers[i + 1].kind == "relu" and layers[i + 2].kind == "maxpool2x2"

    for i, layer in enumerate(layers):
        if skip:
            skip -= 1
            caches.append(None)
            continue
        k = layer.kind
        if k == "conv3x3":
            w, b = net.params[p], net.params[p + 1]
            p += 2
            n, h, wd, c = x.shape
            if fuse and fuse_next(i) and h % 2 == 0 and wd % 2 == 0 and p == 2 and c == 1 and not keep \
                    and ((x == 0) | (x == 1)).all():
                x = np.maximum(_binary_conv_pool(net, x) + b, 0.0)
                caches.append(None)
                skip = 2
            elif fuse and fuse_next(i) and h % 2 == 0 and wd % 2 == 0:
                # pool first: bias is per channel and relu is monotone
                cols = _im2col_quads(x)
                z = (cols @ _conv_matrix(w)).reshape(4, n, h // 2, wd // 2, -1)
                pooled = np.maximum(np.maximum(z[0], z[1]), np.maximum(z[2], z[3]))
                pre = pooled + b
                if keep:
                    caches.append(("fused", cols, x.shape, (z, pooled), pre > 0))
                else:
                    caches.append(None)
                x = np.maximum(pre, 0.0)
                skip = 2
            else:
                cols = _im2col(x)
                caches.append((cols, x.shape) if keep else None)
                x = (cols @ _conv_matrix(w)).reshape(n, h, wd, -1) + b
        elif k == "relu":
            caches.append(x > 0 if keep else None)
            x = np.maximum(x, 0.0)
        elif k == "maxpool2x2":
            out = _pool(x)
            caches.append((x, out) if keep else None)
            x = out
        elif k == "flatten":
            caches.append(x.shape if keep else None)
            x = x.reshape(x.shape[0], -1)
        elif k == "dense":
            w, b = net.params[p], net.params[p + 1]
            p += 2
            caches.append(x if keep else None)
            x = x @ w + b
        elif k == "dropout":
            if train_mode and layer.rate > 0:
                if rng is None:
                    raise ValueError("train-mode forward through dropout needs an rng")
                keep_mask = rng.random(x.shape, dtype=np.float32) >= layer.rate
                scale = np.float32(1.0 / (1.0 - layer.rate))
                m = keep_mask.astype(np.float32) * scale
                caches.append(m if keep else None)
                x = x * m
            else:
                caches.append(None)
        elif k == "softmax":
            logits = x
            x = _softmax(x)
            caches.append(None)
    return x, logits, caches


def forward(net: ShapeNet, batch: np.ndarray, train_mode: bool = False, rng=None) -> np.ndarray:
    """Class probabilities for an (n, H, W, C) batch."""
    probs, _, _ = _run(net, _check_batch(net, batch), train_mode, rng, keep=False)
    return probs


def logits(net: ShapeNet, batch: np.ndarray) -> np.ndarray:
    _, z, _ = _run(net, _check_batch(net, batch), False, None, keep=False)
    return z


def cross_entropy_loss(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, 1e-300))))


def loss_and_gradients(net: ShapeNet, batch: np.ndarray, labels, rng=None, fuse: bool = True):
    """Train-mode forward plus exact backward of mean cross-entropy.

    Returns ``(loss, grads, probs)``; ``grads`` lines up with ``net.params``.
    The dropout mask drawn from ``rng`` is shared by both passes.
    """
    x = _check_batch(net, batch)
    labels = np.asarray(labels, dtype=np.int64)
    probs, _, caches = _run(net, x, True, rng, keep=True, fuse=fuse)
    loss = cross_entropy_loss(probs, labels)
    n = x.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    grads: list[np.ndarray] = [None] * len(net.params)
    p = len(net.params)
    first_param_layer = next(i for i, layer in enumerate(net.layers) if layer.has_params)
    for i in range(len(net.layers) - 2, -1, -1):
        layer, cache = net.layers[i], caches[i]
        k = layer.kind
        if cache is None and k in ("relu", "maxpool2x2"):
            continue
        if k == "dense":
            p -= 2
            w = net.params[p]
            grads[p] = (cache.T @ d).astype(np.float32)
            grads[p + 1] = d.sum(axis=0).astype(np.float32)
            if i > first_param_layer:
                d = d @ w.T
        elif k == "dropout":
            if cache is not None:
                d = d * cache
        elif k == "relu":
            d = d * cache
        elif k == "flatten":
            d = d.reshape(cache)
        elif k == "maxpool2x2":
            xin, out = cache
            d = _pool_backward(xin, out, d)
        elif k == "conv3x3":
            p -= 2
            if len(cache) == 5:
                _, cols, in_shape, (z, pooled), active = cache
                d = _unpool_quads(z, pooled, d * active)
                unquad = True
            else:
                cols, in_shape = cache
                unquad = False
            w = net.params[p]
            d2 = d.reshape(-1, d.shape[-1])
            grads[p] = (cols.T @ d2).reshape(w.shape).astype(np.float32)
            grads[p + 1] = d2.sum(axis=0).astype(np.float32)
            if i > first_param_layer:
                back = _col2im_quads if unquad else _col2im
                d = back(d2 @ _conv_matrix(w).T, in_shape)
    return loss, grads, probs


def backward(net: ShapeNet, batch: np.ndarray, labels, rng=None) -> list[np.ndarray]:
    return loss_and_gradients(net, batch, labels, rng)[1]


# --- inference helpers ----------------------------------------------------------


def shape_tensor(mask, size: tuple[int, int] = INPUT_SHAPE[:2]) -> np.ndarray:
    """Binary mask (BitMask or bool array) as a 0/1 float image resized to ``size``.

    The bilinear resample is thresholded at 0.5 so the result stays binary.
    """
    bits = mask.bits if isinstance(mask, BitMask) else np.asarray(mask)
    out = resize_bilinear(bits.astype(np.float32), size[1], size[0]) >= 0.5
    return out.astype(np.float32)[..., None]


def predict_proba(net: ShapeNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        return np.zeros((0, net.n_classes), dtype=np.float32)
    return np.concatenate(
        [forward(net, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    )


def predict_class(net: ShapeNet, shape) -> tuple[int, float]:
    """Most probable class (lowest index on ties) and its probability."""
    if isinstance(shape, BitMask) or np.asarray(shape).ndim == 2:
        x = shape_tensor(shape, net.input_shape[:2])
    else:
        x = np.asarray(shape, dtype=np.float32)
    probs = forward(net, x[None])[0]
    k = int(np.argmax(probs))
    return k, float(probs[k])


# --- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 70
    seed: int = 0
    dropout: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def accuracies(self) -> list[float]:
        return [e.accuracy for e in self.epochs]


def train(
    net: ShapeNet,
    images: np.ndarray,
    labels,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, ShapeNet], None] | None = None,
) -> tuple[ShapeNet, TrainHistory]:
    """Seeded SGD with momentum over shuffled mini-batches.

    Dropout layers run at ``cfg.dropout``. The learning rate is constant, so
    the state after ``k`` epochs does not depend on the total epoch budget;
    ``on_epoch(k, net)`` observes it after every epoch.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if len(labels) != len(images):
        raise ValueError("images and labels differ in length")
    if np.any(labels < 0) or np.any(labels >= net.n_classes):
        raise ValueError(f"labels must lie in 0..{net.n_classes - 1}")
    history = TrainHistory()
    if cfg.epochs == 0:
        return net, history
    layers = tuple(replace(l, rate=cfg.dropout) if l.kind == "dropout" else l for l in net.layers)
    net = replace(net, layers=layers)
    params = [p.copy() for p in net.params]
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(cfg.momentum)
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = net.with_params(params)
            loss, grads, probs = loss_and_gradients(current, images[idx], labels[idx], rng)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels[idx]))
            for p, v, g in zip(params, velocity, grads):
                v *= mu
                v -= lr * g
                p += v
        net = net.with_params(params)
        stats = EpochStats(epoch, total_loss / n, correct / n)
        history.epochs.append(stats)
        log.debug("epoch %d loss=%.4f acc=%.4f", epoch, stats.loss, stats.accuracy)
        if on_epoch is not None:
            on_epoch(epoch, net)
    return net, history


def accuracy(net: ShapeNet, images: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    pred = np.argmax(predict_proba(net, images), axis=1)
    return float(np.mean(pred == labels))


# --- weights file ---------------------------------------------------------------


def save_weights(net: ShapeNet, path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(net.params))]
    for p in net.params:
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(p.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, layers: Sequence[LayerSpec] | None = None,
                 input_shape: tuple[int, int, int] = INPUT_SHAPE) -> ShapeNet:
    """Read a weights file against a declared architecture (default: 3 stages)."""
    layers = tuple(layers) if layers is not None else architecture()
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a shape-net weights file")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    expected = param_shapes(layers, input_shape)
    if count != len(expected):
        raise FormatError(f"{path}: {count} weight tensors, architecture declares {len(expected)}")
    params = []
    for shape in expected:
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        if tuple(dims) != shape:
            raise FormatError(f"{path}: tensor shape {tuple(dims)}, architecture declares {shape}")
        n = int(np.prod(dims))
        if pos + 4 * n > len(data):
            raise FormatError(f"{path}: truncated")
        params.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims))
        pos += 4 * n
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return ShapeNet(layers, tuple(params), input_shape)


def stored_conv_stages(path) -> int:
    """Conv stage count of a weights file written for :func:`architecture`."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + 4:
        raise FormatError(f"{path}: not a shape-net weights file")
    (count,) = struct.unpack_from("<I", data, len(MAGIC))
    head = len(param_shapes(architecture(1), INPUT_SHAPE)) - 2
    stages, rem = divmod(count - head, 2)
    if rem or not 1 <= stages <= len(STAGE_WIDTHS):
        raise FormatError(f"{path}: {count} weight tensors match no known architecture")
    return stages


# --- gradient check --------------------------------------------------------------

GradFn = Callable[[ShapeNet, np.ndarray, np.ndarray, np.random.Generator], list]


def _pool_winner(x: np.ndarray, out: np.ndarray) -> np.ndarray:
    h2, w2 = out.shape[1], out.shape[2]
    winner = np.full(out.shape, -1, dtype=np.int8)
    k = 0
    for dy in (0, 1):
        for dxo in (0, 1):
            hit = (x[:, dy:2 * h2:2, dxo:2 * w2:2] == out) & (winner < 0)
            winner[hit] = k
            k += 1
    return winner


def _activation_pattern(net: ShapeNet, x: np.ndarray, seed: int) -> list[np.ndarray]:
    """ReLU on/off states and max-pool winners: the piece of the loss surface we are on."""
    _, _, caches = _run(net, x, True, np.random.default_rng(seed), keep=True, fuse=False)
    pattern = []
    for layer, cache in zip(net.layers, caches):
        if layer.kind == "relu":
            pattern.append(cache)
        elif layer.kind == "maxpool2x2":
            pattern.append(_pool_winner(*cache))
    return pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def gradient_check_report(
    net: ShapeNet,
    sample: tuple[np.ndarray, np.ndarray],
    eps: float = 1e-2,
    seed: int = 0,
    per_tensor: int = 200,
    grad_fn: GradFn | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Up to ``per_tensor`` randomly chosen entries of each weight tensor are
    perturbed by +/-``eps``. The error of an entry is
    ``|analytic - numeric| / max(|numeric|, floor)`` with ``floor`` 1 % of the
    largest numeric gradient in that tensor. An entry whose perturbation flips
    a ReLU or changes a max-pool winner is not differentiable over the probe
    interval; it is counted in ``skipped_kinks`` instead of being scored.
    Dropout masks are redrawn from ``seed`` for every evaluation.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, y = sample
    x = _check_batch(net, x)
    y = np.asarray(y, dtype=np.int64)
    grad_fn = grad_fn or backward
    analytic = grad_fn(net, x, y, np.random.default_rng(seed))
    pick = np.random.default_rng(seed + 1)
    reference = _activation_pattern(net, x, seed)

    def probe(params):
        trial = net.with_params(params)
        probs, _, _ = _run(trial, x, True, np.random.default_rng(seed), keep=False)
        smooth = _same_pattern(reference, _activation_pattern(trial, x, seed))
        return cross_entropy_loss(probs, y), smooth

    base = [p.copy() for p in net.params]
    worst = 0.0
    checked = skipped = 0
    for t, p in enumerate(base):
        flat_idx = np.arange(p.size)
        if p.size > per_tensor:
            flat_idx = np.sort(pick.choice(p.size, per_tensor, replace=False))
        numeric = np.full(len(flat_idx), np.nan)
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + np.float32(eps)
            hi = float(p[idx])
            up, smooth_up = probe(base)
            p[idx] = orig - np.float32(eps)
            lo = float(p[idx])
            down, smooth_down = probe(base)
            p[idx] = orig
            if smooth_up and smooth_down:
                numeric[j] = (up - down) / (hi - lo)
        ok = ~np.isnan(numeric)
        skipped += int((~ok).sum())
        checked += int(ok.sum())
        if not ok.any():
            continue
        a = np.asarray(analytic[t], dtype=np.float64).reshape(-1)[flat_idx][ok]
        num = numeric[ok]
        floor = max(1e-2 * float(np.max(np.abs(num))), 1e-8)
        err = np.abs(a - num) / np.maximum(np.abs(num), floor)
        worst = max(worst, float(err.max()))
    return GradCheckReport(worst, checked, skipped)


def gradient_check(
    net: ShapeNet,
    sample: tuple[np.ndarray, np.ndarray],
    eps: float = 1e-2,
    seed: int = 0,
    per_tensor: int = 200,
    grad_fn: GradFn | None = None,
) -> float:
    """Max relative error of ``backward`` against central differences (see report variant)."""
    return gradient_check_report(net, sample, eps, seed, per_tensor, grad_fn).max_rel_error
