"""Organ localization and segmentation on canonical images.

For one organ the pipeline classifies every pixel by color once, then slides
the organ's box over its plausible region. Each candidate's same-category
pixels form a shape image which the shape net scores; the best-scoring box
wins and its largest connected shape becomes the organ mask.

Also here: the crop conventions used to train and evaluate the shape net, and
a per-pixel baseline that sees only position and color.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .anatomy import DEFAULT_STRIDE, OrganId, Registry, spec_candidates
from .chroma import ColorCategory, ColorModel, classify_image, fit_softmax, train_color_model_arrays
from .raster import CANONICAL_HEIGHT, CANONICAL_WIDTH, BitMask, RasterImage, Rect, embed_mask
from .shapenet import CLASS_NAMES, NONE_CLASS, ShapeNet, predict_proba, shape_tensor

log = logging.getLogger(__name__)

SCORE_BATCH = 64


@dataclass(frozen=True)
class PipelineConfig:
    stride: int = DEFAULT_STRIDE
    threshold: float = 0.5
    largest_component: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    organ: OrganId
    found: bool
    box: Rect
    mask: BitMask
    score: float

    def __eq__(self, other):
        if not isinstance(other, SegmentationResult):
            return NotImplemented
        return (self.organ, self.found, self.box, self.score) == (
            other.organ, other.found, other.box, other.score) and self.mask == other.mask

    __hash__ = None


def class_index(organ: OrganId) -> int:
    return CLASS_NAMES.index(organ.value)


def _check_canonical(img: RasterImage) -> None:
    if (img.width, img.height) != (CANONICAL_WIDTH, CANONICAL_HEIGHT):
        raise ValueError(
            f"expected a {CANONICAL_WIDTH}x{CANONICAL_HEIGHT} image, got {img.width}x{img.height}"
        )


def largest_component(mask) -> BitMask:
    """Keep the biggest 4-connected component; ties go to the one seen first in scan order."""
    bits = mask.bits if isinstance(mask, BitMask) else np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(bits)
    if n <= 1:
        return BitMask(bits)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    # ndimage numbers components in scan order of their first pixel
    return BitMask(labels == int(np.argmax(sizes)))


# --- candidate scoring ------------------------------------------------------------


def score_boxes(category_bits: np.ndarray, boxes: Sequence[Rect], net: ShapeNet,
                class_idx: int) -> np.ndarray:
    """Probability of ``class_idx`` for the shape image under each box.

    Identical shape images are scored once.
    """
    size = net.input_shape[:2]
    scores = np.empty(len(boxes), dtype=np.float64)
    known: dict[bytes, float] = {}
    for start in range(0, len(boxes), SCORE_BATCH):
        chunk = boxes[start:start + SCORE_BATCH]
        keys, fresh, fresh_keys = [], [], {}
        for box in chunk:
            t = shape_tensor(category_bits[box.slices], size)
            key = hashlib.blake2b(t.tobytes(), digest_size=16).digest()
            keys.append(key)
            if key not in known and key not in fresh_keys:
                fresh_keys[key] = len(fresh)
                fresh.append(t)
        if fresh:
            probs = predict_proba(net, np.stack(fresh))[:, class_idx]
            for key, j in fresh_keys.items():
                known[key] = float(probs[j])
        scores[start:start + len(chunk)] = [known[k] for k in keys]
    return scores


def score_candidates(img: RasterImage, organ: OrganId, registry: Registry, color_model: ColorModel,
                     net: ShapeNet, cfg: PipelineConfig = PipelineConfig(), labels=None):
    """Candidate boxes for ``organ`` in scan order with their scores."""
    _check_canonical(img)
    spec = registry[organ]
    if labels is None:
        labels = classify_image(color_model, img)
    boxes = spec_candidates(spec, cfg.stride)
    bits = labels == spec.category.index
    return boxes, score_boxes(bits, boxes, net, class_index(organ)), bits


def segment_organ(img: RasterImage, organ: OrganId, registry: Registry, color_model: ColorModel,
                  net: ShapeNet, cfg: PipelineConfig = PipelineConfig(), labels=None) -> SegmentationResult:
    """Locate and segment one organ.

    ``labels`` may carry a precomputed :func:`classify_image` map of ``img``.
    """
    boxes, scores, bits = score_candidates(img, organ, registry, color_model, net, cfg, labels)
    best = int(np.argmax(scores))
    box, score = boxes[best], float(scores[best])
    if score < cfg.threshold:
        return SegmentationResult(organ, False, box, BitMask.empty(img.width, img.height), score)
    local = BitMask(bits[box.slices])
    if cfg.largest_component:
        local = largest_component(local)
    return SegmentationResult(organ, True, box, embed_mask(local, box, img.width, img.height), score)


def segment_all_organs(img: RasterImage, registry: Registry, color_model: ColorModel, net: ShapeNet,
                       cfg: PipelineConfig = PipelineConfig()) -> list[SegmentationResult]:
    _check_canonical(img)
    labels = classify_image(color_model, img)
    return [segment_organ(img, organ, registry, color_model, net, cfg, labels) for organ in registry.organs]


# --- color training material -----------------------------------------------------


class Annotated(Protocol):
    image: RasterImage
    masks: Mapping[OrganId, BitMask]
    boxes: Mapping[OrganId, Rect]


def color_training_pixels(items: Iterable[Annotated], registry: Registry, per_class: int = 4000,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """RGB rows and category labels drawn uniformly from each category's pixels.

    Organ-mask pixels carry their organ's category; all other pixels are
    background. Each image contributes at most ``per_class`` pixels per
    category, and ``per_class`` are then drawn from the union.
    """
    rng = np.random.default_rng(seed)
    pools: dict[int, list[np.ndarray]] = {}
    for item in items:
        px = item.image.pixels.reshape(-1, 3)
        cat = np.full(px.shape[0], ColorCategory.BACKGROUND.index, dtype=np.int64)
        for organ, mask in item.masks.items():
            cat[mask.bits.ravel()] = registry[organ].category.index
        for c in np.unique(cat):
            members = np.flatnonzero(cat == c)
            if len(members) > per_class:
                members = np.sort(rng.choice(members, size=per_class, replace=False))
            pools.setdefault(int(c), []).append(px[members])
    rgb, labels = [], []
    for c in sorted(pools):
        pool = np.concatenate(pools[c])
        pick = rng.choice(len(pool), size=min(per_class, len(pool)), replace=False)
        rgb.append(pool[np.sort(pick)])
        labels.append(np.full(len(pick), c, dtype=np.int64))
    if not rgb:
        return np.zeros((0, 3), dtype=np.uint8), np.zeros(0, dtype=np.int64)
    return np.concatenate(rgb), np.concatenate(labels)


def train_color_from_items(items: Iterable[Annotated], registry: Registry, per_class: int = 4000,
                           seed: int = 0, epochs: int = 60, learning_rate: float = 0.5) -> ColorModel:
    rgb, labels = color_training_pixels(items, registry, per_class, seed)
    return train_color_model_arrays(rgb, labels, epochs=epochs, learning_rate=learning_rate, seed=seed)


# --- shape-net training material ----------------------------------------------------


POSITIVE_COVERAGE = 0.995
NEGATIVE_COVERAGE = 0.9


def coverage(mask: np.ndarray, box: Rect, total: int | None = None) -> float:
    """Fraction of the mask's pixels that fall inside ``box``."""
    total = int(np.count_nonzero(mask)) if total is None else total
    if total == 0:
        return 0.0
    return int(np.count_nonzero(mask[box.slices])) / total


def _coverages(mask: np.ndarray, boxes: Sequence[Rect]) -> np.ndarray:
    total = int(np.count_nonzero(mask))
    integral = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    out = np.empty(len(boxes))
    for i, b in enumerate(boxes):
        inside = (integral[b.bottom, b.right] - integral[b.y, b.right]
                  - integral[b.bottom, b.x] + integral[b.y, b.x])
        out[i] = inside / total if total else 0.0
    return out


def _crop_tensor(bits: np.ndarray, box: Rect, net_shape) -> np.ndarray:
    return shape_tensor(bits[box.slices], net_shape[:2])


def shape_training_set(
    items: Iterable[Annotated],
    registry: Registry,
    color_model: ColorModel,
    seed: int = 0,
    jittered: int = 1,
    negatives: int = 2,
    stride: int = DEFAULT_STRIDE,
    input_shape=(128, 128, 1),
) -> tuple[np.ndarray, np.ndarray]:
    """Color-filtered crops with class labels.

    Per image: the true box of every present organ, ``jittered`` grid
    candidates that still hold at least 99.5 % of a random organ, and
    ``negatives`` candidates holding at most 90 % of a random organ, which are
    labeled None. Half of the negatives are near misses overlapping the organ.
    """
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for item in items:
        labels = classify_image(color_model, item.image)
        present = [o for o in registry.organs if o in item.boxes and item.masks[o].any()]
        for organ in present:
            bits = labels == registry[organ].category.index
            xs.append(_crop_tensor(bits, item.boxes[organ], input_shape))
            ys.append(class_index(organ))
        if not present:
            continue
        for _ in range(jittered):
            organ = present[rng.integers(len(present))]
            boxes = spec_candidates(registry[organ], stride)
            cov = _coverages(item.masks[organ].bits, boxes)
            ok = np.flatnonzero(cov >= POSITIVE_COVERAGE)
            if len(ok):
                box = boxes[int(rng.choice(ok))]
                bits = labels == registry[organ].category.index
                xs.append(_crop_tensor(bits, box, input_shape))
                ys.append(class_index(organ))
        for k in range(negatives):
            organ = present[rng.integers(len(present))]
            boxes = spec_candidates(registry[organ], stride)
            cov = _coverages(item.masks[organ].bits, boxes)
            pool = np.flatnonzero(cov <= NEGATIVE_COVERAGE)
            near = pool[cov[pool] >= 0.3]
            if k % 2 == 0 and len(near):
                pool = near
            if len(pool):
                box = boxes[int(rng.choice(pool))]
                bits = labels == registry[organ].category.index
                xs.append(_crop_tensor(bits, box, input_shape))
                ys.append(NONE_CLASS)
    if not xs:
        return np.zeros((0,) + tuple(input_shape), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.stack(xs).astype(np.float32), np.array(ys, dtype=np.int64)


def shape_eval_set(items: Iterable[Annotated], registry: Registry, color_model: ColorModel,
                   seed: int = 0, stride: int = DEFAULT_STRIDE, input_shape=(128, 128, 1)):
    """Balanced held-out crops: five true boxes and one None crop per image."""
    return shape_training_set(items, registry, color_model, seed=seed, jittered=0, negatives=1,
                              stride=stride, input_shape=input_shape)


# --- pixel baseline ------------------------------------------------------------------

N_BASELINE_CLASSES = len(CLASS_NAMES)


@dataclass(frozen=True, eq=False)
class BaselineModel:
    """Multinomial logistic model over (x, y, r, g, b); classes follow the shape-net order."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.shape != (N_BASELINE_CLASSES, 5) or b.shape != (N_BASELINE_CLASSES,):
            raise ValueError(f"bad baseline shapes {w.shape}, {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


def pixel_features(img: RasterImage, ys=None, xs=None) -> np.ndarray:
    """(n, 5) features x/2000, y/1000, r/255, g/255, b/255 for the given pixels (all by default)."""
    if ys is None:
        ys, xs = np.mgrid[0:img.height, 0:img.width]
        ys, xs = ys.ravel(), xs.ravel()
    rgb = img.pixels[ys, xs].astype(np.float64) / 255.0
    return np.column_stack([xs / CANONICAL_WIDTH, ys / CANONICAL_HEIGHT, rgb])


def train_baseline(items: Iterable[Annotated], samples_per_image: int = 4000, seed: int = 0,
                   epochs: int = 20, learning_rate: float = 0.5) -> BaselineModel:
    """Fit the baseline on uniformly sampled pixels labeled by organ (or None)."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for item in items:
        img = item.image
        ys = rng.integers(0, img.height, samples_per_image)
        xs = rng.integers(0, img.width, samples_per_image)
        y = np.full(samples_per_image, NONE_CLASS, dtype=np.int64)
        for organ, mask in item.masks.items():
            y[mask.bits[ys, xs]] = class_index(organ)
        feats.append(pixel_features(img, ys, xs))
        labels.append(y)
    if not feats:
        raise ValueError("no baseline training images")
    w, b = fit_softmax(np.concatenate(feats), np.concatenate(labels), N_BASELINE_CLASSES,
                       epochs=epochs, learning_rate=learning_rate, batch_size=256, seed=seed)
    return BaselineModel(w, b)


def baseline_labels(img: RasterImage, model: BaselineModel) -> np.ndarray:
    scores = pixel_features(img) @ model.weights.astype(np.float64).T + model.bias.astype(np.float64)
    return np.argmax(scores, axis=1).reshape(img.height, img.width)


def baseline_pixel_segment(img: RasterImage, organ: OrganId, model: BaselineModel, labels=None) -> BitMask:
    """Full-frame mask of pixels the baseline assigns to ``organ``."""
    if labels is None:
        labels = baseline_labels(img, model)
    return BitMask(labels == class_index(organ))
