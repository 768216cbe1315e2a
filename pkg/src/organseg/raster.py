"""RGB rasters, rectangles and binary masks, plus the image I/O around them.

Images are stored as ``(height, width, 3)`` uint8 arrays with the origin at
the top-left corner; masks as ``(height, width)`` bool arrays. Both wrappers
freeze their buffers so they can be shared freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BoundsError, FormatError

CANONICAL_WIDTH = 2000
CANONICAL_HEIGHT = 1000


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("pixel values must lie in 0..255")
        object.__setattr__(self, "pixels", _frozen(px, np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def pixel(self, x: int, y: int) -> tuple[int, int, int]:
        r, g, b = self.pixels[y, x]
        return int(r), int(g), int(b)

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative rect origin: {self}")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"empty rect: {self}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    def fits(self, width: int, height: int) -> bool:
        return self.right <= width and self.bottom <= height

    def contains(self, x: int, y: int) -> bool:
        return self.x <= x < self.right and self.y <= y < self.bottom

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.bottom), slice(self.x, self.right)


@dataclass(frozen=True, eq=False)
class BitMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"expected a 2-D mask, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits, bool))

    @classmethod
    def empty(cls, width: int, height: int) -> BitMask:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def any(self) -> bool:
        return bool(self.bits.any())

    def __eq__(self, other):
        if not isinstance(other, BitMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s < 0 for s in self.std):
            raise ValueError("channel std must be non-negative")


def channel_stats(img: RasterImage) -> ChannelStats:
    """Per-channel mean and population standard deviation on the 0-255 scale."""
    px = img.pixels.reshape(-1, 3).astype(np.float64)
    return ChannelStats(tuple(px.mean(axis=0)), tuple(px.std(axis=0)))


def pooled_stats(images) -> ChannelStats:
    """Channel statistics over the union of all pixels of ``images``."""
    n = 0
    s = np.zeros(3)
    sq = np.zeros(3)
    for img in images:
        px = img.pixels.reshape(-1, 3).astype(np.float64)
        n += px.shape[0]
        s += px.sum(axis=0)
        sq += (px**2).sum(axis=0)
    if n == 0:
        raise ValueError("no images given")
    mean = s / n
    var = np.maximum(sq / n - mean**2, 0.0)
    return ChannelStats(tuple(mean), tuple(np.sqrt(var)))


# --- file I/O ---------------------------------------------------------------


def load_image(path) -> RasterImage:
    """Decode a PNG or JPEG file into an RGB raster.

    Alpha is dropped and grayscale is expanded to three equal channels.
    Raises ``FileNotFoundError`` for a missing file and ``FormatError`` when
    the bytes cannot be decoded.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.format not in ("PNG", "JPEG"):
                raise FormatError(f"{path}: unsupported format {im.format}")
            if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
                im = im.convert("RGBA").convert("RGB")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc
    return RasterImage(arr)


def save_image(img: RasterImage, path) -> None:
    Image.fromarray(img.pixels, mode="RGB").save(Path(path), format="PNG")


def encode_mask(mask: BitMask, path) -> None:
    """Write ``mask`` as an 8-bit grayscale PNG (0 background, 255 organ)."""
    data = np.where(mask.bits, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")


def decode_mask(path) -> BitMask:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.format != "PNG" or im.mode != "L":
                raise FormatError(f"{path}: mask must be an 8-bit grayscale PNG")
            data = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode mask ({exc})") from exc
    bad = (data != 0) & (data != 255)
    if bad.any():
        value = int(data[bad][0])
        raise FormatError(f"{path}: mask contains gray value {value}")
    return BitMask(data == 255)


# --- geometry ---------------------------------------------------------------


@lru_cache(maxsize=256)
def _interp_table(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(np.float32)
    return i0, i1, frac


def resize_bilinear(array: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a float array shaped (H, W) or (H, W, C)."""
    a = np.asarray(array, dtype=np.float32)
    h_in, w_in = a.shape[:2]
    if (h_in, w_in) == (height, width):
        return a.copy()
    y0, y1, fy = _interp_table(h_in, height)
    x0, x1, fx = _interp_table(w_in, width)
    extra = (1,) * (a.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    rows = a[y0] * (1.0 - fy) + a[y1] * fy
    fx = fx.reshape((1, -1) + extra)
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def resize_image(img: RasterImage, width: int, height: int) -> RasterImage:
    if (img.width, img.height) == (width, height):
        return img
    out = resize_bilinear(img.pixels, width, height)
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def resize_canonical(img: RasterImage) -> RasterImage:
    """Resample to the 2000x1000 frame the anatomical priors are expressed in."""
    return resize_image(img, CANONICAL_WIDTH, CANONICAL_HEIGHT)


def normalize_intensity(img: RasterImage, ref: ChannelStats) -> RasterImage:
    """Match each channel's mean and std to ``ref``.

    A channel with zero spread is only shifted onto the reference mean.
    """
    px = img.pixels.astype(np.float64)
    flat = px.reshape(-1, 3)
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    ref_mu = np.asarray(ref.mean, dtype=np.float64)
    ref_sigma = np.asarray(ref.std, dtype=np.float64)
    scale = np.where(sigma > 0, ref_sigma / np.where(sigma > 0, sigma, 1.0), 1.0)
    out = (px - mu) * scale + ref_mu
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def crop(img: RasterImage, rect: Rect) -> RasterImage:
    if not rect.fits(img.width, img.height):
        raise BoundsError(f"{rect} exceeds {img.width}x{img.height} image")
    return RasterImage(img.pixels[rect.slices])


def crop_mask(mask: BitMask, rect: Rect) -> BitMask:
    if not rect.fits(mask.width, mask.height):
        raise BoundsError(f"{rect} exceeds {mask.width}x{mask.height} mask")
    return BitMask(mask.bits[rect.slices])


def embed_mask(local: BitMask, rect: Rect, width: int, height: int) -> BitMask:
    """Place a box-local mask into an otherwise empty full-size mask."""
    if (local.width, local.height) != (rect.w, rect.h):
        raise ValueError("mask size does not match rect")
    if not rect.fits(width, height):
        raise BoundsError(f"{rect} exceeds {width}x{height} frame")
    bits = np.zeros((height, width), dtype=bool)
    bits[rect.slices] = local.bits
    return BitMask(bits)


# --- augmentation -----------------------------------------------------------

MAX_TRANSLATE = 20.0
MAX_SCALE = 0.05
MAX_ROTATE = 3.0
MAX_BRIGHTNESS = 0.10


@dataclass(frozen=True)
class AugmentParams:
    """Upper bounds on each random perturbation drawn by :func:`augment_image`.

    ``translate`` is in pixels per axis, ``scale`` and ``brightness`` are
    relative (0.05 means up to +/-5 %), ``rotate`` is in degrees.
    """

    translate: float = MAX_TRANSLATE
    scale: float = MAX_SCALE
    rotate: float = MAX_ROTATE
    brightness: float = MAX_BRIGHTNESS

    def __post_init__(self):
        limits = {
            "translate": MAX_TRANSLATE,
            "scale": MAX_SCALE,
            "rotate": MAX_ROTATE,
            "brightness": MAX_BRIGHTNESS,
        }
        for name, bound in limits.items():
            value = getattr(self, name)
            if not 0.0 <= value <= bound:
                raise ValueError(f"{name} magnitude {value} outside [0, {bound}]")

    @classmethod
    def none(cls) -> AugmentParams:
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete perturbation: shift, relative scale, degrees, relative gain."""

    tx: float = 0.0
    ty: float = 0.0
    scale: float = 0.0
    rotate: float = 0.0
    brightness: float = 0.0

    def affine(self, width: int, height: int) -> np.ndarray:
        # translate, then scale and rotate about the image centre
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        theta = math.radians(self.rotate)
        s = 1.0 + self.scale
        a = s * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        c = np.array([cx, cy])
        b = c + a @ (np.array([self.tx, self.ty]) - c)
        return np.hstack([a, b[:, None]])

    @property
    def is_geometric_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.scale == 0 and self.rotate == 0


def draw_augmentation(params: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    u = rng.uniform(-1.0, 1.0, size=5)
    return AugmentDraw(
        tx=float(u[0] * params.translate),
        ty=float(u[1] * params.translate),
        scale=float(u[2] * params.scale),
        rotate=float(u[3] * params.rotate),
        brightness=float(u[4] * params.brightness),
    )


def apply_augmentation(img: RasterImage, draw: AugmentDraw) -> RasterImage:
    px = img.pixels
    if not draw.is_geometric_identity:
        m = draw.affine(img.width, img.height)
        px = cv2.warpAffine(
            np.ascontiguousarray(px), m, (img.width, img.height),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
        )
    if draw.brightness != 0:
        px = np.clip(np.rint(px.astype(np.float32) * (1.0 + draw.brightness)), 0, 255).astype(np.uint8)
    if px is img.pixels:
        return img
    return RasterImage(px)


def warp_mask(mask: BitMask, draw: AugmentDraw) -> BitMask:
    """Apply the geometric part of ``draw`` to a mask (nearest neighbour)."""
    if draw.is_geometric_identity:
        return mask
    m = draw.affine(mask.width, mask.height)
    data = cv2.warpAffine(
        mask.bits.astype(np.uint8), m, (mask.width, mask.height),
        flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    return BitMask(data > 0)


def augment_image(img: RasterImage, params: AugmentParams, rng) -> RasterImage:
    """Randomly shift, scale, rotate and re-light ``img`` within ``params``.

    ``rng`` may be a seed or a ``numpy.random.Generator``. No flips are ever
    applied: the anatomy priors are not left/right symmetric.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return apply_augmentation(img, draw_augmentation(params, rng))
