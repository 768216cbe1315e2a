"""Synthetic whole-body cross-sections with exact organ masks.

Each phantom is a bright body silhouette on a dark background with five
organs painted in their category colors. Liver and kidney share a color on
purpose, so only their shapes tell them apart. Small same-colored decoy blobs
around each organ stand in for stray tissue of similar color.

The palette, shapes and placement rules are test fixtures, not anatomy.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import cv2
import numpy as np

from .anatomy import OrganId, OrganSpec, Registry, builtin_registry, clamp_box
from .chroma import ColorCategory
from .raster import (
    CANONICAL_HEIGHT,
    CANONICAL_WIDTH,
    AugmentParams,
    BitMask,
    RasterImage,
    Rect,
    apply_augmentation,
    decode_mask,
    draw_augmentation,
    encode_mask,
    load_image,
    save_image,
    warp_mask,
)

log = logging.getLogger(__name__)

OUTSIDE_RGB = (20, 20, 25)
BODY_RGB = (120, 115, 110)
PALETTE = {
    ColorCategory.CAT1: (235, 130, 40),
    ColorCategory.CAT2: (240, 240, 225),
    ColorCategory.CAT3: (210, 10, 50),
    ColorCategory.CAT4: (30, 60, 220),
}

MANIFEST_COLUMNS = ("image_path", "organ", "present", "mask_path", "box_x", "box_y", "box_w", "box_h")

# minimum box extent (px) kept inside the frame when sampling a corner
MIN_VISIBLE = 100
MARGIN_RANGE = (0.04, 0.08)
ORGAN_GAP = 8
DECOY_GAP = 6
DECOY_TOTAL = (0.45, 0.65)
DECOY_PIECE = (0.04, 0.15)
DECOY_REACH = 0.35
MAX_TRIES = 200
MAX_RESTARTS = 50


@dataclass(frozen=True)
class PhantomParams:
    """Generation knobs.

    ``placement_jitter`` is the fraction of each plausible region, centred on
    its midpoint, from which organ corners are drawn (1.0 = whole region).
    ``presence`` maps organs to inclusion probabilities (missing = 1.0).
    """

    seed: int = 0
    noise: int = 12
    placement_jitter: float = 1.0
    presence: Mapping[OrganId, float] = field(default_factory=dict)
    decoys: bool = True

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        if not 0.0 <= self.placement_jitter <= 1.0:
            raise ValueError("placement jitter must lie in [0, 1]")
        for organ, p in self.presence.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"presence probability for {organ} outside [0, 1]")

    def presence_of(self, organ: OrganId) -> float:
        return float(self.presence.get(organ, 1.0))


@dataclass(frozen=True, eq=False)
class OrganTruth:
    organ: OrganId
    present: bool
    mask: BitMask
    box: Rect | None


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    image: RasterImage
    organs: dict[OrganId, OrganTruth]

    def __getitem__(self, organ: OrganId) -> OrganTruth:
        return self.organs[organ]

    def __eq__(self, other):
        if not isinstance(other, PhantomTruth):
            return NotImplemented
        if self.image != other.image or self.organs.keys() != other.organs.keys():
            return False
        return all(
            a.present == b.present and a.box == b.box and a.mask == b.mask
            for a, b in ((self.organs[k], other.organs[k]) for k in self.organs)
        )

    __hash__ = None


# --- shapes --------------------------------------------------------------------
# Each shape is drawn on normalized coordinates u (left to right) and v (top
# to bottom), both spanning [-1, 1] across the organ's inner rectangle.


def _ellipse(u, v, cu, cv, ru, rv, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    du, dv = u - cu, v - cv
    pu = du * c + dv * s
    pv = -du * s + dv * c
    return (pu / ru) ** 2 + (pv / rv) ** 2 <= 1.0


def _brain(u, v, rng):
    j = rng.uniform(-0.05, 0.05, size=4)
    main = _ellipse(u, v, 0.08 + j[0], 0.0 + j[1], 0.86, 0.78)
    bulb = _ellipse(u, v, -0.78, -0.2 + j[2], 0.22, 0.2)
    cerebellum = _ellipse(u, v, 0.68, 0.62 + j[3], 0.3, 0.33)
    return main | bulb | cerebellum


def _heart(u, v, rng):
    angle = np.deg2rad(rng.uniform(25.0, 45.0))
    ru, rv = 1.0, rng.uniform(0.5, 0.62)
    # shrink so the rotated ellipse stays inside the unit square
    extent = max(np.hypot(ru * np.cos(angle), rv * np.sin(angle)),
                 np.hypot(ru * np.sin(angle), rv * np.cos(angle)))
    return _ellipse(u, v, 0.0, 0.0, ru / extent, rv / extent, angle)


def _liver(u, v, rng):
    j = rng.uniform(-0.05, 0.05, size=2)
    upper = _ellipse(u, v, -0.32 + j[0], -0.22, 0.68, 0.78)
    lower = _ellipse(u, v, 0.36, 0.3 + j[1], 0.64, 0.7)
    return upper | lower


def _kidney(u, v, rng):
    body = _ellipse(u, v, 0.0, 0.0, 0.72, 1.0)
    hilum = _ellipse(u, v, 0.82, rng.uniform(-0.08, 0.08), 0.42, 0.4)
    return body & ~hilum


def _spine(u, v, rng):
    phase = rng.uniform(0.0, 1.0)
    center = 0.25 * np.sin(np.pi * (u + phase) / 2.0)
    band = np.abs(v - center) <= 0.55
    segment = np.mod((u + 1.0) * 5.0 + phase, 1.0) < 0.22
    notch = segment & (v - center < -0.15)
    return band & ~notch & (np.abs(u) <= 1.0)


SHAPES = {
    OrganId.BRAIN: _brain,
    OrganId.HEART: _heart,
    OrganId.LIVER: _liver,
    OrganId.KIDNEY: _kidney,
    OrganId.SPINE: _spine,
}


def render_shape(organ: OrganId, box: Rect, rng: np.random.Generator) -> np.ndarray:
    """Box-local bool mask of ``organ`` inset by a random margin."""
    mu, mv = rng.uniform(*MARGIN_RANGE, size=2)
    x = (np.arange(box.w) + 0.5) / box.w * 2.0 - 1.0
    y = (np.arange(box.h) + 0.5) / box.h * 2.0 - 1.0
    u = x[None, :] / (1.0 - 2.0 * mu)
    v = y[:, None] / (1.0 - 2.0 * mv)
    inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return SHAPES[organ](u, v, rng) & inside


# --- placement -------------------------------------------------------------------


def _corner_range(lo: int, hi: int, box: int, frame: int, jitter: float) -> tuple[int, int]:
    hi = min(hi, frame - min(box, MIN_VISIBLE))
    hi = max(hi, lo)
    mid = (lo + hi) / 2.0
    half = (hi - lo) * jitter / 2.0
    return int(np.ceil(mid - half)), int(np.floor(mid + half))


def _sample_box(spec: OrganSpec, jitter: float, rng: np.random.Generator) -> Rect:
    r = spec.region
    alo, ahi = _corner_range(r.amin, r.amax, spec.box_w, CANONICAL_WIDTH, jitter)
    blo, bhi = _corner_range(r.bmin, r.bmax, spec.box_h, CANONICAL_HEIGHT, jitter)
    a = int(rng.integers(alo, ahi + 1))
    b = int(rng.integers(blo, bhi + 1))
    return clamp_box(a, b, spec.box_w, spec.box_h)


def _dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))
    return cv2.dilate(bits.astype(np.uint8), kernel) > 0


def _body_mask() -> np.ndarray:
    y, x = np.mgrid[0:CANONICAL_HEIGHT, 0:CANONICAL_WIDTH]
    u = (x + 0.5 - CANONICAL_WIDTH / 2) / (CANONICAL_WIDTH / 2 - 8)
    v = (y + 0.5 - CANONICAL_HEIGHT / 2) / (CANONICAL_HEIGHT / 2 - 8)
    return np.abs(u) ** 6 + np.abs(v) ** 6 <= 1.0


_BODY = None


def body_mask() -> np.ndarray:
    global _BODY
    if _BODY is None:
        _BODY = _body_mask()
        _BODY.setflags(write=False)
    return _BODY


def _place_organs(registry: Registry, params: PhantomParams, rng: np.random.Generator):
    placed: dict[OrganId, tuple[Rect, np.ndarray]] = {}
    blocked = np.zeros((CANONICAL_HEIGHT, CANONICAL_WIDTH), dtype=bool)
    for spec in registry:
        if rng.random() >= params.presence_of(spec.organ):
            continue
        for _ in range(MAX_TRIES):
            box = _sample_box(spec, params.placement_jitter, rng)
            local = render_shape(spec.organ, box, rng)
            if not local.any() or np.any(blocked[box.slices] & local):
                continue
            # same-colored organs must stay out of each other's boxes
            clash = False
            for other, (obox, omask) in placed.items():
                if registry[other].category is not spec.category:
                    continue
                if np.any(omask[box.slices]) or np.any(local & _inside(box, obox)):
                    clash = True
                    break
            if clash:
                continue
            full = np.zeros_like(blocked)
            full[box.slices] = local
            placed[spec.organ] = (box, full)
            blocked |= _dilate(full, ORGAN_GAP)
            break
        else:
            return None
    return placed


def _inside(box: Rect, other: Rect) -> np.ndarray:
    """Box-local bool map of the pixels of ``box`` that fall inside ``other``."""
    out = np.zeros((box.h, box.w), dtype=bool)
    x0, y0 = max(box.x, other.x), max(box.y, other.y)
    x1, y1 = min(box.right, other.right), min(box.bottom, other.bottom)
    if x0 < x1 and y0 < y1:
        out[y0 - box.y:y1 - box.y, x0 - box.x:x1 - box.x] = True
    return out


def _add_decoys(placed, registry: Registry, rng: np.random.Generator) -> dict[ColorCategory, np.ndarray]:
    """Scatter gap-separated same-colored blobs around each organ."""
    blocked = np.zeros((CANONICAL_HEIGHT, CANONICAL_WIDTH), dtype=bool)
    for _, full in placed.values():
        blocked |= _dilate(full, ORGAN_GAP)
    blocked |= ~body_mask()
    decoys: dict[ColorCategory, np.ndarray] = {}
    for organ, (box, full) in placed.items():
        category = registry[organ].category
        layer = decoys.setdefault(category, np.zeros_like(blocked))
        area = int(full.sum())
        target = rng.uniform(*DECOY_TOTAL) * area
        reach_x, reach_y = int(box.w * DECOY_REACH), int(box.h * DECOY_REACH)
        added = 0
        for _ in range(MAX_TRIES):
            if added >= target:
                break
            piece = rng.uniform(*DECOY_PIECE) * area
            aspect = rng.uniform(0.5, 2.0)
            ru = max(np.sqrt(piece * aspect / np.pi), 2.0)
            rv = max(piece / (np.pi * ru), 2.0)
            cx = rng.uniform(box.x - reach_x, box.right + reach_x)
            cy = rng.uniform(box.y - reach_y, box.bottom + reach_y)
            angle = rng.uniform(0.0, np.pi)
            r = int(np.ceil(max(ru, rv))) + 1
            x0, x1 = int(max(cx - r, 0)), int(min(cx + r + 1, CANONICAL_WIDTH))
            y0, y1 = int(max(cy - r, 0)), int(min(cy + r + 1, CANONICAL_HEIGHT))
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            blob = _ellipse(xx + 0.5, yy + 0.5, cx, cy, ru, rv, angle)
            if not blob.any() or np.any(blocked[y0:y1, x0:x1] & blob):
                continue
            layer[y0:y1, x0:x1] |= blob
            py0, px0 = max(y0 - DECOY_GAP, 0), max(x0 - DECOY_GAP, 0)
            py1, px1 = min(y1 + DECOY_GAP, CANONICAL_HEIGHT), min(x1 + DECOY_GAP, CANONICAL_WIDTH)
            padded = np.zeros((py1 - py0, px1 - px0), dtype=bool)
            padded[y0 - py0:y1 - py0, x0 - px0:x1 - px0] = blob
            blocked[py0:py1, px0:px1] |= _dilate(padded, DECOY_GAP)
            added += int(blob.sum())
    return decoys


def _paint(placed, decoys, registry: Registry, noise: int, rng: np.random.Generator) -> RasterImage:
    px = np.empty((CANONICAL_HEIGHT, CANONICAL_WIDTH, 3), dtype=np.int16)
    px[:] = OUTSIDE_RGB
    px[body_mask()] = BODY_RGB
    for category, layer in decoys.items():
        px[layer] = PALETTE[category]
    for organ, (_, full) in placed.items():
        px[full] = PALETTE[registry[organ].category]
    if noise > 0:
        px += rng.integers(-noise, noise + 1, size=px.shape, dtype=np.int16)
    return RasterImage(np.clip(px, 0, 255).astype(np.uint8))


def generate_phantom(params: PhantomParams = PhantomParams(), registry: Registry | None = None) -> PhantomTruth:
    """Render one phantom; the result is a pure function of ``params`` and ``registry``."""
    registry = registry if registry is not None else builtin_registry()
    rng = np.random.default_rng(params.seed)
    for _ in range(MAX_RESTARTS):
        placed = _place_organs(registry, params, rng)
        if placed is not None:
            break
    else:
        raise RuntimeError(f"could not place organs for seed {params.seed}")
    decoys = _add_decoys(placed, registry, rng) if params.decoys else {}
    image = _paint(placed, decoys, registry, params.noise, rng)
    empty = BitMask.empty(CANONICAL_WIDTH, CANONICAL_HEIGHT)
    organs = {}
    for spec in registry:
        if spec.organ in placed:
            box, full = placed[spec.organ]
            organs[spec.organ] = OrganTruth(spec.organ, True, BitMask(full), box)
        else:
            organs[spec.organ] = OrganTruth(spec.organ, False, empty, None)
    return PhantomTruth(image, organs)


# --- datasets on disk --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    image_path: Path
    organ: OrganId
    present: bool
    mask_path: Path | None
    box: Rect | None


def _write_manifest(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _manifest_entry(image_rel: str, organ: OrganId, truth: OrganTruth | None,
                    mask_rel: str | None) -> dict:
    row = {"image_path": image_rel, "organ": organ.value, "present": 0,
           "mask_path": "", "box_x": "", "box_y": "", "box_w": "", "box_h": ""}
    if truth is not None and truth.present:
        b = truth.box
        row.update(present=1, mask_path=mask_rel, box_x=b.x, box_y=b.y, box_w=b.w, box_h=b.h)
    return row


def generate_dataset(n: int, params: PhantomParams, registry: Registry | None, out_dir) -> Path:
    """Write ``n`` phantoms (seeds ``params.seed + i``) and return the manifest path."""
    if n < 1:
        raise ValueError("n must be at least 1")
    registry = registry if registry is not None else builtin_registry()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        truth = generate_phantom(PhantomParams(
            seed=params.seed + i, noise=params.noise, placement_jitter=params.placement_jitter,
            presence=params.presence, decoys=params.decoys,
        ), registry)
        stem = f"phantom_{i:04d}"
        image_rel = f"images/{stem}.png"
        save_image(truth.image, out / image_rel)
        for organ in registry.organs:
            t = truth[organ]
            mask_rel = None
            if t.present:
                mask_rel = f"masks/{stem}_{organ.value.lower()}.png"
                encode_mask(t.mask, out / mask_rel)
            rows.append(_manifest_entry(image_rel, organ, t, mask_rel))
    manifest = out / "manifest.csv"
    _write_manifest(manifest, rows)
    log.info("wrote %d phantoms to %s", n, out)
    return manifest


def read_manifest(path) -> list[ManifestRow]:
    """Parse a manifest; paths come back resolved against the manifest's folder."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for line in reader:
            present = line["present"].strip() in ("1", "true", "True")
            box = None
            mask = None
            if present:
                box = Rect(*(int(line[k]) for k in ("box_x", "box_y", "box_w", "box_h")))
                mask = base / line["mask_path"]
            rows.append(ManifestRow(base / line["image_path"], OrganId.parse(line["organ"]),
                                    present, mask, box))
    return rows


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """An image with the ground truth of every organ listed for it."""

    path: Path
    image: RasterImage
    masks: dict[OrganId, BitMask]
    boxes: dict[OrganId, Rect]


def load_labeled(path) -> list[LabeledImage]:
    """Group manifest rows by image and load pixels and masks."""
    grouped: dict[Path, list[ManifestRow]] = {}
    for row in read_manifest(path):
        grouped.setdefault(row.image_path, []).append(row)
    out = []
    for image_path, rows in grouped.items():
        image = load_image(image_path)
        masks, boxes = {}, {}
        for row in rows:
            if row.present:
                masks[row.organ] = decode_mask(row.mask_path)
                boxes[row.organ] = row.box
            else:
                masks[row.organ] = BitMask.empty(image.width, image.height)
        out.append(LabeledImage(image_path, image, masks, boxes))
    return out


def _shift_box(box: Rect, draw, width: int, height: int, mask: BitMask) -> Rect | None:
    if not mask.any():
        return None
    x = int(round(box.x + draw.tx))
    y = int(round(box.y + draw.ty))
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + box.w, width), min(y + box.h, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return Rect(x0, y0, x1 - x0, y1 - y0)


def augment_dataset(manifest, copies: int, params: AugmentParams, seed: int, out_dir) -> Path:
    """Write ``copies`` perturbed variants of every manifest image.

    Masks follow the same geometric warp (nearest neighbour); boxes are
    translated and clipped. Box size is not rescaled by the small zoom.
    """
    if copies < 1:
        raise ValueError("copies must be at least 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for item in load_labeled(manifest):
        for k in range(copies):
            draw = draw_augmentation(params, rng)
            stem = f"{item.path.stem}_aug{k:03d}"
            image_rel = f"images/{stem}.png"
            save_image(apply_augmentation(item.image, draw), out / image_rel)
            for organ, mask in item.masks.items():
                warped = warp_mask(mask, draw)
                box = _shift_box(item.boxes[organ], draw, mask.width, mask.height, warped) \
                    if organ in item.boxes else None
                if box is None:
                    rows.append(_manifest_entry(image_rel, organ, None, None))
                    continue
                mask_rel = f"masks/{stem}_{organ.value.lower()}.png"
                encode_mask(warped, out / mask_rel)
                rows.append(_manifest_entry(image_rel, organ, OrganTruth(organ, True, warped, box), mask_rel))
    manifest_out = out / "manifest.csv"
    _write_manifest(manifest_out, rows)
    return manifest_out
