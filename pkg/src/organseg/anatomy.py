"""Per-organ anatomical priors and candidate bounding-box enumeration.

A plausible region bounds the top-left corner of an organ's bounding box in
the canonical 2000x1000 frame. The ``a`` axis runs left to right (columns)
and ``b`` top to bottom (rows).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .chroma import ColorCategory
from .errors import RegistryParseError, RegistryValidationError
from .raster import CANONICAL_HEIGHT, CANONICAL_WIDTH, Rect

DEFAULT_STRIDE = 10


class OrganId(Enum):
    BRAIN = "Brain"
    HEART = "Heart"
    LIVER = "Liver"
    KIDNEY = "Kidney"
    SPINE = "Spine"

    @property
    def index(self) -> int:
        return _ORGAN_ORDER.index(self)

    @classmethod
    def parse(cls, name: str) -> OrganId:
        for organ in cls:
            if organ.value.lower() == name.strip().lower():
                return organ
        raise ValueError(f"unknown organ {name!r}")


_ORGAN_ORDER = list(OrganId)


@dataclass(frozen=True)
class PlausibleRegion:
    amin: int
    bmin: int
    amax: int
    bmax: int

    def __post_init__(self):
        if self.amin > self.amax or self.bmin > self.bmax:
            raise ValueError(f"inverted region {self}")
        if min(self.amin, self.bmin) < 0:
            raise ValueError(f"negative region bound {self}")
        if self.amax > CANONICAL_WIDTH or self.bmax > CANONICAL_HEIGHT:
            raise ValueError(f"region {self} leaves the canonical frame")

    def contains(self, a: float, b: float) -> bool:
        return self.amin <= a <= self.amax and self.bmin <= b <= self.bmax


@dataclass(frozen=True)
class OrganSpec:
    organ: OrganId
    box_w: int
    box_h: int
    region: PlausibleRegion
    category: ColorCategory

    def __post_init__(self):
        if self.box_w < 1 or self.box_h < 1:
            raise ValueError(f"box size must be positive: {self.box_w}x{self.box_h}")
        if self.category is ColorCategory.BACKGROUND:
            raise ValueError("an organ cannot use the background category")


class Registry:
    """Ordered, organ-unique collection of :class:`OrganSpec`."""

    def __init__(self, specs: Iterable[OrganSpec]):
        specs = tuple(specs)
        seen = set()
        for spec in specs:
            if spec.organ in seen:
                raise RegistryValidationError(f"duplicate organ {spec.organ.value}")
            seen.add(spec.organ)
        missing = [o.value for o in OrganId if o not in seen]
        if missing:
            raise RegistryValidationError(f"missing organs: {', '.join(missing)}")
        self._specs = specs
        self._by_organ = {s.organ: s for s in specs}

    def __iter__(self) -> Iterator[OrganSpec]:
        return iter(self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def __getitem__(self, organ: OrganId) -> OrganSpec:
        return self._by_organ[organ]

    @property
    def organs(self) -> list[OrganId]:
        return [s.organ for s in self._specs]

    def __eq__(self, other):
        if not isinstance(other, Registry):
            return NotImplemented
        return self._specs == other._specs

    def __repr__(self):
        return f"Registry({list(self._specs)!r})"


def builtin_registry() -> Registry:
    """Box sizes, corner regions and color categories for the five organs."""
    rows = [
        (OrganId.BRAIN, 400, 400, (0, 400, 120, 630), ColorCategory.CAT1),
        (OrganId.HEART, 100, 100, (800, 430, 990, 1000), ColorCategory.CAT3),
        (OrganId.LIVER, 300, 800, (1010, 400, 1400, 710), ColorCategory.CAT4),
        (OrganId.KIDNEY, 400, 400, (1200, 190, 1500, 500), ColorCategory.CAT4),
        (OrganId.SPINE, 600, 200, (100, 50, 400, 400), ColorCategory.CAT2),
    ]
    return Registry(
        OrganSpec(organ, w, h, PlausibleRegion(*region), cat) for organ, w, h, region, cat in rows
    )


# --- registry file ------------------------------------------------------------

_LINE_RE = re.compile(
    r"""^organ\s*=\s*(?P<organ>\w+)\s+
        box\s*=\s*(?P<w>-?\d+)\s*[xX]\s*(?P<h>-?\d+)\s+
        region\s*=\s*(?P<amin>-?\d+)\s*,\s*(?P<bmin>-?\d+)\s*:\s*(?P<amax>-?\d+)\s*,\s*(?P<bmax>-?\d+)\s+
        category\s*=\s*(?P<cat>\w+)$""",
    re.VERBOSE,
)


def serialize_registry(registry: Registry) -> str:
    lines = ["# organ priors: box size, corner region (amin,bmin:amax,bmax), color category"]
    for s in registry:
        r = s.region
        lines.append(
            f"organ={s.organ.value} box={s.box_w}x{s.box_h} "
            f"region={r.amin},{r.bmin}:{r.amax},{r.bmax} category={s.category.name}"
        )
    return "\n".join(lines) + "\n"


def parse_registry(text: str) -> Registry:
    specs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if m is None:
            raise RegistryParseError(lineno, f"cannot parse {raw.strip()!r}")
        try:
            organ = OrganId.parse(m["organ"])
        except ValueError as exc:
            raise RegistryParseError(lineno, str(exc)) from None
        cat_name = m["cat"].upper()
        if cat_name not in ColorCategory.__members__ or cat_name == "BACKGROUND":
            raise RegistryParseError(lineno, f"unknown category {m['cat']!r}")
        nums = {k: int(m[k]) for k in ("w", "h", "amin", "bmin", "amax", "bmax")}
        if nums["w"] < 1 or nums["h"] < 1:
            raise RegistryParseError(lineno, f"box size must be positive, got {nums['w']}x{nums['h']}")
        try:
            region = PlausibleRegion(nums["amin"], nums["bmin"], nums["amax"], nums["bmax"])
        except ValueError as exc:
            raise RegistryParseError(lineno, str(exc)) from None
        specs.append(OrganSpec(organ, nums["w"], nums["h"], region, ColorCategory[cat_name]))
    return Registry(specs)


# --- deriving regions -----------------------------------------------------------


def region_bounds(corners: Sequence[tuple[float, float]]) -> tuple[float, float, float, float]:
    """Unrounded, unclamped ``mean -/+ 3 s`` bounds: (a_lo, b_lo, a_hi, b_hi)."""
    pts = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one annotated corner")
    mean = pts.mean(axis=0)
    sd = pts.std(axis=0, ddof=1) if len(pts) > 1 else np.zeros(2)
    lo = mean - 3 * sd
    hi = mean + 3 * sd
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _round_down(v: float) -> int:
    return int(math.floor(round(v, 6) / 10.0) * 10)


def _round_up(v: float) -> int:
    return int(math.ceil(round(v, 6) / 10.0) * 10)


def plausible_region_from_stats(corners: Sequence[tuple[float, float]]) -> PlausibleRegion:
    """Corner region from annotated top-left corners.

    Each axis spans mean +/- 3 sample standard deviations, widened outward to
    multiples of ten and clamped to the canonical frame.
    """
    a_lo, b_lo, a_hi, b_hi = region_bounds(corners)
    a_lo = min(max(_round_down(a_lo), 0), CANONICAL_WIDTH)
    b_lo = min(max(_round_down(b_lo), 0), CANONICAL_HEIGHT)
    a_hi = max(min(_round_up(a_hi), CANONICAL_WIDTH), a_lo)
    b_hi = max(min(_round_up(b_hi), CANONICAL_HEIGHT), b_lo)
    return PlausibleRegion(a_lo, b_lo, a_hi, b_hi)


# --- candidate boxes ---------------------------------------------------------------


def grid_positions(lo: int, hi: int, stride: int) -> list[int]:
    """``lo, lo+stride, ...`` up to ``hi``, with ``hi`` appended when off-grid."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pos = list(range(lo, hi + 1, stride))
    if pos[-1] != hi:
        pos.append(hi)
    return pos


def clamp_box(a: int, b: int, box_w: int, box_h: int,
              width: int = CANONICAL_WIDTH, height: int = CANONICAL_HEIGHT) -> Rect:
    """Intersect a box with the frame; a corner on or past the far edge moves to the last pixel."""
    x = min(a, width - 1)
    y = min(b, height - 1)
    return Rect(x, y, min(box_w, width - x), min(box_h, height - y))


def candidate_boxes(region: PlausibleRegion, box_w: int, box_h: int,
                    stride: int = DEFAULT_STRIDE) -> list[Rect]:
    """All candidate boxes for a region, left to right within top-to-bottom rows."""
    xs = grid_positions(region.amin, region.amax, stride)
    ys = grid_positions(region.bmin, region.bmax, stride)
    seen = set()
    boxes = []
    for b in ys:
        for a in xs:
            rect = clamp_box(a, b, box_w, box_h)
            if rect not in seen:
                seen.add(rect)
                boxes.append(rect)
    return boxes


def spec_candidates(spec: OrganSpec, stride: int = DEFAULT_STRIDE) -> list[Rect]:
    return candidate_boxes(spec.region, spec.box_w, spec.box_h, stride)
