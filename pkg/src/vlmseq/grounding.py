"""Parsers, serializers, and scale converters for grounding coordinates.

Three wire formats:

* XML points: ``<points x1="10.5" y1="20.0" ... alt="name">name</points>``
  with coordinates in [0, 100] carrying exactly one decimal digit.
* Point tokens: ``<|point_start|>(x, y)<|point_end|>`` with integer
  coordinates in [0, 1000], optionally preceded by an
  ``<|object_ref_start|>name<|object_ref_end|>`` mention.
* Box tokens: ``<|box_start|>[x1, y1, x2, y2]<|box_end|>`` with integer
  corners in [0, 1000], x1 <= x2 and y1 <= y2.

The two scales differ by one decimal shift: 10.5 <-> 105. Parsers accept
only what the serializers can emit (plus an optional single space after
commas); serializers emit the canonical spaced form.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .geometry import PatchGrid


class FormatError(ValueError):
    """Malformed or out-of-range grounding text."""


class CoordScale(Enum):
    PERCENT100 = "percent100"    # [0, 100], one decimal digit
    PERMILLE1000 = "permille1000"  # integer [0, 1000]


@dataclass(frozen=True)
class PointSet:
    points: tuple[tuple[float, float], ...]
    scale: CoordScale
    label: str | None = None

    def __post_init__(self):
        if isinstance(self.points, list):
            object.__setattr__(self, "points", tuple(tuple(p) for p in self.points))
        for x, y in self.points:
            _check_value(x, self.scale)
            _check_value(y, self.scale)


@dataclass(frozen=True)
class BoundingBox:
    x1: int
    y1: int
    x2: int
    y2: int
    label: str | None = None

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            _check_value(v, CoordScale.PERMILLE1000)
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise FormatError(
                f"box corners out of order: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )


def _check_value(v: float, scale: CoordScale) -> None:
    if scale is CoordScale.PERMILLE1000:
        if v != int(v) or not 0 <= v <= 1000:
            raise FormatError(f"permille coordinate must be an integer in [0, 1000], got {v!r}")
    else:
        if not 0.0 <= v <= 100.0:
            raise FormatError(f"percent coordinate must lie in [0, 100], got {v!r}")
        if abs(v * 10 - round(v * 10)) > 1e-9:
            raise FormatError(f"percent coordinate must carry one decimal digit, got {v!r}")


_DEC = r"(?:\d{1,3}\.\d)"
_INT = r"(?:\d{1,4})"
_POINTS_RE = re.compile(
    rf'^<points((?: [xy]\d+="{_DEC}")+) alt="([^"<>]*)">([^<>]*)</points>$'
)
_ATTR_RE = re.compile(rf'([xy])(\d+)="({_DEC})"')
_OBJECT_REF_RE = re.compile(
    r"^<\|object_ref_start\|>([^<>|]*)<\|object_ref_end\|>(.*)$", re.DOTALL
)
_POINT_TOKEN_RE = re.compile(rf"<\|point_start\|>\(({_INT}),\s?({_INT})\)<\|point_end\|>")
_BOX_TOKEN_RE = re.compile(
    rf"^<\|box_start\|>\[({_INT}),\s?({_INT}),\s?({_INT}),\s?({_INT})\]<\|box_end\|>$"
)


def parse_xml_points(text: str) -> PointSet:
    """Parse one XML points element (percent scale, one decimal digit)."""
    m = _POINTS_RE.match(text.strip())
    if not m:
        raise FormatError(f"malformed points element: {text!r}")
    attrs, alt, body = m.groups()
    if alt != body:
        raise FormatError(f"alt text {alt!r} does not match body {body!r}")
    xs: dict[int, float] = {}
    ys: dict[int, float] = {}
    for axis, idx_s, val_s in _ATTR_RE.findall(attrs):
        idx = int(idx_s)
        target = xs if axis == "x" else ys
        if idx in target:
            raise FormatError(f"duplicate coordinate {axis}{idx}")
        target[idx] = float(val_s)
    if sorted(xs) != sorted(ys):
        raise FormatError(f"unpaired coordinates: x indices {sorted(xs)} vs y indices {sorted(ys)}")
    if sorted(xs) != list(range(1, len(xs) + 1)):
        raise FormatError(f"point indices must be consecutive from 1, got {sorted(xs)}")
    if not alt:
        raise FormatError("points element requires a non-empty alt label")
    points = tuple((xs[i], ys[i]) for i in range(1, len(xs) + 1))
    ps = PointSet(points, CoordScale.PERCENT100, alt)
    if render_xml_points(ps) != text.strip():
        raise FormatError(f"non-canonical points element: {text!r}")
    return ps


def _check_label(label: str) -> None:
    if not label or any(c in label for c in '<>|"'):
        raise FormatError(f"label {label!r} cannot be serialized")


def render_xml_points(ps: PointSet) -> str:
    """Canonical XML form; requires the percent scale and a label."""
    if ps.scale is not CoordScale.PERCENT100:
        raise FormatError("XML points use the percent scale")
    if ps.label is None:
        raise FormatError("XML points require a label")
    _check_label(ps.label)
    attrs = "".join(
        f' x{i}="{x:.1f}" y{i}="{y:.1f}"' for i, (x, y) in enumerate(ps.points, start=1)
    )
    return f'<points{attrs} alt="{ps.label}">{ps.label}</points>'


def render_point_tokens(ps: PointSet) -> str:
    """Special-token form; requires the permille scale."""
    if ps.scale is not CoordScale.PERMILLE1000:
        raise FormatError("point tokens use the permille scale")
    body = "".join(
        f"<|point_start|>({int(x)}, {int(y)})<|point_end|>" for x, y in ps.points
    )
    if ps.label is not None:
        _check_label(ps.label)
        return f"<|object_ref_start|>{ps.label}<|object_ref_end|>{body}"
    return body


def parse_point_tokens(text: str) -> PointSet:
    """Parse a run of point tokens, optionally preceded by an object mention."""
    text = text.strip()
    label = None
    m = _OBJECT_REF_RE.match(text)
    if m:
        label, text = m.group(1), m.group(2)
    matches = list(_POINT_TOKEN_RE.finditer(text))
    if not matches:
        raise FormatError(f"no point tokens found in {text!r}")
    covered = "".join(m.group(0) for m in matches)
    if covered != text:
        raise FormatError(f"unexpected content between point tokens in {text!r}")
    points = tuple((float(int(m.group(1))), float(int(m.group(2)))) for m in matches)
    return PointSet(points, CoordScale.PERMILLE1000, label)


def convert_scale(ps: PointSet) -> PointSet:
    """Shift the decimal point: percent 10.5 <-> permille 105."""
    if ps.scale is CoordScale.PERCENT100:
        pts = tuple((float(round(x * 10)), float(round(y * 10))) for x, y in ps.points)
        return PointSet(pts, CoordScale.PERMILLE1000, ps.label)
    pts = tuple((round(x) / 10.0, round(y) / 10.0) for x, y in ps.points)
    return PointSet(pts, CoordScale.PERCENT100, ps.label)


def parse_box(text: str) -> BoundingBox:
    """Parse one box-token expression, optionally with an object mention."""
    text = text.strip()
    label = None
    m = _OBJECT_REF_RE.match(text)
    if m:
        label, text = m.group(1), m.group(2)
    b = _BOX_TOKEN_RE.match(text)
    if not b:
        raise FormatError(f"malformed box expression: {text!r}")
    x1, y1, x2, y2 = (int(v) for v in b.groups())
    return BoundingBox(x1, y1, x2, y2, label)


def render_box(box: BoundingBox) -> str:
    body = f"<|box_start|>[{box.x1}, {box.y1}, {box.x2}, {box.y2}]<|box_end|>"
    if box.label is not None:
        _check_label(box.label)
        return f"<|object_ref_start|>{box.label}<|object_ref_end|>{body}"
    return body


def point_to_pixels(x: float, y: float, scale: CoordScale, image: PatchGrid) -> tuple[float, float]:
    """Map a relative coordinate onto an image, clamped to its bounds."""
    div = 1000.0 if scale is CoordScale.PERMILLE1000 else 100.0
    px = min(max(x / div * image.width_px, 0.0), float(image.width_px))
    py = min(max(y / div * image.height_px, 0.0), float(image.height_px))
    return px, py


def point_set_to_pixels(ps: PointSet, image: PatchGrid) -> tuple[tuple[float, float], ...]:
    return tuple(point_to_pixels(x, y, ps.scale, image) for x, y in ps.points)


def box_to_pixels(box: BoundingBox, image: PatchGrid) -> tuple[float, float, float, float]:
    x1, y1 = point_to_pixels(box.x1, box.y1, CoordScale.PERMILLE1000, image)
    x2, y2 = point_to_pixels(box.x2, box.y2, CoordScale.PERMILLE1000, image)
    return x1, y1, x2, y2
