"""Image grid geometry: 28-px cells, token counts, resolution-cap schedule.

Images are resized to a height and width that are multiples of 28 under a
megapixel cap. One 28x28 cell of image yields one vision token (14-px
patches merged 2x2). Sides round to the nearest cell of the scaled target;
if the rounded grid exceeds the cap, the side whose rounding overshot most
steps down one cell at a time (both sides on a tie, so squares stay square)
until the grid fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

CELL_PX = 28
CELL_AREA = CELL_PX * CELL_PX


@dataclass(frozen=True)
class ResolutionCap:
    """Area cap in megapixels."""

    megapixels: float

    def __post_init__(self):
        if self.megapixels <= 0:
            raise ValueError("cap must be positive")

    @property
    def pixels(self) -> float:
        return self.megapixels * 1e6


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one 28-px cell per side")

    @property
    def height_px(self) -> int:
        return self.rows * CELL_PX

    @property
    def width_px(self) -> int:
        return self.cols * CELL_PX


def vision_token_count(grid: PatchGrid) -> int:
    """Tokens for a grid: one per 28x28 cell, i.e. (H/28) * (W/28)."""
    return grid.rows * grid.cols


def resize_to_patch_grid(spec, cap: ResolutionCap) -> PatchGrid:
    """Nearest 28-px grid for an image, stepped down to fit the area cap.

    Scales by s = min(1, sqrt(cap / area)), rounds each side to the nearest
    cell (at least one), and while the grid exceeds the cap shrinks the side
    whose rounding overshot its scaled target most; an exact tie shrinks
    both.
    """
    cap_px = cap.pixels
    if cap_px < CELL_AREA:
        raise ValueError(f"cap {cap.megapixels} MP cannot fit a single {CELL_PX}x{CELL_PX} cell")
    h, w = spec.height_px, spec.width_px
    s = min(1.0, math.sqrt(cap_px / (h * w)))
    target_h, target_w = s * h, s * w
    rows = max(1, math.floor(target_h / CELL_PX + 0.5))
    cols = max(1, math.floor(target_w / CELL_PX + 0.5))
    while rows * cols * CELL_AREA > cap_px:
        over_r = rows * CELL_PX - target_h
        over_c = cols * CELL_PX - target_w
        if cols == 1 or (rows > 1 and over_r > over_c):
            rows -= 1
        elif rows == 1 or over_c > over_r:
            cols -= 1
        else:
            rows -= 1
            cols -= 1
    return PatchGrid(rows, cols)


def resolution_cap_at(
    progress: float,
    start_mp: float = 0.8,
    end_mp: float = 6.3,
    ramp_fraction: float = 0.35,
    n_steps: int = 4,
) -> ResolutionCap:
    """Staged resolution cap: geometric steps from start to end over the ramp.

    The ramp interval [0, ramp_fraction) is split into n_steps equal-width
    plateaus with geometrically spaced caps; past the ramp the cap stays at
    end_mp.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if n_steps < 1:
        raise ValueError("need at least one ramp step")
    if progress >= ramp_fraction or ramp_fraction <= 0:
        return ResolutionCap(end_mp)
    step = min(int(progress / (ramp_fraction / n_steps)), n_steps - 1)
    if n_steps == 1:
        return ResolutionCap(start_mp)
    ratio = (end_mp / start_mp) ** (step / (n_steps - 1))
    return ResolutionCap(start_mp * ratio)
