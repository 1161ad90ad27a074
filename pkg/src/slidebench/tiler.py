"""Tile extraction over tissue regions with two-stage quality filtering.

Planning is pure integer arithmetic in level-0 pixels: a stride grid over
each tissue region's bounding box, partial edge tiles dropped, duplicates
from overlapping boxes removed, everything sorted by (y, x). Extraction
groups surviving candidates by 4096-px chunks so each chunk of the slide is
decoded once; the accepted-tile set must not depend on chunk size or worker
count.

Filters run cheapest first: tissue coverage needs only the thumbnail mask,
pixel variance needs the tile itself.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError
from .slide_io import SlideSource, level_for_mpp, read_region, resample_area
from .tissue_mask import Region, TissueMask

log = logging.getLogger(__name__)

DEFAULT_TILE_SIZE = 224
DEFAULT_CHUNK_SIZE = 4096
DEFAULT_MIN_COVERAGE = 0.25
DEFAULT_MIN_VARIANCE = 15.0

MANIFEST_NAME = "tile_manifest.jsonl"
TILES_DIR = "tiles"


@dataclass(frozen=True)
class TilePlan:
    """Grid and filter parameters; stride defaults to tile_size (no overlap)."""

    tile_size: int = DEFAULT_TILE_SIZE
    stride: int | None = None
    target_mpp: float = 0.5
    chunk_size: int = DEFAULT_CHUNK_SIZE
    min_coverage: float = DEFAULT_MIN_COVERAGE
    min_variance: float = DEFAULT_MIN_VARIANCE

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.tile_size)
        if self.tile_size <= 0 or self.stride <= 0:
            raise ValueError("tile_size and stride must be positive")
        if self.target_mpp <= 0 or self.chunk_size <= 0:
            raise ValueError("target_mpp and chunk_size must be positive")
        if not 0.0 <= self.min_coverage <= 1.0:
            raise ValueError("min_coverage must be in [0, 1]")
        if self.min_variance < 0.0:
            raise ValueError("min_variance must be >= 0")


@dataclass(frozen=True)
class TileRecord:
    """One accepted tile; x, y are level-0 pixels of the top-left corner."""

    x: int
    y: int
    w: int
    h: int
    coverage: float
    variance: float
    path: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "x": self.x,
                "y": self.y,
                "w": self.w,
                "h": self.h,
                "coverage": self.coverage,
                "variance": self.variance,
                "path": self.path,
            }
        )

    @staticmethod
    def from_json(line: str) -> "TileRecord":
        d = json.loads(line)
        return TileRecord(
            x=int(d["x"]),
            y=int(d["y"]),
            w=int(d["w"]),
            h=int(d["h"]),
            coverage=float(d["coverage"]),
            variance=float(d["variance"]),
            path=str(d["path"]),
        )


def plan_tiles(
    regions: list[Region] | tuple[Region, ...],
    mask_scale: float,
    plan: TilePlan,
    slide_dims: tuple[int, int],
    level0_mpp: float,
) -> list[tuple[int, int]]:
    """Candidate tile origins (level-0 px) over region bboxes, sorted (y, x).

    Region bboxes are in thumbnail pixels; mask_scale maps them to level 0.
    Tiles overhanging the right/bottom slide edge are dropped rather than
    padded, and origins shared by overlapping bboxes appear once.
    """
    ratio = plan.target_mpp / level0_mpp
    tile_l0 = int(round(plan.tile_size * ratio))
    stride_l0 = int(round(plan.stride * ratio))
    if tile_l0 < 1 or stride_l0 < 1:
        raise ValueError("tile or stride smaller than one level-0 pixel")
    slide_w, slide_h = slide_dims
    origins: set[tuple[int, int]] = set()
    for region in regions:
        bx0, by0, bx1, by1 = region.bbox
        x0 = max(0, int(math.floor(bx0 * mask_scale)))
        y0 = max(0, int(math.floor(by0 * mask_scale)))
        x1 = min(slide_w, int(math.ceil(bx1 * mask_scale)))
        y1 = min(slide_h, int(math.ceil(by1 * mask_scale)))
        if x1 - x0 < tile_l0 or y1 - y0 < tile_l0:
            continue
        nx = (x1 - x0 - tile_l0) // stride_l0 + 1
        ny = (y1 - y0 - tile_l0) // stride_l0 + 1
        for iy in range(ny):
            for ix in range(nx):
                origins.add((x0 + ix * stride_l0, y0 + iy * stride_l0))
    return sorted(origins, key=lambda o: (o[1], o[0]))


def _footprint(origin: tuple[int, int], extent_l0: int, mask: TissueMask):
    """Half-open thumbnail-pixel window covering a level-0 tile, clamped."""
    s = mask.scale_to_level0
    x, y = origin
    h, w = mask.mask.shape
    x0 = max(0, int(math.floor(x / s)))
    y0 = max(0, int(math.floor(y / s)))
    x1 = min(w, int(math.ceil((x + extent_l0) / s)))
    y1 = min(h, int(math.ceil((y + extent_l0) / s)))
    return x0, y0, x1, y1


def coverage(origin: tuple[int, int], extent_l0: int, mask: TissueMask) -> float:
    """Fraction of tissue pixels inside the tile's thumbnail footprint."""
    x0, y0, x1, y1 = _footprint(origin, extent_l0, mask)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    window = mask.mask[y0:y1, x0:x1]
    return float(np.count_nonzero(window)) / float(window.size)


class _CoverageGrid:
    """Integral-image accelerator; must agree exactly with coverage()."""

    def __init__(self, mask: TissueMask):
        self._mask = mask
        ii = np.zeros((mask.mask.shape[0] + 1, mask.mask.shape[1] + 1), dtype=np.int64)
        ii[1:, 1:] = np.cumsum(np.cumsum(mask.mask.astype(np.int64), axis=0), axis=1)
        self._ii = ii

    def coverage(self, origin: tuple[int, int], extent_l0: int) -> float:
        x0, y0, x1, y1 = _footprint(origin, extent_l0, self._mask)
        if x1 <= x0 or y1 <= y0:
            return 0.0
        ii = self._ii
        ones = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
        return float(ones) / float((x1 - x0) * (y1 - y0))


def pixel_variance(tile: np.ndarray) -> float:
    """Population variance of rounded BT.601 luminance, in double precision."""
    if tile.size == 0:
        raise ValueError("empty tile")
    rgb = tile.astype(np.float64)
    lum = np.floor(0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2] + 0.5)
    mean = lum.mean()
    return float(((lum - mean) ** 2).mean())


def _chunk_key(origin: tuple[int, int], chunk_size: int) -> tuple[int, int]:
    return origin[0] // chunk_size, origin[1] // chunk_size


def _extract_chunk(
    slide: SlideSource,
    level: int,
    scale: float,
    group: list[tuple[tuple[int, int], float]],
    chunk_origin_l0: tuple[int, int],
    extent_level: int,
    tile_size: int,
    min_variance: float,
    tiles_dir: Path,
) -> list[TileRecord]:
    """Read one chunk window, cut/resample its tiles, apply the variance filter.

    The window starts at the chunk's aligned corner and extends far enough to
    cover tiles that cross the chunk's right/bottom boundary.
    """
    ds = slide.levels[level].downsample
    cx0 = int(math.floor(chunk_origin_l0[0] / ds + 0.5))
    cy0 = int(math.floor(chunk_origin_l0[1] / ds + 0.5))
    tile_pos = [
        (int(math.floor(x / ds + 0.5)), int(math.floor(y / ds + 0.5))) for (x, y), _ in group
    ]
    x1 = max(tx + extent_level for tx, _ in tile_pos)
    y1 = max(ty + extent_level for _, ty in tile_pos)
    window = read_region(slide, level, chunk_origin_l0, (x1 - cx0, y1 - cy0))

    records: list[TileRecord] = []
    for ((x, y), cov), (tx, ty) in zip(group, tile_pos):
        raw = window[ty - cy0 : ty - cy0 + extent_level, tx - cx0 : tx - cx0 + extent_level]
        tile = resample_area(raw, scale)
        var = pixel_variance(tile)
        if var < min_variance:
            continue
        rel = f"{TILES_DIR}/{x}_{y}.png"
        Image.fromarray(tile).save(tiles_dir / f"{x}_{y}.png", format="PNG")
        records.append(
            TileRecord(x=x, y=y, w=tile_size, h=tile_size, coverage=cov, variance=var, path=rel)
        )
    return records


def crop_slide(
    slide: SlideSource,
    mask: TissueMask,
    plan: TilePlan,
    out_dir: str | Path,
    workers: int = 1,
) -> tuple[list[TileRecord], Path]:
    """Extract, filter, and persist all tiles for one slide.

    Writes `tiles/<x>_<y>.png` plus `tile_manifest.jsonl` under out_dir; the
    manifest is written after all workers finish, sorted by (y, x), so its
    bytes are independent of scheduling. Zero accepted tiles is a valid
    outcome (empty manifest, logged warning).
    """
    out_dir = Path(out_dir)
    tiles_dir = out_dir / TILES_DIR
    try:
        tiles_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {tiles_dir}: {exc}") from exc

    choice = level_for_mpp(slide, plan.target_mpp)
    if choice.degraded:
        log.warning(
            "%s: target mpp %.3f finer than level 0 (%.3f); using level 0 unscaled",
            slide.slide_id,
            plan.target_mpp,
            slide.level0_mpp,
        )
        # Work at the resolution actually delivered, so grid spacing, the
        # coverage footprint, and the extraction extent stay consistent.
        plan = replace(plan, target_mpp=choice.effective_mpp)
    ratio = plan.target_mpp / slide.level0_mpp
    tile_l0 = int(round(plan.tile_size * ratio))
    extent_level = int(math.ceil(plan.tile_size / choice.scale))

    origins = plan_tiles(
        mask.regions, mask.scale_to_level0, plan, slide.dimensions, slide.level0_mpp
    )
    grid = _CoverageGrid(mask)
    survivors = [
        (origin, cov)
        for origin in origins
        if (cov := grid.coverage(origin, tile_l0)) >= plan.min_coverage
    ]

    groups: dict[tuple[int, int], list[tuple[tuple[int, int], float]]] = {}
    for origin, cov in survivors:
        groups.setdefault(_chunk_key(origin, plan.chunk_size), []).append((origin, cov))

    def run_group(key: tuple[int, int]) -> list[TileRecord]:
        chunk_origin = (key[0] * plan.chunk_size, key[1] * plan.chunk_size)
        return _extract_chunk(
            slide,
            choice.level,
            choice.scale,
            groups[key],
            chunk_origin,
            extent_level,
            plan.tile_size,
            plan.min_variance,
            tiles_dir,
        )

    keys = sorted(groups)
    records: list[TileRecord] = []
    if workers <= 1 or len(keys) <= 1:
        for key in keys:
            records.extend(run_group(key))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(run_group, keys):
                records.extend(batch)

    records.sort(key=lambda r: (r.y, r.x))
    manifest_path = out_dir / MANIFEST_NAME
    try:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {manifest_path}: {exc}") from exc
    if not records:
        log.warning("%s: no tiles passed quality filters", slide.slide_id)
    return records, manifest_path


def read_manifest(path: str | Path) -> list[TileRecord]:
    """Parse a tile manifest back into records, preserving file order."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TileRecord.from_json(line))
    return records
