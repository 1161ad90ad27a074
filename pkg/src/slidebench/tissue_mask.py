"""Tissue/background segmentation on a low-resolution slide thumbnail.

Stained tissue is colorful and background glass is near-gray, so the split is
done on the HSV saturation channel: Otsu's threshold on the saturation
histogram, one pass of 3x3 majority smoothing to knock out speckle, then
8-connected component labeling with a minimum-area filter. All arithmetic is
integer or float64 with explicit rounding, so the same thumbnail always
yields the same mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PipelineError
from .slide_io import SlideSource, thumbnail

DEFAULT_MASK_MPP = 8.0
DEFAULT_MIN_REGION_AREA = 64

_EIGHT_CONNECTED = np.ones((3, 3), dtype=np.int32)


class DegenerateHistogram(PipelineError):
    """Histogram has all its mass in a single bin; no threshold separates it."""


@dataclass(frozen=True)
class Region:
    """One connected tissue region in thumbnail pixels.

    bbox is half-open (x0, y0, x1, y1): x0 <= x < x1, y0 <= y < y1.
    """

    label: int
    area: int
    bbox: tuple[int, int, int, int]


@dataclass(frozen=True)
class TissueMask:
    """Smoothed, area-filtered tissue mask plus the geometry to map it back."""

    mask: np.ndarray
    mask_mpp: float
    scale_to_level0: float
    threshold: int | None
    regions: tuple[Region, ...]


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation of an RGB uint8 raster, scaled to uint8.

    S = 255 * (max - min) / max with round-half-up; pure black has S = 0.
    Gray pixels (r = g = b) map exactly to 0 regardless of brightness.
    """
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    maxc = rgb.max(axis=2).astype(np.float64)
    minc = rgb.min(axis=2).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(maxc > 0, 255.0 * (maxc - minc) / np.maximum(maxc, 1.0), 0.0)
    return np.floor(s + 0.5).astype(np.uint8)


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold maximizing between-class variance; ties go to the smallest t.

    Pixels with value <= t form the low class, > t the high class. Computed on
    the normalized histogram in float64, which keeps the result invariant
    under exact scalings of the counts. A histogram concentrated in one bin
    raises DegenerateHistogram: every split would leave a class empty.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total <= 0 or np.count_nonzero(hist) <= 1:
        raise DegenerateHistogram("all histogram mass in a single bin")
    p = hist / total
    levels = np.arange(256, dtype=np.float64)
    omega0 = np.cumsum(p)
    mu0_mass = np.cumsum(p * levels)
    mu_total = mu0_mass[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma_b = (mu_total * omega0 - mu0_mass) ** 2 / (omega0 * (1.0 - omega0))
    valid = (omega0 > 0.0) & (omega0 < 1.0)
    sigma_b = np.where(valid, sigma_b, -np.inf)
    return int(np.argmax(sigma_b))


def majority_smooth(mask: np.ndarray) -> np.ndarray:
    """One simultaneous 3x3 majority pass over a binary mask.

    A pixel flips iff at least 5 of its existing neighbors disagree with it
    (8 neighbors in the interior, fewer on the border). Border corners have
    only 3 neighbors and therefore never flip; an interior pixel with a 4-4
    neighbor split keeps its value, so a checkerboard is a fixed point.
    """
    m = mask.astype(np.int32)
    padded = np.pad(m, 1)
    ones = np.zeros_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ones += padded[1 + dy : 1 + dy + m.shape[0], 1 + dx : 1 + dx + m.shape[1]]
    existing = np.full(m.shape, 8, dtype=np.int32)
    existing[0, :] -= 3
    existing[-1, :] -= 3
    existing[:, 0] -= 3
    existing[:, -1] -= 3
    existing[0, 0] += 1
    existing[0, -1] += 1
    existing[-1, 0] += 1
    existing[-1, -1] += 1
    disagree = np.where(mask, existing - ones, ones)
    return np.where(disagree >= 5, ~mask.astype(bool), mask.astype(bool))


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling with labels in raster order of first occurrence.

    Background is 0; component k's first pixel (row-major scan) appears
    before component k+1's. Renumbering makes the labeling canonical, so
    downstream region identities never depend on library internals.
    """
    raw, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    raw = raw.astype(np.int32)
    if count == 0:
        return raw, 0
    flat = raw.ravel()
    first_index = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first_index, flat, np.arange(flat.size, dtype=np.int64))
    order = np.argsort(first_index[1:], kind="stable")
    mapping = np.zeros(count + 1, dtype=np.int32)
    mapping[1 + order] = np.arange(1, count + 1, dtype=np.int32)
    return mapping[raw], count


def _regions_from_labels(labels: np.ndarray, count: int) -> list[Region]:
    regions: list[Region] = []
    if count == 0:
        return regions
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    slices = ndimage.find_objects(labels, max_label=count)
    for k in range(1, count + 1):
        sl = slices[k - 1]
        if sl is None:
            continue
        regions.append(
            Region(
                label=k,
                area=int(areas[k]),
                bbox=(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop),
            )
        )
    return regions


def qc_overlay(thumb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Thumbnail with the mask boundary painted red, for visual QC."""
    boundary = mask & ~ndimage.binary_erosion(mask)
    out = thumb.copy()
    out[boundary] = (255, 0, 0)
    return out


def build_tissue_mask(
    slide: SlideSource,
    mask_mpp: float = DEFAULT_MASK_MPP,
    min_region_area: int = DEFAULT_MIN_REGION_AREA,
) -> TissueMask:
    """Segment tissue on a thumbnail at mask_mpp and filter tiny regions.

    A degenerate saturation histogram (e.g. an all-gray slide) produces an
    empty mask with threshold None instead of an error: a slide with no
    detectable tissue is valid input that simply yields zero tiles.
    """
    thumb, scale_to_level0 = thumbnail(slide, mask_mpp)
    sat = saturation(thumb)
    hist = np.bincount(sat.ravel(), minlength=256)
    try:
        threshold = otsu_threshold(hist)
    except DegenerateHistogram:
        empty = np.zeros(sat.shape, dtype=bool)
        return TissueMask(
            mask=empty,
            mask_mpp=mask_mpp,
            scale_to_level0=scale_to_level0,
            threshold=None,
            regions=(),
        )
    mask = majority_smooth(sat > threshold)
    labels, count = label_components(mask)
    regions = [r for r in _regions_from_labels(labels, count) if r.area >= min_region_area]
    kept = np.isin(labels, [r.label for r in regions]) if regions else np.zeros_like(mask)
    return TissueMask(
        mask=kept & mask,
        mask_mpp=mask_mpp,
        scale_to_level0=scale_to_level0,
        threshold=threshold,
        regions=tuple(regions),
    )
