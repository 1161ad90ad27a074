"""Pyramidal slide access at a requested microns-per-pixel resolution.

Slides are tiled multi-page TIFFs, finest level first, with physical
resolution either in the standard XResolution/YResolution tags or as an
``{"mpp": ...}`` JSON side-tag in the page description. The same reader path
serves real exports and the synthetic slides written by :func:`synth_slide`.

Coordinate convention: region origins are always level-0 pixels, sizes are
pixels of the level being read. Requesting finer than level 0 never
upsamples; the caller gets level 0 flagged as degraded.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile

from .errors import PipelineError
from .prng import uniform01_array

# Coarser pyramid levels are emitted while both dimensions stay >= this.
MIN_LEVEL_DIM = 1024
# Smallest slide synth_slide will produce (one default tile).
MIN_SYNTH_DIM = 224

MPP_MATCH_TOLERANCE = 1e-3
DOWNSAMPLE_TOLERANCE = 0.01

_BACKGROUND_RGB = (245, 245, 245)
_BLOB_RGB = (200, 120, 150)


class UnsupportedFormat(PipelineError):
    """File is not a readable 8-bit RGB tiled TIFF."""


class MissingResolutionMetadata(PipelineError):
    """Slide carries no usable microns-per-pixel metadata."""


class CorruptPyramid(PipelineError):
    """Level dimensions are inconsistent with their downsample ratios."""


class OutOfBounds(PipelineError):
    """Requested region falls outside the stored level."""


class InvalidSpec(PipelineError):
    """Synthetic slide specification is not realizable."""


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    width: int
    height: int
    mpp: float
    downsample: float


class SlideSource:
    """Immutable handle to an opened slide.

    Level pixel data is loaded lazily and cached; concurrent reads are safe.
    """

    def __init__(self, path: Path, levels: list[PyramidLevel], level0_mpp: float):
        self.path = Path(path)
        self.levels = levels
        self.level0_mpp = level0_mpp
        self.slide_id = self.path.stem
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def dimensions(self) -> tuple[int, int]:
        """Level-0 (width, height)."""
        return self.levels[0].width, self.levels[0].height

    def level_array(self, level: int) -> np.ndarray:
        """Full pixel array of one level, cached after first load."""
        with self._lock:
            cached = self._cache.get(level)
            if cached is not None:
                return cached
            with tifffile.TiffFile(self.path) as tf:
                arr = tf.pages[level].asarray()
            arr = np.ascontiguousarray(arr, dtype=np.uint8)
            self._cache[level] = arr
            return arr


@dataclass(frozen=True)
class LevelChoice:
    """Outcome of resolving a target mpp against the pyramid."""

    level: int
    scale: float
    effective_mpp: float
    degraded: bool = False


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    rx: float
    ry: float


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic synthetic slide: noisy background plus elliptical blobs."""

    width: int
    height: int
    mpp: float
    seed: int
    blobs: tuple[Blob, ...] = ()
    noise: int = 9

    @staticmethod
    def from_json(payload: dict) -> "SynthSpec":
        blobs = tuple(
            Blob(cx=float(b["cx"]), cy=float(b["cy"]), rx=float(b["rx"]), ry=float(b["ry"]))
            for b in payload.get("blobs", [])
        )
        return SynthSpec(
            width=int(payload["width"]),
            height=int(payload["height"]),
            mpp=float(payload["mpp"]),
            seed=int(payload["seed"]),
            blobs=blobs,
            noise=int(payload.get("noise", 9)),
        )


def _mpp_from_page(page) -> float | None:
    xres = page.tags.get("XResolution")
    unit = page.tags.get("ResolutionUnit")
    if xres is not None and unit is not None:
        num, den = xres.value
        unit_value = int(unit.value)
        if num > 0 and den > 0:
            pixels_per_unit = num / den
            if unit_value == 3:  # centimeter
                return 10000.0 / pixels_per_unit
            if unit_value == 2:  # inch
                return 25400.0 / pixels_per_unit
    desc = page.tags.get("ImageDescription")
    if desc is not None:
        try:
            payload = json.loads(desc.value)
        except (json.JSONDecodeError, TypeError):
            return None
        if isinstance(payload, dict) and "mpp" in payload:
            mpp = float(payload["mpp"])
            if mpp > 0:
                return mpp
    return None


def open_slide(path: str | Path) -> SlideSource:
    """Open a pyramidal TIFF, enumerating all levels and their resolutions.

    mpp comes from the resolution tags (pixels-per-centimeter or per-inch) or
    the ``{"mpp": ...}`` description side-tag; a slide with neither is
    rejected rather than silently assigned a default magnification.
    """
    path = Path(path)
    try:
        tf = tifffile.TiffFile(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise UnsupportedFormat(f"{path}: not a readable TIFF ({exc})") from exc

    with tf:
        pages = list(tf.pages)
        if not pages:
            raise UnsupportedFormat(f"{path}: TIFF has no pages")
        for page in pages:
            if page.dtype != np.uint8 or len(page.shape) != 3 or page.shape[2] != 3:
                raise UnsupportedFormat(
                    f"{path}: expected 8-bit RGB pages, got shape {page.shape} dtype {page.dtype}"
                )
        mpp0 = _mpp_from_page(pages[0])
        if mpp0 is None:
            raise MissingResolutionMetadata(f"{path}: no resolution tags or mpp side-tag")

        w0, h0 = pages[0].shape[1], pages[0].shape[0]
        levels: list[PyramidLevel] = []
        for k, page in enumerate(pages):
            h, w = page.shape[0], page.shape[1]
            if w < 1 or h < 1:
                raise CorruptPyramid(f"{path}: level {k} has empty dimensions")
            ds_w = w0 / w
            ds_h = h0 / h
            if abs(ds_h - ds_w) > DOWNSAMPLE_TOLERANCE * ds_w:
                raise CorruptPyramid(
                    f"{path}: level {k} downsample mismatch (x {ds_w:.4f} vs y {ds_h:.4f})"
                )
            levels.append(
                PyramidLevel(index=k, width=w, height=h, mpp=mpp0 * ds_w, downsample=ds_w)
            )

    for prev, cur in zip(levels, levels[1:]):
        if cur.mpp <= prev.mpp:
            raise CorruptPyramid(
                f"{path}: levels not ordered finest to coarsest "
                f"({prev.mpp:.4f} then {cur.mpp:.4f})"
            )
    return SlideSource(path, levels, mpp0)


def level_for_mpp(slide: SlideSource, target_mpp: float) -> LevelChoice:
    """Pick the coarsest level at least as fine as the target resolution.

    The chosen level is read and shrunk by ``scale = level_mpp / target_mpp``.
    If even level 0 is coarser than the target, level 0 is returned unscaled
    and flagged degraded: the pyramid cannot provide that resolution and
    upsampling would fabricate detail.
    """
    if target_mpp <= 0:
        raise ValueError("target_mpp must be positive")
    eligible = [lv for lv in slide.levels if lv.mpp <= target_mpp * (1.0 + MPP_MATCH_TOLERANCE)]
    if not eligible:
        return LevelChoice(level=0, scale=1.0, effective_mpp=slide.level0_mpp, degraded=True)
    chosen = max(eligible, key=lambda lv: lv.mpp)
    return LevelChoice(
        level=chosen.index,
        scale=chosen.mpp / target_mpp,
        effective_mpp=target_mpp,
        degraded=False,
    )


def read_region(
    slide: SlideSource, level: int, origin_l0: tuple[int, int], size: tuple[int, int]
) -> np.ndarray:
    """Exact pixels of a stored-level rectangle; no interpolation.

    ``origin_l0`` is the top-left corner in level-0 pixels; ``size`` is
    (width, height) in pixels of the requested level.
    """
    lv = slide.levels[level]
    x0, y0 = origin_l0
    w, h = size
    lx = int(math.floor(x0 / lv.downsample + 0.5))
    ly = int(math.floor(y0 / lv.downsample + 0.5))
    if lx < 0 or ly < 0 or lx + w > lv.width or ly + h > lv.height or w < 1 or h < 1:
        raise OutOfBounds(
            f"region origin_l0={origin_l0} size={size} outside level {level} "
            f"({lv.width}x{lv.height})"
        )
    arr = slide.level_array(level)
    return np.ascontiguousarray(arr[ly : ly + h, lx : lx + w])


def _resample_rows(img: np.ndarray, scale: float) -> np.ndarray:
    """Area-average the first axis down to floor(dim*scale) bins (float64 out).

    Output bin k averages the input interval [k/scale, (k+1)/scale); edge
    pixels contribute in proportion to their overlap with the bin.
    """
    in_dim = img.shape[0]
    out_dim = max(1, int(math.floor(in_dim * scale)))
    inv = 1.0 / scale
    out = np.empty((out_dim,) + img.shape[1:], dtype=np.float64)
    for k in range(out_dim):
        lo = k * inv
        hi = min((k + 1) * inv, float(in_dim))
        i0 = int(math.floor(lo))
        i1 = min(int(math.ceil(hi)), in_dim)
        weights = np.minimum(np.arange(i0, i1) + 1.0, hi) - np.maximum(
            np.arange(i0, i1, dtype=np.float64), lo
        )
        out[k] = np.tensordot(weights, img[i0:i1].astype(np.float64), axes=(0, 0)) / (hi - lo)
    return out


def resample_area(raster: np.ndarray, scale: float) -> np.ndarray:
    """Exact area-averaging downscale with round-half-up quantization.

    Output dims are floor(dim * scale), clamped to >= 1; scale 1.0 returns an
    identical copy. Averaging is separable and applied rows first, then
    columns, with quantization only after both passes. Area averaging is
    chosen over smoother kernels because it preserves mean intensity and is
    exactly reproducible.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if scale == 1.0:
        return raster.copy()
    gray = raster.ndim == 2
    img = raster[:, :, None] if gray else raster
    rows = _resample_rows(img, scale)
    cols = _resample_rows(rows.transpose(1, 0, 2), scale).transpose(1, 0, 2)
    out = np.clip(np.floor(cols + 0.5), 0, 255).astype(np.uint8)
    return out[:, :, 0] if gray else out


def thumbnail(slide: SlideSource, target_mpp: float) -> tuple[np.ndarray, float]:
    """Whole-slide raster at target_mpp plus the thumbnail->level-0 scale."""
    if target_mpp < slide.level0_mpp:
        raise ValueError(
            f"thumbnail mpp {target_mpp} finer than level 0 ({slide.level0_mpp})"
        )
    choice = level_for_mpp(slide, target_mpp)
    lv = slide.levels[choice.level]
    full = read_region(slide, choice.level, (0, 0), (lv.width, lv.height))
    thumb = resample_area(full, choice.scale)
    return thumb, choice.effective_mpp / slide.level0_mpp


def _validate_synth_spec(spec: SynthSpec) -> None:
    if spec.width < MIN_SYNTH_DIM or spec.height < MIN_SYNTH_DIM:
        raise InvalidSpec(
            f"slide dims {spec.width}x{spec.height} below minimum {MIN_SYNTH_DIM}"
        )
    if spec.mpp <= 0:
        raise InvalidSpec(f"mpp must be positive, got {spec.mpp}")
    if not 0 <= spec.noise <= 40:
        raise InvalidSpec(f"noise amplitude {spec.noise} outside [0, 40]")
    for i, blob in enumerate(spec.blobs):
        if blob.rx <= 0 or blob.ry <= 0:
            raise InvalidSpec(f"blob {i} has non-positive radius")
        if (
            blob.cx - blob.rx < 0
            or blob.cx + blob.rx > spec.width
            or blob.cy - blob.ry < 0
            or blob.cy + blob.ry > spec.height
        ):
            raise InvalidSpec(f"blob {i} extends outside the slide bounds")


def _render_level0(spec: SynthSpec) -> np.ndarray:
    base = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    base[:, :] = _BACKGROUND_RGB
    for blob in spec.blobs:
        x0 = max(0, int(math.floor(blob.cx - blob.rx)))
        x1 = min(spec.width, int(math.ceil(blob.cx + blob.rx)) + 1)
        y0 = max(0, int(math.floor(blob.cy - blob.ry)))
        y1 = min(spec.height, int(math.ceil(blob.cy + blob.ry)) + 1)
        ys = (np.arange(y0, y1, dtype=np.float64) + 0.5 - blob.cy) / blob.ry
        xs = (np.arange(x0, x1, dtype=np.float64) + 0.5 - blob.cx) / blob.rx
        inside = ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0
        patch = base[y0:y1, x0:x1]
        patch[inside] = _BLOB_RGB
    if spec.noise > 0:
        # Common offset on all channels: keeps saturation clean while giving
        # tiles enough luminance variance to clear the default QC filter.
        span = 2 * spec.noise + 1
        u = uniform01_array(spec.seed, 0, spec.height * spec.width)
        offsets = (np.floor(u * span) - spec.noise).astype(np.int16)
        offsets = offsets.reshape(spec.height, spec.width)
        img = base.astype(np.int16) + offsets[:, :, None]
        return np.clip(img, 0, 255).astype(np.uint8)
    return base


def synth_slide(spec: SynthSpec, path: str | Path) -> Path:
    """Write a deterministic pyramidal slide; identical spec => identical bytes.

    Background is near-white with seeded noise, blobs are saturated pink
    ellipses; coarser levels are area-averaged from level 0 while both
    dimensions stay >= MIN_LEVEL_DIM.
    """
    _validate_synth_spec(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    levels = [_render_level0(spec)]
    while min(levels[-1].shape[0] // 2, levels[-1].shape[1] // 2) >= MIN_LEVEL_DIM:
        levels.append(resample_area(levels[-1], 0.5))

    description = json.dumps(
        {"format": "synthslide-v1", "mpp": spec.mpp, "seed": spec.seed}, sort_keys=True
    )
    with tifffile.TiffWriter(path) as tif:
        for k, arr in enumerate(levels):
            mpp_k = spec.mpp * (2**k)
            ppcm = 10000.0 / mpp_k
            tif.write(
                arr,
                photometric="rgb",
                tile=(256, 256),
                compression="zlib",
                resolution=(ppcm, ppcm),
                resolutionunit="CENTIMETER",
                description=description if k == 0 else None,
                software="slidebench-synth",
            )
    return path
