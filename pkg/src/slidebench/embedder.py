"""Tile embedding: contract, deterministic native reference, validation.

The native embedder exists so the whole pipeline runs self-contained: it
pools each tile to 8x8 RGB, scales to [0, 1], applies a seeded random
projection, and L2-normalizes. Every reduction uses a fixed, documented
order (correctly-rounded sums via math.fsum, single final rounding to
float32), which makes the output bit-exact across runs and platforms for
the same (seed, dim, tile bytes).

External embedders plug in through a one-command-per-slide handoff:

    <cmd> --tiles-dir <dir> --manifest <file> --out <slide_id>.h5 \
          --dim <D> --embedder-id <id>

whatever they write must pass validate_features or it is deleted.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_store import DatasetHandle, FeatureBag, read_features, write_features
from .errors import PipelineError
from .prng import uniform01_array
from .tiler import TileRecord, read_manifest

log = logging.getLogger(__name__)

POOL_GRID = 8
POOL_VALUES = POOL_GRID * POOL_GRID * 3


class MissingTiles(PipelineError):
    """Manifest references tile files that are not on disk."""


class AdapterFailure(PipelineError):
    """External embedder exited nonzero or wrote a nonconforming file."""


@dataclass(frozen=True)
class EmbedderSpec:
    embedder_id: str
    dim: int
    kind: str = "native"  # "native" | "external"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("native", "external"):
            raise ValueError(f"unknown embedder kind '{self.kind}'")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.embedder_id:
            raise ValueError("embedder_id must be non-empty")


@lru_cache(maxsize=8)
def projection_matrix(seed: int, dim: int) -> np.ndarray:
    """D x 192 matrix of uniform[-1, 1) entries in row-major counter order.

    Entry (i, j) uses counter i*192 + j of the seeded stream, so the matrix
    is a pure function of (seed, dim) with no platform dependence.
    """
    u = uniform01_array(seed, 0, dim * POOL_VALUES)
    return (2.0 * u - 1.0).reshape(dim, POOL_VALUES)


def _pool_grid(tile: np.ndarray) -> np.ndarray:
    """Mean RGB over an 8x8 grid of blocks, float64, no quantization.

    Block k spans input rows [k*H//8, (k+1)*H//8): integer boundaries, so
    block sums are exact and the quotient is a single well-defined rounding.
    """
    h, w = tile.shape[0], tile.shape[1]
    if h < POOL_GRID or w < POOL_GRID:
        raise ValueError(f"tile {w}x{h} smaller than the {POOL_GRID}x{POOL_GRID} pool grid")
    out = np.empty((POOL_GRID, POOL_GRID, 3), dtype=np.float64)
    data = tile.astype(np.int64)
    for by in range(POOL_GRID):
        y0, y1 = by * h // POOL_GRID, (by + 1) * h // POOL_GRID
        for bx in range(POOL_GRID):
            x0, x1 = bx * w // POOL_GRID, (bx + 1) * w // POOL_GRID
            block = data[y0:y1, x0:x1]
            area = (y1 - y0) * (x1 - x0)
            for c in range(3):
                out[by, bx, c] = float(int(block[:, :, c].sum())) / area
    return out


def native_embed(tile: np.ndarray, spec: EmbedderSpec) -> np.ndarray:
    """Embed one RGB tile to a unit-norm float32 vector of length spec.dim.

    Steps: 8x8 block means -> /255 -> seeded random projection -> L2
    normalize; an all-zero projection result stays the zero vector. All sums
    are correctly rounded (math.fsum), so the result does not depend on
    vectorization or summation order.
    """
    if spec.kind != "native":
        raise ValueError("native_embed requires a native EmbedderSpec")
    if tile.dtype != np.uint8 or tile.ndim != 3 or tile.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 tile, got {tile.shape} {tile.dtype}")
    vals = (_pool_grid(tile) / 255.0).reshape(POOL_VALUES)
    proj = projection_matrix(spec.seed, spec.dim)
    out = np.empty(spec.dim, dtype=np.float64)
    for i in range(spec.dim):
        out[i] = math.fsum((proj[i] * vals).tolist())
    norm_sq = math.fsum((out * out).tolist())
    if norm_sq > 0.0:
        out /= math.sqrt(norm_sq)
    return out.astype(np.float32)


def _embed_slide_native(
    slide_dir: Path, records: list[TileRecord], spec: EmbedderSpec, mpp: float
) -> FeatureBag:
    features = np.empty((len(records), spec.dim), dtype=np.float32)
    coords = np.empty((len(records), 2), dtype=np.int32)
    for i, rec in enumerate(records):
        tile_path = slide_dir / rec.path
        if not tile_path.is_file():
            raise MissingTiles(f"{slide_dir.name}: missing tile {rec.path}")
        tile = np.asarray(Image.open(tile_path).convert("RGB"))
        features[i] = native_embed(tile, spec)
        coords[i] = (rec.x, rec.y)
    return FeatureBag(
        features=features,
        coords=coords,
        slide_id=slide_dir.name,
        embedder_id=spec.embedder_id,
        mpp=mpp,
        tile_size=records[0].w,
    )


def _run_adapter(
    adapter_cmd: str, slide_dir: Path, manifest: Path, out_path: Path, spec: EmbedderSpec
) -> None:
    cmd = shlex.split(adapter_cmd) + [
        "--tiles-dir",
        str(slide_dir / "tiles"),
        "--manifest",
        str(manifest),
        "--out",
        str(out_path),
        "--dim",
        str(spec.dim),
        "--embedder-id",
        spec.embedder_id,
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise AdapterFailure(
            f"{slide_dir.name}: adapter exited {proc.returncode}: {proc.stderr.strip()}"
        )


def embed_dataset(
    dataset: DatasetHandle,
    spec: EmbedderSpec,
    mpp: float,
    force: bool = False,
    adapter_cmd: str | None = None,
) -> list[Path]:
    """Write one feature file per slide that has tiles; returns written paths.

    Existing feature files are left untouched unless force is set. A slide
    whose manifest is empty gets no file (training cannot use an empty bag).
    External outputs are validated immediately and deleted if nonconforming.
    """
    if spec.kind == "external" and not adapter_cmd:
        raise ValueError("external embedder requires adapter_cmd")
    written: list[Path] = []
    for sid in sorted(dataset.slides):
        entry = dataset.slides[sid]
        if not entry.has_manifest:
            continue
        out_path = entry.path / f"{sid}.h5"
        if out_path.exists() and not force:
            log.info("%s: feature file exists, skipping", sid)
            continue
        manifest_path = entry.path / "tile_manifest.jsonl"
        records = read_manifest(manifest_path)
        if not records:
            log.warning("%s: empty manifest, no feature file written", sid)
            continue
        if spec.kind == "native":
            bag = _embed_slide_native(entry.path, records, spec, mpp)
            write_features(out_path, bag)
        else:
            _run_adapter(adapter_cmd, entry.path, manifest_path, out_path, spec)
            problems = _check_slide(entry.path, sid, out_path)
            if problems:
                out_path.unlink(missing_ok=True)
                raise AdapterFailure(f"{sid}: adapter output rejected: {problems[0]}")
        written.append(out_path)
    return written


@dataclass(frozen=True)
class SlideCheck:
    slide_id: str
    ok: bool
    reason: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[SlideCheck, ...]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> tuple[SlideCheck, ...]:
        return tuple(c for c in self.checks if not c.ok)


def _check_slide(slide_dir: Path, sid: str, h5_path: Path) -> list[str]:
    problems: list[str] = []
    try:
        bag = read_features(h5_path)
    except PipelineError as exc:
        return [str(exc)]
    manifest_path = slide_dir / "tile_manifest.jsonl"
    if manifest_path.is_file():
        records = read_manifest(manifest_path)
        expected = np.array([(r.x, r.y) for r in records], dtype=np.int32)
        if bag.coords.shape != expected.shape:
            problems.append(
                f"coords shape {bag.coords.shape} vs manifest {expected.shape}"
            )
        elif not np.array_equal(bag.coords, expected):
            problems.append("coords differ from manifest (x, y) sequence")
    if bag.slide_id != sid:
        problems.append(f"slide_id attribute '{bag.slide_id}' != folder '{sid}'")
    return problems


def validate_features(dataset: DatasetHandle) -> ValidationReport:
    """Check every slide's feature file against the format and its manifest."""
    checks: list[SlideCheck] = []
    for sid in sorted(dataset.slides):
        entry = dataset.slides[sid]
        if entry.feature_file is None:
            continue
        problems = _check_slide(entry.path, sid, entry.feature_file)
        if problems:
            checks.append(SlideCheck(slide_id=sid, ok=False, reason="; ".join(problems)))
        else:
            checks.append(SlideCheck(slide_id=sid, ok=True))
    return ValidationReport(checks=tuple(checks))
