"""Turn one slide's tile manifest into one HDF5 feature file.

Output contract (shared with the pipeline's dataset store):
  datasets  "features" <f4 (N, D), "coords_xy" <i4 (N, 2) as (x, y)
  attrs     slide_id (str), embedder_id (str), mpp (f8), tile_size (i8)

The manifest is the ordering authority: tiles are embedded and written in
exactly the order their records appear, never filtered, never sorted.
"""

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np
from PIL import Image

from .models import UnknownModel, get_model

RUN_CONFIG_NAME = "run_config.json"
DEFAULT_MPP = 0.5


class AdapterError(Exception):
    """Any self-detectable reason the output would violate the contract."""


@dataclass(frozen=True)
class AdapterConfig:
    tiles_dir: Path
    manifest: Path
    out: Path
    dim: int
    embedder_id: str
    model: str = "stub"
    device: str = "cpu"  # forwarded to nothing by the stub; hooks may close over it
    batch_size: int = 32
    mpp: float | None = None  # overrides the manifest directory's recorded value


@dataclass(frozen=True)
class TileRef:
    x: int
    y: int
    w: int
    h: int
    path: str


def read_manifest(path: Path) -> list[TileRef]:
    """Parse the JSONL manifest, preserving record order."""
    if not path.is_file():
        raise AdapterError(f"manifest not found: {path}")
    refs: list[TileRef] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ref = TileRef(
                    x=int(obj["x"]),
                    y=int(obj["y"]),
                    w=int(obj["w"]),
                    h=int(obj["h"]),
                    path=str(obj["path"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise AdapterError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
            refs.append(ref)
    return refs


def resolve_mpp(config: AdapterConfig) -> float:
    """Explicit flag, else the crop stage's recorded value, else a default.

    The handoff arguments carry no mpp, but the output contract requires
    one, so we read it back from the provenance file the cropper leaves
    next to the manifest.
    """
    if config.mpp is not None:
        if not (config.mpp > 0):
            raise AdapterError(f"mpp must be positive, got {config.mpp}")
        return float(config.mpp)
    rc = config.manifest.parent / RUN_CONFIG_NAME
    if rc.is_file():
        try:
            recorded = json.loads(rc.read_text(encoding="utf-8"))["crop"]["mpp"]
            return float(recorded)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            pass
    print(
        f"warning: no mpp given and none recorded near {config.manifest}; "
        f"assuming {DEFAULT_MPP}",
        file=sys.stderr,
    )
    return DEFAULT_MPP


def _load_tile(ref: TileRef, config: AdapterConfig) -> np.ndarray:
    # Manifest paths are relative to the manifest's directory; fall back to
    # the tiles dir by basename for callers that laid files out flat.
    candidates = [config.manifest.parent / ref.path, config.tiles_dir / Path(ref.path).name]
    for p in candidates:
        if p.is_file():
            try:
                img = Image.open(p)
                arr = np.asarray(img)
            except OSError as exc:
                raise AdapterError(f"{p}: unreadable image: {exc}") from exc
            if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
                raise AdapterError(
                    f"{p}: expected 8-bit RGB, got shape {arr.shape} dtype {arr.dtype}"
                )
            if arr.shape[0] != ref.h or arr.shape[1] != ref.w:
                raise AdapterError(
                    f"{p}: image is {arr.shape[1]}x{arr.shape[0]}, "
                    f"manifest says {ref.w}x{ref.h}"
                )
            return arr
    raise AdapterError(f"tile file missing: {candidates[0]}")


def _embed_all(refs: list[TileRef], config: AdapterConfig) -> np.ndarray:
    try:
        model = get_model(config.model)
    except UnknownModel as exc:
        raise AdapterError(str(exc)) from exc
    feats = np.empty((len(refs), config.dim), dtype=np.float32)
    for start in range(0, len(refs), config.batch_size):
        chunk = refs[start : start + config.batch_size]
        batch = np.stack([_load_tile(r, config) for r in chunk])
        out = model(batch, config.dim)
        out = np.asarray(out)
        if out.shape != (len(chunk), config.dim):
            raise AdapterError(
                f"model '{config.model}' returned shape {out.shape}, "
                f"want {(len(chunk), config.dim)}"
            )
        if out.dtype != np.float32:
            raise AdapterError(
                f"model '{config.model}' returned dtype {out.dtype}, want float32"
            )
        if not np.all(np.isfinite(out)):
            raise AdapterError(f"model '{config.model}' produced non-finite values")
        feats[start : start + len(chunk)] = out
    return feats


def run_adapter(config: AdapterConfig) -> Path:
    """Embed every manifest tile in order and write the feature file.

    All arrays are built in memory first; the output path is only touched
    once everything validated, so a failure leaves no partial file behind.
    """
    if config.dim < 1:
        raise AdapterError(f"dim must be >= 1, got {config.dim}")
    if config.batch_size < 1:
        raise AdapterError(f"batch size must be >= 1, got {config.batch_size}")
    refs = read_manifest(config.manifest)
    if not refs:
        raise AdapterError(f"{config.manifest}: empty manifest, nothing to embed")
    w0, h0 = refs[0].w, refs[0].h
    if w0 != h0 or any(r.w != w0 or r.h != h0 for r in refs):
        # the single tile_size attribute cannot describe a mixed grid
        raise AdapterError(f"{config.manifest}: tiles are not a uniform square size")
    mpp = resolve_mpp(config)
    features = _embed_all(refs, config)
    coords = np.array([(r.x, r.y) for r in refs], dtype=np.int32).reshape(len(refs), 2)
    slide_id = config.manifest.parent.name
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        with h5py.File(out, "w") as f:
            f.create_dataset("features", data=features, dtype="<f4")
            f.create_dataset("coords_xy", data=coords, dtype="<i4")
            f.attrs["slide_id"] = slide_id
            f.attrs["embedder_id"] = config.embedder_id
            f.attrs["mpp"] = np.float64(mpp)
            f.attrs["tile_size"] = np.int64(w0)
    except OSError as exc:
        out.unlink(missing_ok=True)
        raise AdapterError(f"cannot write {out}: {exc}") from exc
    return out
