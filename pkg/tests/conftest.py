"""Shared fixtures: hand-built slides and a synthetic feature-bag dataset.

The square slide is written directly with tifffile rather than through
synth_slide so the tiler tests do not depend on the generator they help
validate. Geometry is chosen so every boundary lands on exact pixel and
thumbnail coordinates.
"""

import numpy as np
import pytest
import tifffile

from slidebench.bench import make_splits
from slidebench.dataset_store import (
    FeatureBag,
    TaskConfig,
    load_dataset,
    write_features,
    write_labels,
    write_splits,
    write_task_configs,
)
from slidebench.prng import uniform01_array
from slidebench.slide_io import MIN_LEVEL_DIM, resample_area

BACKGROUND = (245, 245, 245)
PINK = (200, 120, 150)


def write_slide(path, level0, mpp):
    """Pyramidal TIFF from a level-0 raster: halve while both dims stay large."""
    levels = [level0]
    while min(levels[-1].shape[0] // 2, levels[-1].shape[1] // 2) >= MIN_LEVEL_DIM:
        levels.append(resample_area(levels[-1], 0.5))
    description = '{"mpp": %r}' % mpp
    with tifffile.TiffWriter(path) as tif:
        for k, arr in enumerate(levels):
            ppcm = 10000.0 / (mpp * (2**k))
            tif.write(
                arr,
                photometric="rgb",
                tile=(256, 256),
                compression="zlib",
                resolution=(ppcm, ppcm),
                resolutionunit="CENTIMETER",
                description=description if k == 0 else None,
            )
    return path


def render_square(size, square, noise=9, seed=11):
    """Gray background with one saturated square at the origin.

    Noise is a common per-pixel offset on all three channels, so background
    saturation stays exactly zero and the mask edge is decided by geometry
    alone.
    """
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:, :] = BACKGROUND
    img[:square, :square] = PINK
    if noise:
        span = 2 * noise + 1
        u = uniform01_array(seed, 0, size * size)
        offsets = (np.floor(u * span) - noise).astype(np.int16).reshape(size, size)
        img = np.clip(img.astype(np.int16) + offsets[:, :, None], 0, 255).astype(np.uint8)
    return img


@pytest.fixture(scope="session")
def square_slide(tmp_path_factory):
    """4096 px slide at 0.5 mpp with an 896 px tissue square at the origin."""
    path = tmp_path_factory.mktemp("slides") / "square.tiff"
    write_slide(path, render_square(4096, 896), mpp=0.5)
    return path


@pytest.fixture(scope="session")
def blank_slide(tmp_path_factory):
    """Slide with zero saturated pixels anywhere: must yield zero tiles."""
    path = tmp_path_factory.mktemp("slides") / "blank.tiff"
    write_slide(path, render_square(2048, 0), mpp=0.5)
    return path


def build_bag_dataset(root, n_bags=200, n_inst=30, dim=32, shifted=3, rng_seed=7):
    """Feature-bag dataset, no images: positive bags carry a +1 sigma signal.

    Instances are uniform on [-sqrt(3), sqrt(3)] (unit variance), so a +1.0
    mean shift on `shifted` instances is a one-sigma bump. Two slides per
    patient, alternating labels, split patient-wise 7:1:2.
    """
    rng = np.random.default_rng(rng_seed)
    half = np.sqrt(3.0)
    task = TaskConfig("tumor", "classification", "tumor", ("negative", "positive"))
    write_task_configs(root, [task])
    coords = np.stack([np.arange(n_inst), np.arange(n_inst)], axis=1).astype("<i4")
    rows = []
    for i in range(n_bags):
        sid = f"s{i:03d}"
        positive = i % 2 == 1
        feats = rng.uniform(-half, half, size=(n_inst, dim))
        if positive:
            feats[:shifted] += 1.0
        bag = FeatureBag(
            features=feats.astype("<f4"),
            coords=coords,
            slide_id=sid,
            embedder_id=f"synthetic-fixture-d{dim}",
            mpp=0.5,
            tile_size=224,
        )
        slide_dir = root / sid
        slide_dir.mkdir(parents=True, exist_ok=True)
        write_features(slide_dir / f"{sid}.h5", bag)
        rows.append((sid, f"p{i // 2:03d}", {"tumor": "positive" if positive else "negative"}))
    write_labels(root, [task], rows)
    assignment = make_splits(load_dataset(root).labels, seed=3)
    write_splits(root, assignment.assignment)
    return root


@pytest.fixture(scope="session")
def bag_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("bags") / "ds"
    root.mkdir()
    build_bag_dataset(root)
    return load_dataset(root)
