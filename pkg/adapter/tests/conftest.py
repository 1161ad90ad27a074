"""Shared fixture: a small real dataset produced by the pipeline CLI.

The adapter is only ever invoked against cropper output, so conformance
tests run against the genuine article: one synthetic slide, cropped to
tiles plus manifest, reused read-only across the session. Tests that
mutate files work on copies.
"""

import json
import shutil

import pytest

from slidebench import cli as pipeline_cli

SLIDE_SPEC = {
    "width": 2048,
    "height": 2048,
    "mpp": 0.5,
    "seed": 17,
    "blobs": [
        {"cx": 800, "cy": 900, "rx": 450, "ry": 400},
        {"cx": 1500, "cy": 1400, "rx": 260, "ry": 300},
    ],
}


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapter_fixture")
    spec_path = root / "slide.json"
    spec_path.write_text(json.dumps(SLIDE_SPEC), encoding="utf-8")
    tiff = root / "slides" / "fx_slide.tiff"
    ds = root / "ds"
    rc = pipeline_cli.main(["synth", "--spec", str(spec_path), "--out", str(tiff)])
    assert rc == 0
    rc = pipeline_cli.main(
        ["crop", "--slide", str(tiff), "--out", str(ds), "--mpp", "0.5"]
    )
    assert rc == 0
    return ds


@pytest.fixture(scope="session")
def slide_dir(dataset_root):
    d = dataset_root / "fx_slide"
    assert (d / "tile_manifest.jsonl").is_file()
    return d


@pytest.fixture()
def slide_copy(slide_dir, tmp_path):
    dst = tmp_path / "fx_slide"
    shutil.copytree(slide_dir, dst)
    return dst


def manifest_records(slide_dir):
    lines = (slide_dir / "tile_manifest.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(ln) for ln in lines if ln.strip()]
