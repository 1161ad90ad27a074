"""End-to-end CLI wiring: exit codes, idempotent skips, provenance files."""

import json
import shutil

import h5py
import pytest

from slidebench.cli import main
from slidebench.dataset_store import TaskConfig, write_labels, write_task_configs

SPEC = {
    "width": 1024,
    "height": 1024,
    "mpp": 1.0,
    "seed": 17,
    "blobs": [{"cx": 360.0, "cy": 360.0, "rx": 300.0, "ry": 300.0}],
}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """One dataset taken through every subcommand once."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    ds.mkdir()
    spec_path = root / "spec.json"
    for i in range(4):
        spec_path.write_text(json.dumps(dict(SPEC, seed=17 + i)))
        slide = root / f"sl{i}.tif"
        assert main(["synth", "--spec", str(spec_path), "--out", str(slide)]) == 0
        argv = ["crop", "--slide", str(slide), "--out", str(ds), "--mpp", "1.0"]
        if i == 0:
            argv.append("--emit-qc")
        assert main(argv) == 0
    tasks = [TaskConfig("lesion", "classification", "lesion", ("benign", "malignant"))]
    write_task_configs(ds, tasks)
    write_labels(ds, tasks, [
        (f"sl{i}", f"p{i}", {"lesion": "malignant" if i % 2 else "benign"})
        for i in range(4)
    ])
    assert main(["embed", "--dataset", str(ds), "--dim", "16", "--seed", "3",
                 "--mpp", "1.0"]) == 0
    assert main(["validate", str(ds)]) == 0
    assert main(["split", "--dataset", str(ds), "--seed", "1"]) == 0
    out = root / "run"
    assert main(["train", "--dataset", str(ds), "--model", "abmil", "--epochs", "2",
                 "--patience", "2", "--lr", "1e-3", "--attention-dim", "8",
                 "--out", str(out)]) == 0
    assert main(["eval", "--dataset", str(ds), "--checkpoint", str(out / "abmil_0.ckpt"),
                 "--out", str(out)]) == 0
    assert main(["report", "--bench", str(out / "bench.csv"),
                 "--out", str(out / "bench.md")]) == 0
    return {"root": root, "ds": ds, "out": out, "spec_path": spec_path}


def test_version_and_usage_errors(capsys):
    assert main(["--version"]) == 0
    assert "slidebench" in capsys.readouterr().out
    assert main(["not-a-subcommand"]) == 2
    assert main(["crop", "--slide", "x.tif"]) == 2  # --out missing
    assert main(["embed", "--dataset", "x", "--embedder", "external"]) == 2


def test_chain_artifacts(chain):
    ds, out = chain["ds"], chain["out"]
    for i in range(4):
        assert (ds / f"sl{i}" / "tile_manifest.jsonl").is_file()
        assert (ds / f"sl{i}" / f"sl{i}.h5").is_file()
    assert (ds / "sl0" / "qc_mask.png").is_file()
    assert not (ds / "sl1" / "qc_mask.png").exists()
    assert (ds / "task-settings" / "splits.csv").is_file()
    assert (out / "abmil_0.ckpt").is_file()
    assert (out / "train_abmil_0.jsonl").is_file()
    bench = (out / "bench.csv").read_text()
    assert bench.startswith("task,model,metric,value,n,seed")
    assert "lesion,abmil,accuracy," in bench
    md = (out / "bench.md").read_text()
    assert md.splitlines()[0] == "| Task | abmil |"
    assert "| lesion | " in md


def test_run_config_accumulates_per_directory(chain):
    root, ds, out = chain["root"], chain["ds"], chain["out"]
    synth_cfg = json.loads((root / "run_config.json").read_text())
    assert set(synth_cfg) == {"synth"}
    assert synth_cfg["synth"]["tool_version"]
    crop_cfg = json.loads((ds / "sl0" / "run_config.json").read_text())
    assert crop_cfg["crop"]["mpp"] == 1.0 and crop_cfg["crop"]["emit_qc"] is True
    ds_cfg = json.loads((ds / "run_config.json").read_text())
    assert ds_cfg["embed"]["dim"] == 16
    run_cfg = json.loads((out / "run_config.json").read_text())
    assert {"train", "eval", "report"} <= set(run_cfg)


def test_skips_without_force(chain, capsys):
    root, ds, out = chain["root"], chain["ds"], chain["out"]
    slide = root / "sl0.tif"
    before = slide.read_bytes()
    assert main(["synth", "--spec", str(chain["spec_path"]), "--out", str(slide)]) == 0
    assert "skipping" in capsys.readouterr().out
    assert slide.read_bytes() == before

    assert main(["crop", "--slide", str(slide), "--out", str(ds), "--mpp", "1.0"]) == 0
    assert "skipping" in capsys.readouterr().out
    assert main(["split", "--dataset", str(ds)]) == 0
    assert "skipping" in capsys.readouterr().out
    assert main(["train", "--dataset", str(ds), "--model", "abmil",
                 "--out", str(out)]) == 0
    assert "skipping" in capsys.readouterr().out


def test_embed_skip_and_force(chain, capsys):
    ds = chain["ds"]
    h5 = ds / "sl0" / "sl0.h5"
    before = h5.read_bytes()
    assert main(["embed", "--dataset", str(ds), "--dim", "16", "--seed", "3",
                 "--mpp", "1.0"]) == 0
    assert "wrote 0 feature file(s)" in capsys.readouterr().out
    assert main(["embed", "--dataset", str(ds), "--dim", "16", "--seed", "3",
                 "--mpp", "1.0", "--force"]) == 0
    assert "wrote 4 feature file(s)" in capsys.readouterr().out
    assert h5.read_bytes() == before


def test_validate_flags_tampered_features(chain, tmp_path, capsys):
    copy = tmp_path / "ds"
    shutil.copytree(chain["ds"], copy)
    with h5py.File(copy / "sl0" / "sl0.h5", "r+") as fh:
        coords = fh["coords_xy"][...]
        coords[0] += 1
        del fh["coords_xy"]
        fh.create_dataset("coords_xy", data=coords)
    assert main(["validate", str(copy)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_split_bad_ratios(chain):
    assert main(["split", "--dataset", str(chain["ds"]), "--ratios", "1,2",
                 "--force"]) == 2


def test_eval_idempotent_and_seed_filtered_report(chain, tmp_path):
    ds, out = chain["ds"], chain["out"]
    before = (out / "bench.csv").read_bytes()
    assert main(["eval", "--dataset", str(ds), "--checkpoint", str(out / "abmil_0.ckpt"),
                 "--out", str(out)]) == 0
    assert (out / "bench.csv").read_bytes() == before

    side = tmp_path / "side"
    for seed in ("7", "8"):
        assert main(["eval", "--dataset", str(ds),
                     "--checkpoint", str(out / "abmil_0.ckpt"),
                     "--seed", seed, "--out", str(side)]) == 0
    # two seeds for the same cell: ambiguous without --seed
    assert main(["report", "--bench", str(side / "bench.csv"),
                 "--out", str(side / "bench.md")]) == 1
    assert main(["report", "--bench", str(side / "bench.csv"), "--seed", "7",
                 "--out", str(side / "bench.md")]) == 0
    assert (side / "bench.md").is_file()


def test_pipeline_errors_exit_one(tmp_path):
    assert main(["report", "--bench", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "bench.md")]) == 1
    bad_spec = tmp_path / "bad.json"
    bad_spec.write_text(json.dumps({"width": 100, "height": 100, "mpp": 1.0, "seed": 0}))
    assert main(["synth", "--spec", str(bad_spec), "--out", str(tmp_path / "s.tif")]) == 1
    assert main(["validate", str(tmp_path)]) == 1  # no task settings
