"""Command-line entry point wiring every pipeline stage.

Exit codes: 0 success, 1 data or validation failure, 2 usage error. Each
subcommand records its fully resolved parameters (defaults included) plus
the tool version in a run_config.json beside its outputs, merged by
subcommand name so one file accumulates the stages that touched that
directory. Subcommands skip work whose outputs already exist unless --force
is given, and identical configurations reproduce identical output bytes
(log timestamps excepted).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image

from . import __version__
from .bench import (
    DEFAULT_RATIOS,
    TrainConfig,
    evaluate,
    make_splits,
    train_model,
    write_bench_csv,
    MetricRow,
    report_markdown,
)
from .dataset_store import load_dataset, write_splits
from .embedder import EmbedderSpec, embed_dataset, validate_features
from .errors import PipelineError
from .slide_io import SynthSpec, open_slide, synth_slide, thumbnail
from .tiler import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_MIN_COVERAGE,
    DEFAULT_MIN_VARIANCE,
    DEFAULT_TILE_SIZE,
    MANIFEST_NAME,
    TilePlan,
    crop_slide,
)
from .tissue_mask import (
    DEFAULT_MASK_MPP,
    DEFAULT_MIN_REGION_AREA,
    build_tissue_mask,
    qc_overlay,
)

log = logging.getLogger("slidebench")


def _write_run_config(out_dir: Path, subcommand: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.json"
    existing = {}
    if path.is_file():
        try:
            existing = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            existing = {}
    existing[subcommand] = {**payload, "tool_version": __version__}
    path.write_text(json.dumps(existing, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"synth: {out} exists, skipping (use --force to rewrite)")
        return 0
    payload = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = SynthSpec.from_json(payload)
    synth_slide(spec, out)
    _write_run_config(
        out.parent,
        "synth",
        {"spec": str(args.spec), "out": str(out), "resolved_spec": payload},
    )
    print(f"synth: wrote {out} ({spec.width}x{spec.height}, mpp {spec.mpp})")
    return 0


def _cmd_crop(args) -> int:
    slide = open_slide(args.slide)
    slide_dir = Path(args.out) / slide.slide_id
    manifest = slide_dir / MANIFEST_NAME
    if manifest.is_file() and not args.force:
        print(f"crop: {manifest} exists, skipping (use --force to redo)")
        return 0
    mask = build_tissue_mask(
        slide, mask_mpp=args.mask_mpp, min_region_area=args.min_region_area
    )
    plan = TilePlan(
        tile_size=args.tile,
        stride=args.stride,
        target_mpp=args.mpp,
        chunk_size=args.chunk,
        min_coverage=args.min_coverage,
        min_variance=args.min_variance,
    )
    records, _ = crop_slide(slide, mask, plan, slide_dir, workers=args.workers)
    if args.emit_qc:
        thumb, _ = thumbnail(slide, args.mask_mpp)
        Image.fromarray(qc_overlay(thumb, mask.mask)).save(
            slide_dir / "qc_mask.png", format="PNG"
        )
    _write_run_config(
        slide_dir,
        "crop",
        {
            "slide": str(args.slide),
            "mpp": args.mpp,
            "tile": args.tile,
            "stride": plan.stride,
            "chunk": args.chunk,
            "min_coverage": args.min_coverage,
            "min_variance": args.min_variance,
            "mask_mpp": args.mask_mpp,
            "min_region_area": args.min_region_area,
            "workers": args.workers,
            "emit_qc": bool(args.emit_qc),
        },
    )
    print(f"crop: {slide.slide_id}: {len(records)} tiles -> {slide_dir}")
    return 0


def _cmd_embed(args) -> int:
    embedder_id = args.embedder_id
    if embedder_id is None:
        if args.embedder == "native":
            embedder_id = f"native-splitmix64-d{args.dim}-s{args.seed}"
        else:
            print("embed: --embedder-id is required for external embedders", file=sys.stderr)
            return 2
    dataset = load_dataset(args.dataset)
    spec = EmbedderSpec(
        embedder_id=embedder_id, dim=args.dim, kind=args.embedder, seed=args.seed
    )
    written = embed_dataset(
        dataset,
        spec,
        mpp=args.mpp,
        force=args.force,
        adapter_cmd=args.adapter_cmd,
    )
    _write_run_config(
        Path(args.dataset),
        "embed",
        {
            "dataset": str(args.dataset),
            "embedder": args.embedder,
            "embedder_id": embedder_id,
            "dim": args.dim,
            "seed": args.seed,
            "mpp": args.mpp,
            "adapter_cmd": args.adapter_cmd,
            "workers": args.workers,
        },
    )
    print(f"embed: wrote {len(written)} feature file(s) with {embedder_id}")
    return 0


def _cmd_validate(args) -> int:
    dataset = load_dataset(args.dataset)
    report = validate_features(dataset)
    for check in report.checks:
        status = "ok" if check.ok else f"FAIL: {check.reason}"
        print(f"validate: {check.slide_id}: {status}")
    if not report.checks:
        print("validate: no feature files found")
    return 0 if report.ok else 1


def _cmd_split(args) -> int:
    dataset = load_dataset(args.dataset)
    splits_path = Path(args.dataset) / "task-settings" / "splits.csv"
    if splits_path.is_file() and not args.force:
        print(f"split: {splits_path} exists, skipping (use --force to redo)")
        return 0
    ratios = tuple(int(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        print("split: --ratios must be three comma-separated integers", file=sys.stderr)
        return 2
    assignment = make_splits(dataset.labels, ratios=ratios, seed=args.seed)
    write_splits(dataset.root, assignment.assignment)
    _write_run_config(
        Path(args.dataset) / "task-settings",
        "split",
        {"dataset": str(args.dataset), "ratios": list(ratios), "seed": args.seed},
    )
    counts = {name: len(assignment.subset(name)) for name in ("train", "val", "test")}
    print(f"split: {counts} -> {splits_path}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    out_dir = Path(args.out)
    config = TrainConfig(
        model_kind=args.model,
        task_names=tuple(t for t in args.tasks.split(",") if t) if args.tasks else (),
        epochs=args.epochs,
        patience=args.patience,
        lr=args.lr,
        weight_decay=args.weight_decay,
        attention_dim=args.attention_dim,
        seed=args.seed,
    )
    ckpt = out_dir / f"{config.model_kind}_{config.seed}.ckpt"
    if ckpt.is_file() and not args.force:
        print(f"train: {ckpt} exists, skipping (use --force to retrain)")
        return 0
    result = train_model(dataset, config, out_dir)
    _write_run_config(
        out_dir,
        "train",
        {
            "dataset": str(args.dataset),
            "model": args.model,
            "tasks": list(config.task_names),
            "epochs": args.epochs,
            "patience": args.patience,
            "lr": args.lr,
            "weight_decay": args.weight_decay,
            "attention_dim": args.attention_dim,
            "seed": args.seed,
        },
    )
    print(
        f"train: {args.model}: best epoch {result.best_epoch} "
        f"(val {result.best_val:.4f}) after {result.epochs_run} epochs -> {result.checkpoint_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    report = evaluate(
        dataset, args.checkpoint, subset=args.subset, correlation=args.correlation
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out_dir / "bench.csv", list(report.rows), seed=args.seed)
    _write_run_config(
        out_dir,
        "eval",
        {
            "dataset": str(args.dataset),
            "checkpoint": str(args.checkpoint),
            "subset": args.subset,
            "correlation": args.correlation,
            "seed": args.seed,
        },
    )
    for row in report.rows:
        value = "ZeroVariance" if row.error == "zero_variance" else (
            "-" if row.value is None else f"{row.value:.4f}"
        )
        print(f"eval: {row.task} {row.model} {row.metric} = {value} (n={row.n})")
    return 0


def _rows_from_csv(path: Path, seed: int | None = None) -> list[MetricRow]:
    import csv as _csv

    rows: list[MetricRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in _csv.DictReader(fh):
            if seed is not None and raw["seed"] != str(seed):
                continue
            token = raw["value"]
            if token == "ZeroVariance":
                value, error = None, "zero_variance"
            elif token == "":
                value, error = None, "no_labels"
            else:
                value, error = float(token), None
            rows.append(
                MetricRow(
                    task=raw["task"],
                    model=raw["model"],
                    metric=raw["metric"],
                    value=value,
                    n=int(raw["n"]),
                    error=error,
                )
            )
    return rows


def _cmd_report(args) -> int:
    bench_path = Path(args.bench)
    if not bench_path.is_file():
        raise PipelineError(f"report: {bench_path} not found; run eval first")
    # bench.csv may hold several seeds; the table shows one at a time
    rows = _rows_from_csv(bench_path, seed=args.seed)
    seen = set()
    for r in rows:
        if (r.task, r.model) in seen:
            raise PipelineError(
                "report: multiple rows per (task, model) cell; pass --seed to pick one run"
            )
        seen.add((r.task, r.model))
    models = args.models.split(",") if args.models else sorted({r.model for r in rows})
    tasks = args.tasks.split(",") if args.tasks else sorted({r.task for r in rows})
    markdown = report_markdown(rows, models, tasks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(markdown, encoding="utf-8")
    _write_run_config(
        out.parent,
        "report",
        {
            "bench": str(args.bench),
            "out": str(args.out),
            "models": models,
            "tasks": tasks,
            "seed": args.seed,
        },
    )
    print(markdown, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidebench",
        description="Deterministic slide tiling, feature bags, and MIL benchmarks",
    )
    parser.add_argument("--version", action="version", version=f"slidebench {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="write a synthetic pyramidal slide from a JSON spec")
    p.add_argument("--spec", required=True, help="JSON file: width, height, mpp, seed, blobs")
    p.add_argument("--out", required=True, help="output TIFF path")
    p.add_argument("--force", action="store_true", help="rewrite existing output")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("crop", help="mask tissue and extract quality-filtered tiles")
    p.add_argument("--slide", required=True, help="input slide file")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--mpp", type=float, default=0.5, help="target microns per pixel")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE_SIZE, help="tile size in pixels")
    p.add_argument("--stride", type=int, default=None, help="grid stride (default: tile size)")
    p.add_argument("--chunk", type=int, default=DEFAULT_CHUNK_SIZE, help="chunk size, level-0 px")
    p.add_argument("--min-coverage", type=float, default=DEFAULT_MIN_COVERAGE,
                   help="minimum tissue fraction per tile")
    p.add_argument("--min-variance", type=float, default=DEFAULT_MIN_VARIANCE,
                   help="minimum luminance variance per tile")
    p.add_argument("--mask-mpp", type=float, default=DEFAULT_MASK_MPP,
                   help="resolution of the tissue mask thumbnail")
    p.add_argument("--min-region-area", type=int, default=DEFAULT_MIN_REGION_AREA,
                   help="smallest tissue region kept, in mask pixels")
    p.add_argument("--workers", type=int, default=1, help="chunk worker threads")
    p.add_argument("--emit-qc", action="store_true", help="write qc_mask.png overlay")
    p.add_argument("--force", action="store_true", help="redo even if manifest exists")
    p.set_defaults(func=_cmd_crop)

    p = sub.add_parser("embed", help="embed tiles into per-slide feature files")
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--embedder", choices=("native", "external"), default="native")
    p.add_argument("--embedder-id", default=None,
                   help="identifier stored in feature files (default: derived)")
    p.add_argument("--dim", type=int, default=128, help="feature dimension")
    p.add_argument("--seed", type=int, default=0, help="native projection seed")
    p.add_argument("--mpp", type=float, default=0.5, help="tile mpp recorded in feature files")
    p.add_argument("--adapter-cmd", default=None, help="external embedder command")
    p.add_argument("--workers", type=int, default=1, help="slide worker threads")
    p.add_argument("--force", action="store_true", help="rewrite existing feature files")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("validate", help="check feature files against format and manifests")
    p.add_argument("dataset", help="dataset root")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("split", help="write patient-wise train/val/test splits")
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_RATIOS),
                   help="train,val,test ratio (default 7,1,2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="rewrite existing splits.csv")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a slide-level model on the train split")
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--model", choices=("slide_ave", "slide_max", "abmil"), required=True)
    p.add_argument("--tasks", default="", help="comma-separated task names (default: all)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20, help="early-stop patience in epochs")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--attention-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--force", action="store_true", help="retrain even if checkpoint exists")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and record metrics")
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", choices=("train", "val", "test"), default="test")
    p.add_argument("--correlation", choices=("pearson", "spearman"), default="pearson")
    p.add_argument("--seed", type=int, default=0, help="seed recorded in bench.csv rows")
    p.add_argument("--out", required=True, help="directory for bench.csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render the benchmark grid from bench.csv")
    p.add_argument("--bench", required=True, help="bench.csv path")
    p.add_argument("--out", required=True, help="bench.md output path")
    p.add_argument("--models", default="", help="column order (default: sorted)")
    p.add_argument("--tasks", default="", help="row order (default: sorted)")
    p.add_argument("--seed", type=int, default=None, help="restrict to one recorded seed")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main(sys.argv[1:]))
