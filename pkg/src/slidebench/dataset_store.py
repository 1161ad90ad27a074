"""Dataset layout: per-slide feature files plus task settings.

Layout under a dataset root:

    <root>/<slide_id>/tiles/<x>_<y>.png
    <root>/<slide_id>/tile_manifest.jsonl
    <root>/<slide_id>/<slide_id>.h5
    <root>/task-settings/task_configs.json
    <root>/task-settings/labels.csv
    <root>/task-settings/splits.csv        (optional until the split stage)

Feature files hold exactly two datasets, "features" (little-endian float32,
N x D) and "coords_xy" (int32, N x 2), with root attributes slide_id,
embedder_id, mpp, tile_size. The format is the contract between the native
embedder, any external adapter, and the training stage, so reading
revalidates everything instead of trusting the writer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np

from .errors import IoError, PipelineError
from .tiler import MANIFEST_NAME, TILES_DIR

TASK_SETTINGS_DIR = "task-settings"
TASK_CONFIGS_NAME = "task_configs.json"
LABELS_NAME = "labels.csv"
SPLITS_NAME = "splits.csv"

SPLIT_NAMES = ("train", "val", "test")


class InvariantViolation(PipelineError):
    """Feature bag breaks its own contract (empty, mismatched, disordered)."""


class MissingDataset(PipelineError):
    """Feature file lacks a required dataset or attribute."""


class ShapeMismatch(PipelineError):
    """Feature file datasets have wrong dtype, rank, or inconsistent rows."""


class NonFinite(PipelineError):
    """Feature values contain NaN or infinity."""


class MissingTaskSettings(PipelineError):
    """Dataset root has no task-settings folder or config file."""


class MalformedConfig(PipelineError):
    """Task configuration or label table violates its schema."""


class DuplicateSlideId(PipelineError):
    """The same slide_id appears twice in the label table."""


@dataclass(frozen=True)
class FeatureBag:
    features: np.ndarray
    coords: np.ndarray
    slide_id: str
    embedder_id: str
    mpp: float
    tile_size: int

    def validate(self) -> None:
        f, c = self.features, self.coords
        if f.ndim != 2 or c.ndim != 2 or c.shape[1] != 2:
            raise ShapeMismatch(
                f"{self.slide_id}: features {f.shape}, coords {c.shape}"
            )
        if f.shape[0] != c.shape[0]:
            raise ShapeMismatch(
                f"{self.slide_id}: {f.shape[0]} feature rows vs {c.shape[0]} coords"
            )
        if f.shape[0] < 1:
            raise InvariantViolation(f"{self.slide_id}: empty bag")
        if f.dtype != np.float32:
            raise ShapeMismatch(f"{self.slide_id}: features dtype {f.dtype}, want float32")
        if c.dtype != np.int32:
            raise ShapeMismatch(f"{self.slide_id}: coords dtype {c.dtype}, want int32")
        if not np.all(np.isfinite(f)):
            raise NonFinite(f"{self.slide_id}: non-finite feature values")
        yx = c[:, ::-1]  # compare as (y, x)
        if c.shape[0] > 1:
            before, after = yx[:-1], yx[1:]
            increasing = (after[:, 0] > before[:, 0]) | (
                (after[:, 0] == before[:, 0]) & (after[:, 1] > before[:, 1])
            )
            if not bool(np.all(increasing)):
                raise InvariantViolation(
                    f"{self.slide_id}: coords not strictly increasing in (y, x)"
                )


def write_features(path: str | Path, bag: FeatureBag) -> Path:
    """Write one bag; read_features on the result is bit-exact."""
    bag.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with h5py.File(path, "w") as f:
            f.create_dataset("features", data=bag.features, dtype="<f4")
            f.create_dataset("coords_xy", data=bag.coords, dtype="<i4")
            f.attrs["slide_id"] = bag.slide_id
            f.attrs["embedder_id"] = bag.embedder_id
            f.attrs["mpp"] = np.float64(bag.mpp)
            f.attrs["tile_size"] = np.int64(bag.tile_size)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_features(path: str | Path) -> FeatureBag:
    """Load and revalidate a feature file written by any conforming embedder."""
    path = Path(path)
    try:
        f = h5py.File(path, "r")
    except (OSError, FileNotFoundError) as exc:
        raise MissingDataset(f"{path}: not a readable HDF5 file ({exc})") from exc
    with f:
        for name in ("features", "coords_xy"):
            if name not in f:
                raise MissingDataset(f"{path}: dataset '{name}' absent")
        for attr in ("slide_id", "embedder_id", "mpp", "tile_size"):
            if attr not in f.attrs:
                raise MissingDataset(f"{path}: attribute '{attr}' absent")
        features = f["features"][()]
        coords = f["coords_xy"][()]
        if features.dtype != np.float32:
            raise ShapeMismatch(f"{path}: features dtype {features.dtype}, want float32")
        if coords.dtype != np.int32:
            raise ShapeMismatch(f"{path}: coords dtype {coords.dtype}, want int32")
        bag = FeatureBag(
            features=features,
            coords=coords,
            slide_id=str(f.attrs["slide_id"]),
            embedder_id=str(f.attrs["embedder_id"]),
            mpp=float(f.attrs["mpp"]),
            tile_size=int(f.attrs["tile_size"]),
        )
    bag.validate()
    return bag


@dataclass(frozen=True)
class TaskConfig:
    name: str
    kind: str  # "classification" | "regression"
    label_column: str
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise MalformedConfig(f"task {self.name}: unknown kind '{self.kind}'")
        if self.kind == "classification" and len(self.classes) < 2:
            raise MalformedConfig(f"task {self.name}: classification needs >= 2 classes")
        if self.kind == "regression" and self.classes:
            raise MalformedConfig(f"task {self.name}: regression takes no class list")


@dataclass(frozen=True)
class LabelRow:
    slide_id: str
    patient_id: str
    # task name -> class index (int), regression value (float), or None
    values: dict


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    path: Path
    has_manifest: bool
    has_tiles: bool
    feature_file: Path | None


@dataclass(frozen=True)
class DatasetHandle:
    root: Path
    slides: dict[str, SlideEntry]
    tasks: tuple[TaskConfig, ...]
    labels: dict[str, LabelRow]
    splits: dict[str, str] | None
    unlabeled: tuple[str, ...]

    def task(self, name: str) -> TaskConfig:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def slides_in_split(self, subset: str) -> list[str]:
        if self.splits is None:
            raise MalformedConfig(f"{self.root}: no splits.csv; run the split stage first")
        return sorted(s for s, name in self.splits.items() if name == subset)


def _parse_tasks(path: Path) -> tuple[TaskConfig, ...]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("tasks"), list):
        raise MalformedConfig(f"{path}: expected object with a 'tasks' list")
    tasks = []
    for entry in payload["tasks"]:
        try:
            tasks.append(
                TaskConfig(
                    name=str(entry["name"]),
                    kind=str(entry["kind"]),
                    label_column=str(entry["label_column"]),
                    classes=tuple(str(c) for c in entry.get("classes", [])),
                )
            )
        except KeyError as exc:
            raise MalformedConfig(f"{path}: task entry missing field {exc}") from exc
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise MalformedConfig(f"{path}: duplicate task names")
    return tuple(tasks)


def _parse_label_value(task: TaskConfig, token: str, row_id: str):
    if token == "":
        return None
    if task.kind == "classification":
        if token not in task.classes:
            raise MalformedConfig(
                f"labels.csv row '{row_id}' column '{task.label_column}': "
                f"unknown class '{token}'"
            )
        return task.classes.index(token)
    try:
        return float(token)
    except ValueError as exc:
        raise MalformedConfig(
            f"labels.csv row '{row_id}' column '{task.label_column}': "
            f"not a number: '{token}'"
        ) from exc


def _parse_labels(path: Path, tasks: tuple[TaskConfig, ...]) -> dict[str, LabelRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "slide_id" not in header or "patient_id" not in header:
            raise MalformedConfig(f"{path}: header must include slide_id and patient_id")
        for task in tasks:
            if task.label_column not in header:
                raise MalformedConfig(f"{path}: missing label column '{task.label_column}'")
        rows: dict[str, LabelRow] = {}
        for raw in reader:
            sid = raw["slide_id"]
            if sid in rows:
                raise DuplicateSlideId(f"{path}: slide_id '{sid}' appears twice")
            values = {
                task.name: _parse_label_value(task, raw[task.label_column].strip(), sid)
                for task in tasks
            }
            rows[sid] = LabelRow(slide_id=sid, patient_id=raw["patient_id"], values=values)
    return rows


def _parse_splits(path: Path) -> dict[str, str]:
    splits: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["slide_id", "split"]:
            raise MalformedConfig(f"{path}: header must be slide_id,split")
        for raw in reader:
            name = raw["split"]
            if name not in SPLIT_NAMES:
                raise MalformedConfig(f"{path}: unknown split '{name}'")
            splits[raw["slide_id"]] = name
    return splits


def load_dataset(root: str | Path) -> DatasetHandle:
    """Inventory a dataset root; read-only and safe to call concurrently."""
    root = Path(root)
    settings = root / TASK_SETTINGS_DIR
    configs_path = settings / TASK_CONFIGS_NAME
    if not configs_path.is_file():
        raise MissingTaskSettings(f"{root}: no {TASK_SETTINGS_DIR}/{TASK_CONFIGS_NAME}")
    tasks = _parse_tasks(configs_path)

    labels_path = settings / LABELS_NAME
    labels = _parse_labels(labels_path, tasks) if labels_path.is_file() else {}

    splits_path = settings / SPLITS_NAME
    splits = _parse_splits(splits_path) if splits_path.is_file() else None

    slides: dict[str, SlideEntry] = {}
    for child in sorted(root.iterdir()):
        if not child.is_dir() or child.name == TASK_SETTINGS_DIR:
            continue
        sid = child.name
        manifest = child / MANIFEST_NAME
        tiles = child / TILES_DIR
        h5 = child / f"{sid}.h5"
        has_manifest = manifest.is_file()
        has_tiles = tiles.is_dir()
        feature_file = h5 if h5.is_file() else None
        if has_manifest or has_tiles or feature_file:
            slides[sid] = SlideEntry(
                slide_id=sid,
                path=child,
                has_manifest=has_manifest,
                has_tiles=has_tiles,
                feature_file=feature_file,
            )

    unlabeled = tuple(sorted(sid for sid in slides if sid not in labels))
    return DatasetHandle(
        root=root,
        slides=slides,
        tasks=tasks,
        labels=labels,
        splits=splits,
        unlabeled=unlabeled,
    )


def write_task_configs(root: str | Path, tasks: list[TaskConfig] | tuple[TaskConfig, ...]) -> Path:
    settings = Path(root) / TASK_SETTINGS_DIR
    settings.mkdir(parents=True, exist_ok=True)
    payload = {
        "tasks": [
            {
                "name": t.name,
                "kind": t.kind,
                "label_column": t.label_column,
                **({"classes": list(t.classes)} if t.kind == "classification" else {}),
            }
            for t in tasks
        ]
    }
    path = settings / TASK_CONFIGS_NAME
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def write_labels(
    root: str | Path,
    tasks: list[TaskConfig] | tuple[TaskConfig, ...],
    rows: list[tuple[str, str, dict]],
) -> Path:
    """rows: (slide_id, patient_id, {task name -> raw token or None})."""
    settings = Path(root) / TASK_SETTINGS_DIR
    settings.mkdir(parents=True, exist_ok=True)
    path = settings / LABELS_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "patient_id"] + [t.label_column for t in tasks])
        for sid, pid, values in rows:
            cells = [sid, pid]
            for t in tasks:
                v = values.get(t.name)
                cells.append("" if v is None else str(v))
            writer.writerow(cells)
    return path


def write_splits(root: str | Path, assignment: dict[str, str]) -> Path:
    settings = Path(root) / TASK_SETTINGS_DIR
    settings.mkdir(parents=True, exist_ok=True)
    path = settings / SPLITS_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "split"])
        for sid in sorted(assignment):
            writer.writerow([sid, assignment[sid]])
    return path
