"""Patient-wise splits, training, evaluation, and benchmark tables.

Splitting shuffles patients (never slides) with the seeded portable
generator and apportions them to train/val/test by largest remainder, so
subset sizes stay within one patient of the requested ratio for any P.
Training is batch-of-one-bag with Adam; the best-validation checkpoint wins,
earlier epoch on ties. Everything downstream of a seed is bit-reproducible;
log timestamps are the one sanctioned exception.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataset_store import (
    DatasetHandle,
    LabelRow,
    TaskConfig,
    read_features,
    write_splits,
)
from .errors import PipelineError
from .mil_core import (
    AdamState,
    MILParams,
    adam_step,
    backward_model,
    build_model,
    forward_model,
    load_checkpoint,
    loss_ce,
    loss_mse,
    named_params,
    save_checkpoint,
)
from .prng import SplitMix64Stream

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (7, 1, 2)
SUBSETS = ("train", "val", "test")


class TooFewPatients(PipelineError):
    """Fewer than 3 patients; train/val/test cannot all be non-empty."""


class MissingFeatures(PipelineError):
    """A slide required by the requested split has no usable feature file."""


class NoLabeledSlides(PipelineError):
    """No training slide carries a label for any requested task."""


class ZeroVariance(PipelineError):
    """Pearson correlation undefined: predictions or targets are constant."""


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]
    seed: int
    ratios: tuple[int, int, int]

    def subset(self, name: str) -> list[str]:
        return sorted(s for s, v in self.assignment.items() if v == name)


def _apportion(total: int, ratios: tuple[int, int, int]) -> list[int]:
    """Largest-remainder apportionment; ties broken toward earlier subsets."""
    denom = sum(ratios)
    quotas = [total * r / denom for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def make_splits(
    labels: dict[str, LabelRow],
    ratios: tuple[int, int, int] = DEFAULT_RATIOS,
    seed: int = 0,
    stratify_patient_label: dict[str, int] | None = None,
) -> SplitAssignment:
    """Assign every labeled slide to train/val/test, patient-wise.

    All slides of a patient land in one subset. Patient counts follow the
    ratio by largest remainder with val and test forced to at least one
    patient each (taken from train). Optional stratification groups patients
    by a provided label before apportioning; off by default.
    """
    patients = sorted({row.patient_id for row in labels.values()})
    if len(patients) < 3:
        raise TooFewPatients(f"{len(patients)} patients; need at least 3")
    stream = SplitMix64Stream(seed)

    if stratify_patient_label:
        groups = {}
        for p in patients:
            groups.setdefault(stratify_patient_label.get(p), []).append(p)
        group_keys = sorted(groups, key=lambda k: (k is None, k))
    else:
        groups = {None: patients}
        group_keys = [None]

    subset_patients: dict[str, list[str]] = {name: [] for name in SUBSETS}
    for key in group_keys:
        members = stream.shuffle(groups[key])
        n_train, n_val, n_test = _apportion(len(members), ratios)
        subset_patients["train"] += members[:n_train]
        subset_patients["val"] += members[n_train : n_train + n_val]
        subset_patients["test"] += members[n_train + n_val :]

    # Never leave val or test empty; train gives up its last patients.
    for name in ("val", "test"):
        if not subset_patients[name]:
            subset_patients[name].append(subset_patients["train"].pop())

    patient_to_subset = {
        p: name for name in SUBSETS for p in subset_patients[name]
    }
    assignment = {
        sid: patient_to_subset[row.patient_id] for sid, row in labels.items()
    }
    return SplitAssignment(assignment=assignment, seed=seed, ratios=ratios)


def split_dataset(dataset: DatasetHandle, ratios=DEFAULT_RATIOS, seed: int = 0) -> Path:
    """make_splits over the dataset's label table, persisted to splits.csv."""
    assignment = make_splits(dataset.labels, ratios=ratios, seed=seed)
    return write_splits(dataset.root, assignment.assignment)


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str
    task_names: tuple[str, ...] = ()  # empty = all dataset tasks
    epochs: int = 200
    patience: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-5
    attention_dim: int = 128
    seed: int = 0


def _select_tasks(dataset: DatasetHandle, names: tuple[str, ...]) -> tuple[TaskConfig, ...]:
    if not names:
        return dataset.tasks
    return tuple(dataset.task(n) for n in names)


def _load_bags(dataset: DatasetHandle, slide_ids: list[str]) -> dict[str, np.ndarray]:
    bags: dict[str, np.ndarray] = {}
    embedder_ids = set()
    dims = set()
    for sid in slide_ids:
        entry = dataset.slides.get(sid)
        if entry is None or entry.feature_file is None:
            raise MissingFeatures(f"slide '{sid}' has no feature file")
        bag = read_features(entry.feature_file)
        bags[sid] = bag.features
        embedder_ids.add(bag.embedder_id)
        dims.add(bag.features.shape[1])
    if len(embedder_ids) > 1:
        raise MissingFeatures(f"mixed embedders across slides: {sorted(embedder_ids)}")
    if len(dims) > 1:
        raise MissingFeatures(f"mixed feature dims across slides: {sorted(dims)}")
    return bags


def _bag_losses(
    bag: np.ndarray, params: MILParams, labels: dict
) -> tuple[float, dict]:
    """Summed loss over tasks with labels present, plus per-head gradients."""
    outputs, _, _ = forward_model(bag, params)
    total = 0.0
    douts: dict[str, np.ndarray] = {}
    for head in params.heads:
        value = labels.get(head.task)
        if value is None:
            continue
        if head.kind == "classification":
            l, g = loss_ce(outputs[head.task], int(value))
            douts[head.task] = g
        else:
            l, g = loss_mse(float(outputs[head.task][0]), float(value))
            douts[head.task] = np.array([g], dtype=bag.dtype)
        total += l
    return total, douts


def _predict(bag: np.ndarray, params: MILParams) -> dict:
    outputs, _, _ = forward_model(bag, params)
    preds = {}
    for head in params.heads:
        if head.kind == "classification":
            preds[head.task] = int(np.argmax(outputs[head.task]))
        else:
            preds[head.task] = float(outputs[head.task][0])
    return preds


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Two-pass Pearson correlation in float64; constant input is an error."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"need two equal-length vectors, got {x.shape} vs {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("constant predictions or targets")
    return float(dx @ dy) / (sx * sy)


def spearman_r(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson over average ranks; same ZeroVariance policy."""

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size, dtype=np.float64)
        i = 0
        while i < v.size:
            j = i
            while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    return pearson_r(ranks(np.asarray(x, dtype=np.float64)), ranks(np.asarray(y, dtype=np.float64)))


def _subset_metric(
    dataset: DatasetHandle,
    params: MILParams,
    bags: dict[str, np.ndarray],
    slide_ids: list[str],
    task: TaskConfig,
    correlation: str = "pearson",
) -> tuple[float | None, int, str | None]:
    """(value, n, error) for one task over one subset; never returns NaN."""
    preds, targets = [], []
    for sid in slide_ids:
        value = dataset.labels[sid].values.get(task.name) if sid in dataset.labels else None
        if value is None:
            continue
        preds.append(_predict(bags[sid], params)[task.name])
        targets.append(value)
    n = len(preds)
    if n == 0:
        return None, 0, "no_labels"
    if task.kind == "classification":
        correct = sum(1 for p, t in zip(preds, targets) if p == t)
        return 100.0 * correct / n, n, None
    corr = pearson_r if correlation == "pearson" else spearman_r
    try:
        return corr(np.array(preds), np.array(targets)), n, None
    except (ZeroVariance, ValueError):
        return None, n, "zero_variance"


def _val_score(per_task: list[tuple[float | None, int, str | None]], kinds: list[str]) -> float:
    """Scalar model-selection score: mean of per-task normalized metrics.

    Accuracy contributes on a 0..1 scale so classification and regression
    tasks weigh equally; an undefined correlation contributes 0.
    """
    scores = []
    for (value, _, error), kind in zip(per_task, kinds):
        if error is not None or value is None:
            scores.append(0.0)
        elif kind == "classification":
            scores.append(value / 100.0)
        else:
            scores.append(value)
    return sum(scores) / len(scores) if scores else 0.0


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_epoch: int
    best_val: float
    epochs_run: int


def _snapshot(params: MILParams) -> list[np.ndarray]:
    return [arr.copy() for _, arr in named_params(params)]


def _restore(params: MILParams, snap: list[np.ndarray]) -> None:
    for (_, arr), saved in zip(named_params(params), snap):
        arr[...] = saved


def train_model(
    dataset: DatasetHandle,
    config: TrainConfig,
    out_dir: str | Path,
    embedder_id_hint: str | None = None,
) -> TrainResult:
    """Train one model on the train split, select on val, write checkpoint+log.

    Deterministic for a fixed (dataset, config): bags are visited in a
    seeded per-epoch shuffle of the sorted slide list, and the checkpoint
    stores the epoch with the best validation score (earlier epoch on ties).
    """
    tasks = _select_tasks(dataset, config.task_names)
    train_ids = [
        sid
        for sid in dataset.slides_in_split("train")
        if sid in dataset.labels
        and any(dataset.labels[sid].values.get(t.name) is not None for t in tasks)
    ]
    if not train_ids:
        raise NoLabeledSlides(f"no train slides labeled for tasks {[t.name for t in tasks]}")
    val_ids = [sid for sid in dataset.slides_in_split("val") if sid in dataset.labels]

    bags = _load_bags(dataset, sorted(set(train_ids + val_ids)))
    dim = next(iter(bags.values())).shape[1]
    embedder_id = embedder_id_hint or read_features(
        dataset.slides[train_ids[0]].feature_file
    ).embedder_id

    params = build_model(
        tasks, D=dim, kind=config.model_kind, L=config.attention_dim, seed=config.seed
    )
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_stream = SplitMix64Stream(config.seed)
    kinds = [t.kind for t in tasks]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"train_{config.model_kind}_{config.seed}.jsonl"

    best_val = -math.inf
    best_epoch = -1
    best_snap = _snapshot(params)
    epochs_run = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(config.epochs):
            epochs_run = epoch + 1
            order = shuffle_stream.shuffle(sorted(train_ids))
            epoch_loss = 0.0
            for sid in order:
                labels = dataset.labels[sid].values
                loss, douts = _bag_losses(bags[sid], params, labels)
                if douts:
                    grads = backward_model(bags[sid], params, douts)
                    adam_step(params, grads, adam)
                epoch_loss += loss
            train_loss = epoch_loss / len(order)

            per_task = [
                _subset_metric(dataset, params, bags, val_ids, t) for t in tasks
            ]
            val_metric = _val_score(per_task, kinds)
            log_fh.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "train_loss": train_loss,
                        "val_metric": val_metric,
                        "timestamp": datetime.now(timezone.utc).isoformat(),
                    }
                )
                + "\n"
            )
            if val_metric > best_val:
                best_val = val_metric
                best_epoch = epoch
                best_snap = _snapshot(params)
            elif epoch - best_epoch >= config.patience:
                break

    _restore(params, best_snap)
    ckpt_path = out_dir / f"{config.model_kind}_{config.seed}.ckpt"
    save_checkpoint(ckpt_path, params, embedder_id, tasks)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        best_epoch=best_epoch,
        best_val=best_val,
        epochs_run=epochs_run,
    )


@dataclass(frozen=True)
class MetricRow:
    task: str
    model: str
    metric: str
    value: float | None
    n: int
    error: str | None = None


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricRow, ...]


def evaluate(
    dataset: DatasetHandle,
    checkpoint_path: str | Path,
    subset: str = "test",
    correlation: str = "pearson",
) -> MetricsReport:
    """Pure evaluation of a checkpoint on one subset; repeatable verbatim."""
    params, _, tasks = load_checkpoint(checkpoint_path)
    slide_ids = [sid for sid in dataset.slides_in_split(subset) if sid in dataset.labels]
    bags = _load_bags(dataset, slide_ids)
    rows = []
    for task in tasks:
        value, n, error = _subset_metric(
            dataset, params, bags, slide_ids, task, correlation=correlation
        )
        name = (
            "accuracy"
            if task.kind == "classification"
            else ("pearson_r" if correlation == "pearson" else "spearman_r")
        )
        rows.append(
            MetricRow(
                task=task.name,
                model=params.kind,
                metric=name,
                value=value,
                n=n,
                error=error,
            )
        )
    return MetricsReport(rows=tuple(rows))


def _format_value(row: MetricRow) -> str:
    if row.error is not None or row.value is None:
        return "ZeroVariance" if row.error == "zero_variance" else "-"
    if row.metric == "accuracy":
        return f"{row.value:.2f}"
    return f"{row.value:.3f}"


def report_markdown(rows: list[MetricRow], models: list[str], tasks: list[str]) -> str:
    """Table 1-style grid: rows = tasks, columns = models, best per row bold."""
    by_key = {(r.task, r.model): r for r in rows}
    lines = ["| Task | " + " | ".join(models) + " |",
             "| --- | " + " | ".join(["---"] * len(models)) + " |"]
    for task in tasks:
        cells = []
        values = [
            by_key[(task, m)].value
            for m in models
            if (task, m) in by_key and by_key[(task, m)].value is not None
        ]
        best = max(values) if values else None
        for m in models:
            row = by_key.get((task, m))
            if row is None:
                cells.append("-")
                continue
            text = _format_value(row)
            if row.value is not None and best is not None and row.value == best:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + task + " | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_bench_csv(path: str | Path, rows: list[MetricRow], seed: int) -> Path:
    """Upsert rows into bench.csv keyed by (task, model, metric, seed).

    The file is rewritten fully sorted, so repeated identical runs leave
    identical bytes.
    """
    path = Path(path)
    table: dict[tuple[str, str, str, str], tuple[str, str]] = {}
    if path.is_file():
        with open(path, newline="", encoding="utf-8") as fh:
            for raw in csv.DictReader(fh):
                key = (raw["task"], raw["model"], raw["metric"], raw["seed"])
                table[key] = (raw["value"], raw["n"])
    for row in rows:
        value = "ZeroVariance" if row.error == "zero_variance" else (
            "" if row.value is None else repr(float(row.value))
        )
        table[(row.task, row.model, row.metric, str(seed))] = (value, str(row.n))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "model", "metric", "value", "n", "seed"])
        for key in sorted(table):
            value, n = table[key]
            writer.writerow([key[0], key[1], key[2], value, n, key[3]])
    return path
