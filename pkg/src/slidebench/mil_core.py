"""Slide-level models over feature bags, with exact manual gradients.

Three backbones: mean pooling, max pooling, and gated-attention pooling
(score_k = w^T(tanh(V h_k) * sigmoid(U h_k)), softmax over instances,
z = sum_k a_k h_k). One linear head per task sits on the pooled vector.
Backpropagation is hand-derived and verified against finite differences, so
the package carries no autograd dependency and training trajectories are
exactly replayable.

Checkpoints are a single file: a JSON header (shapes, dtypes, offsets, task
list, embedder id) followed by raw little-endian array bytes. An archive
format would embed timestamps and break byte-identical reruns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_store import TaskConfig
from .errors import IoError, PipelineError
from .prng import SplitMix64Stream

MODEL_KINDS = ("slide_ave", "slide_max", "abmil")
DEFAULT_ATTENTION_DIM = 128
CHECKPOINT_VERSION = 1


class EmptyBag(PipelineError):
    """Model input bag has no instances."""


class NonFiniteInput(PipelineError):
    """Bag or parameters contain NaN or infinity."""


class BadCheckpoint(PipelineError):
    """Checkpoint file is malformed or from an unknown version."""


@dataclass
class HeadParams:
    """Linear head: W is C x D (C = 1 for regression), b is length C."""

    task: str
    kind: str  # "classification" | "regression"
    W: np.ndarray
    b: np.ndarray


@dataclass
class MILParams:
    kind: str
    D: int
    L: int
    V: np.ndarray | None
    U: np.ndarray | None
    w: np.ndarray | None
    heads: list[HeadParams]

    def head(self, task: str) -> HeadParams:
        for h in self.heads:
            if h.task == task:
                return h
        raise KeyError(task)


def named_params(params: MILParams) -> list[tuple[str, np.ndarray]]:
    """All trainable arrays in a fixed order; the optimizer iterates this."""
    items: list[tuple[str, np.ndarray]] = []
    if params.kind == "abmil":
        items += [("V", params.V), ("U", params.U), ("w", params.w)]
    for h in params.heads:
        items += [(f"head.{h.task}.W", h.W), (f"head.{h.task}.b", h.b)]
    return items


def build_model(
    tasks: list[TaskConfig] | tuple[TaskConfig, ...],
    D: int,
    kind: str,
    L: int = DEFAULT_ATTENTION_DIM,
    seed: int = 0,
    dtype=np.float32,
) -> MILParams:
    """Seeded init: every matrix uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

    Draw order is fixed (V, U, w, then each task's W and b in task order),
    so a seed fully determines the starting point.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind '{kind}'")
    if not tasks:
        raise ValueError("at least one task required")
    stream = SplitMix64Stream(seed)

    def draw(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(float(fan_in))
        n = int(np.prod(shape))
        return stream.uniform(n, -bound, bound).reshape(shape).astype(dtype)

    V = U = w = None
    if kind == "abmil":
        V = draw((L, D), D)
        U = draw((L, D), D)
        w = draw((L,), L)
    heads = []
    for t in tasks:
        c = len(t.classes) if t.kind == "classification" else 1
        heads.append(HeadParams(task=t.name, kind=t.kind, W=draw((c, D), D), b=draw((c,), D)))
    return MILParams(kind=kind, D=D, L=L, V=V, U=U, w=w, heads=heads)


def _check_bag(bag: np.ndarray) -> None:
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise EmptyBag(f"bag shape {bag.shape}")
    if not np.all(np.isfinite(bag)):
        raise NonFiniteInput("bag contains non-finite values")


def pool_ave(bag: np.ndarray) -> np.ndarray:
    """Columnwise mean via compensated summation: permuting rows cannot
    change the result by even one ulp."""
    _check_bag(bag)
    n = float(bag.shape[0])
    cols = [math.fsum(bag[:, d].tolist()) / n for d in range(bag.shape[1])]
    return np.array(cols, dtype=bag.dtype)


def pool_max(bag: np.ndarray) -> np.ndarray:
    _check_bag(bag)
    return bag.max(axis=0)


def attention_weights(scores: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction; shifting all scores by c leaves it fixed."""
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _attention(bag: np.ndarray, params: MILParams):
    """Gated attention internals; returns (a, z, T, G, scores)."""
    T = np.tanh(bag @ params.V.T)
    G = 1.0 / (1.0 + np.exp(-(bag @ params.U.T)))
    scores = (T * G) @ params.w
    a = attention_weights(scores)
    z = a @ bag
    return a, z, T, G, scores


def abmil_forward(
    bag: np.ndarray, params: MILParams, head: HeadParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(output, attention, pooled) for one head; output is raw logits."""
    _check_bag(bag)
    a, z, _, _, _ = _attention(bag, params)
    return head.W @ z + head.b, a, z


def forward_model(bag: np.ndarray, params: MILParams) -> tuple[dict, np.ndarray | None, np.ndarray]:
    """Pool once, apply every head; returns ({task: logits}, attention, z)."""
    _check_bag(bag)
    if params.kind == "abmil":
        a, z, _, _, _ = _attention(bag, params)
    elif params.kind == "slide_ave":
        a, z = None, pool_ave(bag)
    else:
        a, z = None, pool_max(bag)
    outputs = {h.task: h.W @ z + h.b for h in params.heads}
    return outputs, a, z


def backward_model(
    bag: np.ndarray, params: MILParams, d_outputs: dict
) -> dict[str, np.ndarray]:
    """Exact gradients for every named parameter given dLoss/dOutput per head.

    Heads absent from d_outputs (missing labels) get exactly zero gradients.
    Softmax backward: dS = a * (da - a . da); gate/tanh products follow the
    chain rule with deterministic left-to-right matmuls.
    """
    _check_bag(bag)
    grads = {name: np.zeros_like(arr) for name, arr in named_params(params)}

    dz = np.zeros(params.D, dtype=bag.dtype)
    for h in params.heads:
        d_out = d_outputs.get(h.task)
        if d_out is None:
            continue
        d_out = np.asarray(d_out, dtype=bag.dtype)
        dz = dz + h.W.T @ d_out

    n = bag.shape[0]
    if params.kind == "abmil":
        a, z, T, G, _ = _attention(bag, params)
        da = bag @ dz
        ds = a * (da - float(a @ da))
        dtg = ds[:, None] * params.w[None, :]
        dpre_v = dtg * G * (1.0 - T * T)
        dpre_u = dtg * T * G * (1.0 - G)
        grads["V"] = dpre_v.T @ bag
        grads["U"] = dpre_u.T @ bag
        grads["w"] = (T * G).T @ ds
    elif params.kind == "slide_ave":
        z = pool_ave(bag)
    else:
        # heads hold no per-instance state, so z alone suffices here
        z = pool_max(bag)

    for h in params.heads:
        d_out = d_outputs.get(h.task)
        if d_out is None:
            continue
        d_out = np.asarray(d_out, dtype=bag.dtype)
        grads[f"head.{h.task}.W"] = np.outer(d_out, z)
        grads[f"head.{h.task}.b"] = d_out.copy()
    return grads


def loss_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross entropy from raw logits via logsumexp; grad = softmax - onehot."""
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} outside [0, {logits.shape[0]})")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = float(lse - logits[label])
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return loss, grad


def loss_mse(pred: float, target: float) -> tuple[float, float]:
    diff = float(pred) - float(target)
    return diff * diff, 2.0 * diff


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: MILParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, arr in named_params(params):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        arr -= (state.lr * (m_hat / (np.sqrt(v_hat) + state.eps))).astype(arr.dtype)
        if state.weight_decay > 0.0:
            arr -= (state.lr * state.weight_decay * arr).astype(arr.dtype)


def save_checkpoint(
    path: str | Path, params: MILParams, embedder_id: str, tasks: list[TaskConfig] | tuple
) -> Path:
    """Single-file checkpoint: JSON header line + raw little-endian blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = []
    blobs = []
    offset = 0
    for name, arr in named_params(params):
        data = np.ascontiguousarray(arr, dtype="<f4")
        arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset}
        )
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "D": params.D,
        "L": params.L,
        "embedder_id": embedder_id,
        "tasks": [
            {"name": t.name, "kind": t.kind, "label_column": t.label_column,
             "classes": list(t.classes)}
            for t in tasks
        ],
        "arrays": arrays,
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> tuple[MILParams, str, tuple[TaskConfig, ...]]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BadCheckpoint(f"{path}: unreadable header") from exc
    if not isinstance(header, dict):
        raise BadCheckpoint(f"{path}: unreadable header")
    if header.get("version") != CHECKPOINT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {header.get('version')}")
    try:
        tasks = tuple(
            TaskConfig(
                name=t["name"],
                kind=t["kind"],
                label_column=t["label_column"],
                classes=tuple(t["classes"]),
            )
            for t in header["tasks"]
        )
        stored: dict[str, np.ndarray] = {}
        for meta in header["arrays"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = meta["offset"]
            end = start + 4 * count
            if end > len(body):
                raise BadCheckpoint(f"{path}: truncated array '{meta['name']}'")
            stored[meta["name"]] = np.frombuffer(
                body[start:end], dtype="<f4"
            ).reshape(shape).copy()
        kind, D, L = header["kind"], int(header["D"]), int(header["L"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BadCheckpoint(f"{path}: malformed header fields") from exc
    heads = []
    for t in tasks:
        try:
            heads.append(
                HeadParams(
                    task=t.name,
                    kind=t.kind,
                    W=stored[f"head.{t.name}.W"],
                    b=stored[f"head.{t.name}.b"],
                )
            )
        except KeyError as exc:
            raise BadCheckpoint(f"{path}: missing head arrays for task {t.name}") from exc
    if kind == "abmil" and not all(k in stored for k in ("V", "U", "w")):
        raise BadCheckpoint(f"{path}: missing attention arrays")
    params = MILParams(
        kind=kind,
        D=D,
        L=L,
        V=stored.get("V"),
        U=stored.get("U"),
        w=stored.get("w"),
        heads=heads,
    )
    return params, str(header["embedder_id"]), tasks
