"""Embedding backends: a hash-based stub plus a hook for real models.

A backend is a callable (batch, dim) -> features where batch is uint8
(B, H, W, 3) and the result is float32 (B, dim). Backends must be pure
functions of the pixel content so batch size never changes the output.
"""

import hashlib

import numpy as np


class UnknownModel(KeyError):
    pass


_MODELS: dict = {}


def register_model(name: str, fn) -> None:
    """Make `fn` selectable by name. Re-registering a name replaces it."""
    _MODELS[name] = fn


def get_model(name: str):
    try:
        return _MODELS[name]
    except KeyError:
        raise UnknownModel(
            f"unknown model '{name}' (registered: {sorted(_MODELS)})"
        ) from None


def _stub_vector(pixels: bytes, dim: int) -> np.ndarray:
    # Digest of the raw pixel bytes seeds every component; component j is
    # derived from sha256(digest || j) so the vector for dim d is a prefix
    # of the vector for any larger dim. No library RNG involved, so the
    # values are stable across platforms and versions.
    digest = hashlib.sha256(pixels).digest()
    out = np.empty(dim, dtype=np.float32)
    for j in range(dim):
        h = hashlib.sha256(digest + j.to_bytes(8, "little")).digest()
        u = int.from_bytes(h[:8], "little") >> 11
        out[j] = np.float32(2.0 * (u * 2.0**-53) - 1.0)
    return out


def stub_embed(batch: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic per-tile vectors uniform in [-1, 1), no weights needed."""
    feats = np.empty((batch.shape[0], dim), dtype=np.float32)
    for i in range(batch.shape[0]):
        feats[i] = _stub_vector(np.ascontiguousarray(batch[i]).tobytes(), dim)
    return feats


register_model("stub", stub_embed)
