import hashlib

import numpy as np
import pytest

from embed_adapter.models import UnknownModel, get_model, register_model, stub_embed


def hand_stub(pixels: bytes, dim: int) -> list:
    # independent restatement of the published construction
    digest = hashlib.sha256(pixels).digest()
    vals = []
    for j in range(dim):
        h = hashlib.sha256(digest + j.to_bytes(8, "little")).digest()
        u = int.from_bytes(h[:8], "little") >> 11
        vals.append(np.float32(2.0 * (u * 2.0**-53) - 1.0))
    return vals


def tiny_batch(seed, n=1, h=2, w=2):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, h, w, 3), dtype=np.uint8)


def test_matches_hand_formula():
    batch = tiny_batch(0)
    got = stub_embed(batch, 6)
    want = hand_stub(batch[0].tobytes(), 6)
    assert got.shape == (1, 6)
    assert got.dtype == np.float32
    assert got[0].tolist() == [float(v) for v in want]


def test_values_in_half_open_unit_interval():
    got = stub_embed(tiny_batch(1, n=4), 64)
    assert np.all(got >= -1.0)
    assert np.all(got < 1.0)


def test_deterministic_and_content_sensitive():
    batch = tiny_batch(2)
    a = stub_embed(batch, 16)
    b = stub_embed(batch.copy(), 16)
    assert a.tobytes() == b.tobytes()
    flipped = batch.copy()
    flipped[0, 0, 0, 0] ^= 1
    c = stub_embed(flipped, 16)
    assert a.tobytes() != c.tobytes()


def test_lower_dim_is_prefix_of_higher():
    batch = tiny_batch(3)
    small = stub_embed(batch, 4)
    big = stub_embed(batch, 16)
    assert np.array_equal(small[0], big[0, :4])


def test_batch_rows_are_independent():
    pair = np.concatenate([tiny_batch(4), tiny_batch(5)])
    both = stub_embed(pair, 8)
    solo = stub_embed(pair[1:2], 8)
    assert np.array_equal(both[1], solo[0])


def test_registry_lookup_and_replacement():
    assert get_model("stub") is stub_embed
    with pytest.raises(UnknownModel):
        get_model("no-such-backend")
    marker = lambda batch, dim: np.zeros((batch.shape[0], dim), np.float32)
    register_model("tmp-backend", marker)
    assert get_model("tmp-backend") is marker
