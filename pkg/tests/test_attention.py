import math

import numpy as np
import pytest

import mol.tensorcore as tc
from mol.attention import (
    KVCache,
    apply_rope,
    build_rope,
    causal_attention,
    kv_decode_step,
    restricted_attention,
)
from mol.macs import MacCounter
from mol.tensorcore import Tensor


def _attention_loops(q, k, v):
    H, T, d = q.shape
    out = np.zeros_like(v)
    for h in range(H):
        for t in range(T):
            scores = [sum(q[h, t, i] * k[h, s, i] for i in range(d)) / math.sqrt(d) for s in range(t + 1)]
            m = max(scores)
            w = [math.exp(x - m) for x in scores]
            z = sum(w)
            for s in range(t + 1):
                out[h, t] += w[s] / z * v[h, s]
    return out


def test_rope_table_values():
    table = build_rope(64, 16, 10000.0)
    np.testing.assert_array_equal(table.cos[0], 1.0)
    np.testing.assert_array_equal(table.sin[0], 0.0)
    assert table.cos[1, 0] == pytest.approx(0.5403, abs=1e-4)
    assert table.sin[1, 0] == pytest.approx(0.8415, abs=1e-4)
    np.testing.assert_allclose(table.cos**2 + table.sin**2, 1.0, atol=1e-6)
    # angular frequency of pair i is base**(-2i/d): period 2*pi for i=0,
    # 2*pi*base**(62/64) for the last pair
    freqs = np.arctan2(table.sin[1], table.cos[1])
    assert 2 * math.pi / freqs[0] == pytest.approx(2 * math.pi)
    assert 2 * math.pi / freqs[-1] == pytest.approx(2 * math.pi * 10000 ** (62 / 64), rel=1e-9)


def test_rope_rejects_odd_width_and_overflow():
    with pytest.raises(ValueError):
        build_rope(63, 8)
    table = build_rope(64, 4)
    with pytest.raises(ValueError):
        apply_rope(Tensor(np.zeros((1, 2, 64))), [0, 4], table)


def test_rope_identity_norm_and_relative_property():
    rng = np.random.default_rng(0)
    table = build_rope(64, 64)
    x = rng.normal(size=(2, 5, 64))
    np.testing.assert_allclose(apply_rope(Tensor(x), [0] * 5, table).data, x)
    y = apply_rope(Tensor(x), [3, 9, 17, 30, 63], table).data
    pairs_x = x.reshape(2, 5, 32, 2)
    pairs_y = y.reshape(2, 5, 32, 2)
    np.testing.assert_allclose(np.linalg.norm(pairs_y, axis=-1), np.linalg.norm(pairs_x, axis=-1), atol=1e-6)
    q = rng.normal(size=(1, 1, 64))
    k = rng.normal(size=(1, 1, 64))
    for offset in (0, 5, 17):
        dots = [
            float((apply_rope(Tensor(q), [t + offset], table).data * apply_rope(Tensor(k), [t], table).data).sum())
            for t in (0, 11, 40)
        ]
        np.testing.assert_allclose(dots, dots[0], atol=1e-9)


def test_causal_attention_small_cases():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(2, 1, 4))
    q = rng.normal(size=(2, 1, 4))
    np.testing.assert_allclose(causal_attention(Tensor(q), Tensor(q), Tensor(v)).data, v)
    T = 6
    k = np.broadcast_to(rng.normal(size=(1, 1, 4)), (1, T, 4)).copy()
    v = rng.normal(size=(1, T, 4))
    q = rng.normal(size=(1, T, 4))
    out = causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    expected = np.cumsum(v, axis=1) / np.arange(1, T + 1)[None, :, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_causal_attention_matches_triple_loop():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(2, 5, 4)) for _ in range(3))
    out = causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, _attention_loops(q, k, v), atol=1e-6)


def test_causal_attention_tiled_equals_untiled(monkeypatch):
    import mol.attention as att

    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.normal(size=(2, 37, 8)), requires_grad=True) for _ in range(3))
    w = rng.normal(size=(2, 37, 8))
    ref = causal_attention(q, k, v)
    tc.sum(ref * w).backward()
    grads = [t.grad.copy() for t in (q, k, v)]
    for t in (q, k, v):
        t.zero_grad()
    monkeypatch.setattr(att, "_TILE_ELEMS", 2 * 37 * 5)
    tiled = causal_attention(q, k, v)
    tc.sum(tiled * w).backward()
    np.testing.assert_allclose(tiled.data, ref.data, atol=1e-12)
    for t, g in zip((q, k, v), grads):
        np.testing.assert_allclose(t.grad, g, atol=1e-12)


def test_causal_attention_gradcheck():
    # q at position 0 has an identically-zero gradient, so check through
    # input projections where every coordinate carries signal
    rng = np.random.default_rng(4)
    for _ in range(3):
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        wq, wk, wv = (Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True) for _ in range(3))
        mask = rng.random(5) < 0.6
        w = rng.normal(size=(2, 5, 4))
        err = tc.gradcheck(
            lambda: tc.sum(causal_attention(x @ wq, x @ wk, x @ wv, key_mask=mask) * w), [x, wq, wk, wv]
        )
        assert err < 1e-4


def test_restricted_attention_cases():
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.normal(size=(2, 10, 4))) for _ in range(3))
    full = causal_attention(q, k, v).data
    np.testing.assert_array_equal(restricted_attention(q, k, v, np.arange(10)).data, full)
    np.testing.assert_array_equal(restricted_attention(q, k, v, [6]).data, v.data[:, 6:7])
    subset = np.sort(rng.choice(10, 4, replace=False))
    gathered = causal_attention(*(Tensor(t.data[:, subset]) for t in (q, k, v))).data
    np.testing.assert_array_equal(restricted_attention(q, k, v, subset).data, gathered)
    mask = np.zeros(10, bool)
    mask[subset] = True
    masked = causal_attention(q, k, v, key_mask=mask).data[:, subset]
    np.testing.assert_allclose(masked, gathered, atol=1e-12)
    for bad in ([3, 1], [2, 2], [0, 10]):
        with pytest.raises(ValueError):
            restricted_attention(q, k, v, bad)


def test_kv_decode_matches_full_and_counts_linearly():
    rng = np.random.default_rng(6)
    H, T, d = 2, 12, 64
    q, k, v = (rng.normal(size=(H, T, d)).astype(np.float32) for _ in range(3))
    full = causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    cache = KVCache.empty(H, T, d)
    counter = MacCounter()
    per_step = []
    for t in range(T):
        before = counter.total
        out = kv_decode_step(cache, *(Tensor(a[:, t : t + 1]) for a in (q, k, v)), counter=counter)
        per_step.append(counter.total - before)
        np.testing.assert_allclose(out.data[:, 0], full[:, t], atol=1e-5)
    assert per_step == [2 * L * H * d for L in range(1, T + 1)]
    assert per_step[11] / per_step[2] == 4.0
    with pytest.raises(ValueError):
        kv_decode_step(cache, *(Tensor(a[:, :1]) for a in (q, k, v)))
