import numpy as np
import pytest

import mol.tensorcore as tc
from mol.attention import build_rope
from mol.ffn import Rank1MoE, ffn_dense, ffn_rank1_moe
from mol.router import route_topk
from mol.stage import SplitStage, StageSpec, split_stage, thin_block
from mol.tensorcore import Tensor, no_grad

TABLE = build_rope(64, 512)


def _stage(text, d_model=128, seed=0, dtype=np.float64, std=0.05):
    spec = StageSpec.parse(text)
    return SplitStage(d_model, spec, np.random.default_rng(seed), std, std, dtype=dtype)


def _x(T, d=128, seed=1, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).normal(size=(T, d)).astype(dtype))


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0


def test_notation_round_trip_and_validation():
    s = StageSpec.parse("1+3of15@64 routed_attn=delta se_gating=true")
    assert (s.shared, s.k, s.n_blocks, s.n_routed, s.d_thin, s.ff) == (1, 3, 15, 14, 64, 256)
    assert StageSpec.parse(s.to_text()) == s
    for bad in ("3+3of5@64", "0+0of5@64", "1+2of5@48", "1+2of5@64 shared_attn=delta", "1+2of5@64 bogus=1", "12of5"):
        with pytest.raises(ValueError):
            StageSpec.parse(bad)


def test_ffn_dense_oracle():
    rng = np.random.default_rng(0)
    h, w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(4, 6))
    out = ffn_dense(Tensor(h), Tensor(w1), Tensor(w2)).data
    from scipy.special import erf

    for t in range(3):
        z = w1 @ h[t]
        g = 0.5 * z * (1 + erf(z / np.sqrt(2)))
        np.testing.assert_allclose(out[t], w2 @ g, atol=1e-12)


def test_rank1_moe_oracle():
    rng = np.random.default_rng(1)
    moe = Rank1MoE(8, 5, 2, rng, std=1.0, dtype=np.float64)
    h = rng.normal(size=(4, 8))
    out = moe(Tensor(h)).data
    from scipy.special import erf, softmax

    for t in range(4):
        w = softmax(moe.moe_router.data @ h[t])
        top = np.argsort(-w, kind="stable")[:2]
        ref = np.zeros(8)
        for i in top:
            z = moe.moe_in.data[i] @ h[t]
            ref += w[i] * moe.moe_out.data[i] * 0.5 * z * (1 + erf(z / np.sqrt(2)))
        np.testing.assert_allclose(out[t], ref, atol=1e-12)
    with pytest.raises(ValueError):
        ffn_rank1_moe(Tensor(h), moe.moe_router, moe.moe_in, moe.moe_out, 6)


def test_thin_block_zero_cases():
    st = _stage("0+1of1@64")
    x = _x(6)
    tb = st.blocks[0]
    _zero(tb.inner.attn)
    _zero(tb.inner.ffn)
    np.testing.assert_allclose(thin_block(x, tb, np.arange(6), TABLE).data, 0.0, atol=1e-15)
    st = _stage("0+1of1@64")
    st.blocks[0].w_up.data[...] = 0.0
    np.testing.assert_array_equal(thin_block(x, st.blocks[0], np.arange(6), TABLE).data, 0.0)


def test_thin_block_composition_oracle():
    """Literal W_up(Block(W_down x) - W_down x) in plain numpy."""
    st = _stage("0+1of1@64", std=0.1)
    p = st.blocks[0]
    x = _x(6).data
    h = x @ p.w_down.data.T

    def rms(z, g):
        return z / np.sqrt((z * z).mean(-1, keepdims=True) + 1e-6) * g

    a = p.inner.attn
    z = rms(h, p.inner.norm1.data)
    q, k, v = z @ a.w_q.data.T, z @ a.w_k.data.T, z @ a.w_v.data.T
    pos = np.arange(6)
    ang = pos[:, None] / 10000.0 ** (np.arange(0, 64, 2) / 64)[None, :]

    def rope(u):
        out = u.copy()
        out[:, 0::2] = u[:, 0::2] * np.cos(ang) - u[:, 1::2] * np.sin(ang)
        out[:, 1::2] = u[:, 0::2] * np.sin(ang) + u[:, 1::2] * np.cos(ang)
        return out

    q, k = rope(q), rope(k)
    s = q @ k.T / 8.0
    s[np.triu_indices(6, 1)] = -np.inf
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    h1 = h + (w @ v) @ a.w_o.data.T
    from scipy.special import erf

    u = rms(h1, p.inner.norm2.data) @ p.inner.ffn.w1.data.T
    block = h1 + (0.5 * u * (1 + erf(u / np.sqrt(2)))) @ p.inner.ffn.w2.data.T
    ref = (block - h) @ p.w_up.data.T
    np.testing.assert_allclose(thin_block(_x(6), p, np.arange(6), TABLE).data, ref, atol=1e-12)


def test_all_zero_blocks_give_identity():
    st = _stage("1+2of5@64")
    for b in st.blocks:
        b.w_up.data[...] = 0.0
    x = _x(9)
    for mode in ("dense", "sparse", "batched"):
        y, aux, _ = split_stage(x, st, TABLE, mode)
        np.testing.assert_array_equal(y.data, x.data)


def test_single_routed_block_adds_full_delta():
    st = _stage("0+1of1@64")
    x = _x(7)
    y, aux, d = split_stage(x, st, TABLE, "sparse")
    np.testing.assert_allclose(d.gates.data, 1.0)
    np.testing.assert_allclose(y.data, x.data + thin_block(x, st.blocks[0], np.arange(7), TABLE).data, atol=1e-12)
    assert aux.item() == 0.0


def test_composition_by_hand():
    st = _stage("1+2of4@64", std=0.1)
    x = _x(8)
    y, _, d = split_stage(x, st, TABLE, "sparse")
    ref = x.data + thin_block(x, st.blocks[0], np.arange(8), TABLE).data
    for i in range(3):
        idx = d.tokens_for(i)
        out = thin_block(x, st.blocks[1 + i], idx, TABLE).data
        ref[idx] += 0.5 * d.gates.data[idx, i : i + 1] * out
    np.testing.assert_allclose(y.data, ref, atol=1e-12)


@pytest.mark.parametrize(
    "text",
    ["1+2of5@64", "1+3of15@64", "0+3of5@64", "1+2of5@64 routed_attn=delta", "1+2of4@64 se_gating=true",
     "1+2of4@64 ffn=rank1-moe moe_experts=6 moe_k=2", "1+2of4@64 shared_in_average=true renormalize=true"],
)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_dispatch_modes_agree(text, dtype, tol):
    st = _stage(text, dtype=dtype, std=0.1)
    x = _x(40, dtype=dtype)
    with no_grad():
        ys = {m: split_stage(x, st, TABLE, m, chunk=16)[0].data for m in ("dense", "sparse", "batched")}
    assert np.abs(ys["dense"] - ys["sparse"]).max() <= tol
    assert np.abs(ys["batched"] - ys["sparse"]).max() <= tol


def test_modes_agree_in_gradient():
    st = _stage("1+2of4@64 routed_attn=delta", std=0.1)
    x = _x(12)
    w = np.random.default_rng(3).normal(size=(12, 128))
    grads = []
    for mode in ("dense", "sparse", "batched"):
        st.zero_grad()
        y, aux, _ = split_stage(x, st, TABLE, mode, chunk=4)
        (tc.sum(y * w) + aux).backward()
        grads.append(np.concatenate([p.grad.ravel() for p in st.parameters()]))
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-10)
    np.testing.assert_allclose(grads[2], grads[1], atol=1e-10)


def test_unrouted_blocks_stay_finite():
    st = _stage("0+1of6@64")
    st.router.w_router.data[...] = 0.0
    st.router.w_router.data[0] = 10.0
    x = Tensor(np.abs(_x(5).data))
    for mode in ("dense", "sparse", "batched"):
        y, aux, d = split_stage(x, st, TABLE, mode)
        assert np.isfinite(y.data).all() and np.isfinite(aux.item())
        assert d.tokens_for(3).size == 0


def test_dense_stage_gradcheck():
    st = _stage("1+2of3@64 se_gating=true", std=0.1)
    x = Tensor(_x(5).data * 0.5, requires_grad=True)
    # larger query/key maps keep every checked gradient well above the
    # central-difference noise floor
    for p in (st.blocks[2].inner.attn.w_q, st.blocks[2].inner.attn.w_k):
        p.data *= 10.0
    w = np.random.default_rng(5).normal(size=(5, 128))
    params = [x, st.router.w_router, st.blocks[1].w_down, st.blocks[2].inner.attn.w_q, st.se.se_w1]
    err = tc.gradcheck(lambda: tc.sum(split_stage(x, st, TABLE, "dense")[0] * w), params, eps=1e-4)
    assert err < 1e-4


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        split_stage(_x(3), _stage("0+1of2@64"), TABLE, "fast")
