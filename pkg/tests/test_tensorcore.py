import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import mol.tensorcore as tc
from mol.tensorcore import Tensor


def t64(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def test_matmul_identity_and_hand_case():
    b = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    out = tc.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_is_ones_times_bt():
    rng = np.random.default_rng(1)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)), grad=False)
    tc.sum(a @ b).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert tc.gradcheck(lambda: tc.sum(a @ b), a) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    out = tc.softmax_lastdim(Tensor([1.0, 2.0, 3.0, 4.0])).data
    np.testing.assert_allclose(out, [0.0321, 0.0871, 0.2369, 0.6439], atol=1e-4)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        tc.softmax_lastdim(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 6), elements=st.floats(-30, 30)),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    a = tc.softmax_lastdim(Tensor(x)).data
    b = tc.softmax_lastdim(Tensor(x + c)).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-6)


def _rmsnorm_scalar(x, gamma, eps):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        ms = 0.0
        for v in x[r]:
            ms += v * v
        ms /= x.shape[1]
        for i in range(x.shape[1]):
            out[r, i] = x[r, i] / math.sqrt(ms + eps) * gamma[i]
    return out


def test_rmsnorm_examples():
    d = 8
    ones = Tensor(np.ones(d, dtype=np.float32))
    np.testing.assert_allclose(tc.rmsnorm(Tensor(np.ones((1, d), np.float32)), ones, 1e-6).data, 1.0, atol=1e-5)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, d))
    gamma = rng.normal(size=d)
    a = tc.rmsnorm(Tensor(x), Tensor(gamma), 1e-6).data
    b = tc.rmsnorm(Tensor(10 * x), Tensor(gamma), 1e-6).data
    np.testing.assert_allclose(a, b, atol=1e-3)
    np.testing.assert_allclose(a, _rmsnorm_scalar(x, gamma, 1e-6), atol=1e-6)


def test_rmsnorm_gradcheck():
    rng = np.random.default_rng(3)
    for _ in range(3):
        x = t64(rng.normal(size=(2, 8)))
        g = t64(rng.normal(size=8))
        w = rng.normal(size=(2, 8))
        assert tc.gradcheck(lambda: tc.sum(tc.rmsnorm(x, g, 1e-6) * w), [x, g]) < 1e-5


def _ce_scalar(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(targets)


def test_cross_entropy_examples():
    assert tc.cross_entropy_logits(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(math.log(4), abs=1e-6)
    sat = np.zeros((1, 4))
    sat[0, 2] = 1000.0
    assert tc.cross_entropy_logits(Tensor(sat), [2]).item() == pytest.approx(0.0, abs=1e-6)
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 5))
    targets = [4, 0, 2]
    assert tc.cross_entropy_logits(Tensor(logits), targets).item() == pytest.approx(_ce_scalar(logits, targets), abs=1e-6)
    with pytest.raises(ValueError):
        tc.cross_entropy_logits(Tensor(logits), [0, 5, 1])


def test_backward_simple_rules_and_non_scalar_rejected():
    x = t64([1.0, -2.0, 3.0])
    tc.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x.zero_grad()
    tc.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_backward_accumulates():
    x = t64([1.0, 2.0])
    y = x * 3.0
    loss = tc.sum(y + y)
    loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    loss.backward()
    np.testing.assert_array_equal(x.grad, [12.0, 12.0])


def test_rank_mismatch_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(3))


def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    assert tc.gradcheck(lambda: tc.sum(x * w), x) <= 1e-9


def test_no_grad_records_nothing():
    x = t64([1.0])
    with tc.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: tc.sum(tc.exp(a) * b),
        lambda a, b: tc.sum(tc.sigmoid(a) * b),
        lambda a, b: tc.sum(tc.silu(a) * b),
        lambda a, b: tc.sum(tc.gelu(a) * b),
        lambda a, b: tc.sum(tc.softplus(a) * b),
        lambda a, b: tc.sum(tc.tanh(a) * b),
        lambda a, b: tc.sum(tc.softmax_lastdim(a) * b),
        lambda a, b: tc.sum(tc.l2_normalize(a) * b),
        lambda a, b: tc.sum(tc.cumsum(a, axis=1) * b),
        lambda a, b: tc.sum(tc.take(a, [2, 0, 2], axis=1) * b[:, :3]),
        lambda a, b: tc.sum(tc.index_add(a, [1, 0, 1, 3], 5, axis=1) * tc.concat([b, b[:, :1]], axis=1)),
        lambda a, b: tc.sum(tc.concat([a, b], axis=0) * tc.concat([b, a], axis=0)),
        lambda a, b: tc.sum(tc.stack([a, b], axis=1) * 1.5),
        lambda a, b: tc.sum((a @ tc.swapaxes(b, 0, 1)) * (a @ tc.swapaxes(b, 0, 1))),
        lambda a, b: tc.sum(a / (tc.exp(b) + 1.0)),
        lambda a, b: tc.cross_entropy_logits(a * b, [1, 3, 0]),
    ],
)
def test_primitives_gradcheck(fn):
    rng = np.random.default_rng(6)
    for _ in range(3):
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(3, 4)))
        assert tc.gradcheck(lambda: fn(a, b), [a, b]) < 1e-4


def test_solve_unit_lower_matches_numpy_and_grads():
    rng = np.random.default_rng(7)
    low = t64(np.tril(rng.normal(size=(2, 4, 4)) * 0.3, -1))
    rhs = t64(rng.normal(size=(2, 4, 3)))
    x = tc.solve_unit_lower(low, rhs)
    mat = low.data + np.eye(4)
    np.testing.assert_allclose(mat @ x.data, rhs.data, atol=1e-12)
    w = rng.normal(size=(2, 4, 3))
    assert tc.gradcheck(lambda: tc.sum(tc.solve_unit_lower(low, rhs) * w), [low, rhs]) < 1e-4
