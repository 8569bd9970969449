import csv
import math

import numpy as np
import pytest

from mol.config import ModelConfig
from mol.model import load_checkpoint
from mol.nn import Module
from mol.tensorcore import Tensor
from mol.train import (
    AdamState,
    TrainConfig,
    WindowSampler,
    adamw_step,
    clip_grads,
    lr_at,
    no_decay,
    split_config_text,
    synthetic_corpus,
    tokenize_bytes,
    train,
)

TINY = ModelConfig.from_text("d_model = 128\nn_layers = 1\nt_max = 64\nstage.0 = 1+2of5@64\n")


def test_tokenize_and_alternating_targets():
    toks = tokenize_bytes(b"abababababab")
    x, y = WindowSampler(toks, 8, seed=0).next()
    assert len(x) == len(y) == 8
    assert np.array_equal(y[:-1], x[1:])
    assert set(zip(x, y)) <= {(97, 98), (98, 97)}


def test_sampler_rejects_tiny_corpus():
    with pytest.raises(ValueError):
        WindowSampler(tokenize_bytes(b"abc"), 8)


def test_sampler_is_seeded():
    toks = tokenize_bytes(synthetic_corpus(5000, seed=3))
    a, b = WindowSampler(toks, 32, seed=7), WindowSampler(toks, 32, seed=7)
    for _ in range(50):
        assert np.array_equal(a.next()[0], b.next()[0])


def test_sampler_epoch_coverage_near_uniform():
    n, w = 1000, 16
    s = WindowSampler(np.arange(n), w, seed=1)
    starts = s.epoch_starts()
    counts = np.zeros(n, dtype=int)
    for st in starts:
        counts[st : st + w] += 1
    covered = counts[starts.min() : starts.max() + w]
    assert covered.max() - covered.min() <= 1
    assert len(set(starts)) == len(starts)


def test_lr_schedule_anchor_points():
    cfg = TrainConfig(steps=5000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1000, cfg) == pytest.approx(3e-4)
    assert lr_at(5000, cfg) == pytest.approx(3e-5)
    assert lr_at(500, cfg) == pytest.approx(1.5e-4)
    mid = lr_at(3000, cfg)
    assert mid == pytest.approx(3e-5 + 0.5 * 2.7e-4)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr_peak, cfg.warmup_steps, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.clip_norm, cfg.aux_alpha, cfg.lr_floor_ratio) == (
        3e-4, 1000, 0.9, 0.95, 0.01, 1.0, 0.05, 0.1)


def test_clip_to_unit_norm():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(3, 4)), rng.normal(size=5)]
    total = math.sqrt(sum((g**2).sum() for g in grads))
    grads = [g * 10.0 / total for g in grads]
    assert clip_grads(grads, 1.0) == pytest.approx(10.0)
    assert math.sqrt(sum((g**2).sum() for g in grads)) == pytest.approx(1.0, abs=1e-6)


def test_hand_computed_adam_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.3, -0.4])  # norm 0.5, below the clip
    cfg = TrainConfig(weight_decay=0.01)
    lr = 0.1
    adamw_step([p], [g.copy()], AdamState.like([p]), lr, cfg)
    m_hat = g
    v_hat = g * g
    expected = np.array([1.0, -2.0]) * (1 - lr * 0.01) - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.data, expected, atol=1e-8)


def test_quadratic_bowl_decreases():
    p = Tensor(np.array([3.0, -4.0, 1.5]), requires_grad=True)
    cfg = TrainConfig(steps=200, warmup_steps=20, lr_peak=0.005, weight_decay=0.0)
    state = AdamState.like([p])
    norms = []
    for step in range(1, 201):
        adamw_step([p], [2 * p.data.copy()], state, lr_at(step, cfg), cfg)
        norms.append(np.linalg.norm(p.data))
    after = np.array(norms[20:])
    assert np.all(np.diff(after) < 0) and after[-1] < norms[0] - 0.5


def test_non_finite_gradient_skips():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = AdamState.like([p])
    assert not adamw_step([p], [np.array([np.nan, 1.0])], state, 0.1, TrainConfig())
    assert np.array_equal(p.data, [1.0, 2.0]) and state.t == 0


def test_weight_decay_exemptions():
    assert no_decay("layers.0.router.w_router")
    assert no_decay("layers.0.se.se_w1")
    assert no_decay("layers.0.blocks.1.inner.ffn.moe_router")
    assert not no_decay("layers.0.blocks.1.w_down")
    assert not no_decay("embed")


def test_split_config_text():
    model_text, train_keys = split_config_text("d_model = 128\ntrain.steps = 20  # short\ntrain.lr_peak = 1e-3\n")
    assert train_keys == {"steps": "20", "lr_peak": "1e-3"}
    tc = TrainConfig().with_overrides(train_keys)
    assert tc.steps == 20 and tc.lr_peak == 1e-3
    assert ModelConfig.from_text(model_text).d_model == 128
    with pytest.raises(ValueError):
        TrainConfig().with_overrides({"nope": "1"})


def _short(**kw):
    base = dict(steps=30, warmup_steps=5, lr_peak=3e-3, log_interval=10, seq_len=32, batch_tokens=64)
    base.update(kw)
    return TrainConfig(**base)


def test_train_writes_log_and_checkpoint(tmp_path):
    corpus = synthetic_corpus(20000, seed=0)
    res = train(TINY, _short(), corpus, out_dir=tmp_path)
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "lr", "ce", "aux", "load_0", "load_1", "load_2", "load_3", "tok_per_s"]
    assert [r[0] for r in rows[1:]] == ["1", "10", "20", "30"]
    loads = np.array([[float(v) for v in r[4:8]] for r in rows[1:]])
    np.testing.assert_allclose(loads.sum(1), 1.0, atol=1e-6)
    assert res.rows[-1]["ce"] < res.rows[0]["ce"]
    back = load_checkpoint(tmp_path / "final.ckpt")
    for (n, a), (_, b) in zip(res.model.named_parameters(), back.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_train_is_deterministic():
    corpus = synthetic_corpus(20000, seed=0)
    a = train(TINY, _short(steps=12), corpus).rows
    b = train(TINY, _short(steps=12), corpus).rows
    for ra, rb in zip(a, b):
        for k in ra:
            if k != "tok_per_s":
                assert ra[k] == pytest.approx(rb[k], abs=1e-6)


def test_checkpoint_failure_keeps_partial_log(tmp_path):
    (tmp_path / "final.ckpt").mkdir()
    with pytest.raises(OSError):
        train(TINY, _short(steps=10, log_interval=5), synthetic_corpus(20000), out_dir=tmp_path)
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 4


def test_synthetic_corpus_is_seeded_text():
    a = synthetic_corpus(3000, seed=4)
    assert a == synthetic_corpus(3000, seed=4) and len(a) == 3000
    assert a != synthetic_corpus(3000, seed=5)
    assert a.decode("ascii").count(" ") > 200
