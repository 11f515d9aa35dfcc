import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmixer import tensor as T
from csmixer.config import tiny_config
from csmixer.data import synth_dataset
from csmixer.model import CSMixer
from csmixer.tensor import Tensor
from csmixer.training import (EmaState, OptimizerState, Recipe, SchedulePlan, accuracy,
                              accuracy_from_logits, adamw_step, clip_grad_norm, cross_entropy,
                              ema_update, lr_at, read_metrics, softmax_posterior, train)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_posterior(Tensor([[2.0, 2.0, 2.0, 2.0]])).data, 0.25)
    np.testing.assert_allclose(softmax_posterior(Tensor([[0.0, 800.0]])).data, [[0.0, 1.0]])
    z = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(softmax_posterior(Tensor(z)).data,
                               softmax_posterior(Tensor(z + 5)).data, rtol=1e-15)


def test_cross_entropy_examples():
    k = 7
    ce = cross_entropy(Tensor(np.zeros((3, k))), [0, 4, 6]).item()
    assert abs(ce - math.log(k)) < 1e-14
    logits = np.array([[1.0, 2.0, 0.5], [0.1, -0.3, 0.7]])
    labels = [1, 2]
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    hand = -(math.log(p[0, 1]) + math.log(p[1, 2])) / 2
    assert abs(cross_entropy(Tensor(logits), labels).item() - hand) < 1e-14
    assert cross_entropy(Tensor([[0.0, 1000.0]]), [1]).item() == 0.0


def test_cross_entropy_soft_targets_and_errors():
    logits = Tensor([[0.2, 0.1]])
    tgt = np.array([[0.25, 0.75]])
    p = softmax_posterior(logits).data
    assert abs(cross_entropy(logits, tgt).item() + np.sum(tgt * np.log(p))) < 1e-14
    with pytest.raises(ValueError):
        cross_entropy(logits, [[0.5, 0.6]])
    with pytest.raises(T.ShapeError):
        cross_entropy(Tensor([0.1, 0.2]), [0])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5))
@settings(max_examples=80, deadline=None)
def test_cross_entropy_non_negative(vals, label):
    label %= len(vals)
    assert cross_entropy(Tensor([vals]), [label]).item() >= 0.0


def test_accuracy_examples():
    logits = np.eye(4)
    assert accuracy_from_logits(logits, [0, 1, 2, 3]) == 100.0
    assert accuracy_from_logits(logits, [1, 2, 3, 0]) == 0.0
    assert accuracy_from_logits(logits, [0, 1, 2, 0]) == 75.0
    assert accuracy_from_logits(np.zeros((1, 3)), [0]) == 100.0  # ties go to the lowest index
    with pytest.raises(ValueError):
        accuracy_from_logits(np.zeros((0, 3)), [])


def test_adamw_zero_grads_no_decay():
    p = {"w.weight": np.array([1.0, -2.0])}
    adamw_step(p, {"w.weight": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p["w.weight"], [1.0, -2.0])


def test_adamw_first_step_is_sign_step():
    p = {"w.weight": np.array([1.0, 1.0, 1.0])}
    g = {"w.weight": np.array([3.0, -0.01, 250.0])}
    adamw_step(p, g, OptimizerState(lr=1e-3, weight_decay=0.0))
    np.testing.assert_allclose(p["w.weight"] - 1.0, -1e-3 * np.sign(g["w.weight"]), rtol=1e-5)


def test_adamw_decoupled_decay_only_on_weights():
    p = {"a.weight": np.array([2.0]), "a.bias": np.array([2.0]), "n.gain": np.array([2.0])}
    st_ = OptimizerState(lr=0.01, weight_decay=0.05)
    adamw_step(p, {k: np.zeros(1) for k in p}, st_)
    assert p["a.weight"][0] == 2.0 * (1 - 0.01 * 0.05)
    assert p["a.bias"][0] == 2.0 and p["n.gain"][0] == 2.0


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(np.hypot(g["a"], g["b"]), 1.0)


def test_lr_schedule_examples():
    plan = SchedulePlan()
    assert lr_at(0, plan) == 1e-6
    assert lr_at(20, plan) == 2e-3
    assert abs(lr_at(289, plan) - 1e-5) < 1e-12
    assert lr_at(290, plan) == 1e-5 and lr_at(299, plan) == 1e-5
    with pytest.raises(ValueError):
        lr_at(300, plan)


def test_lr_schedule_continuity_and_shape():
    plan = SchedulePlan()
    left = lr_at(20 - 1e-9, plan)
    assert abs(left - 2e-3) < 1e-12 and lr_at(20, plan) == 2e-3
    ramp = [lr_at(e, plan) for e in range(21)]
    assert all(a < b for a, b in zip(ramp, ramp[1:]))
    cos = [lr_at(e, plan) for e in range(20, 290)]
    assert all(a >= b for a, b in zip(cos, cos[1:]))
    mid = lr_at(20 + 269 / 2, plan)
    assert abs(mid - (1e-5 + 2e-3) / 2) < 1e-12


def test_schedule_rejects_bad_plans():
    with pytest.raises(ValueError):
        SchedulePlan(total_epochs=10, warmup_epochs=8, cooldown_epochs=5)


def test_ema_examples():
    p = {"w": np.array([2.0])}
    e = EmaState({"w": np.array([0.0])}, 0.5)
    ema_update(e, p)
    assert e.shadow["w"][0] == 1.0
    e = EmaState({"w": np.array([0.0])}, 1.0)
    ema_update(e, p)
    assert e.shadow["w"][0] == 0.0
    e = EmaState({"w": np.array([0.0])}, 0.0)
    ema_update(e, p)
    assert e.shadow["w"][0] == 2.0
    with pytest.raises(T.ShapeError):
        ema_update(EmaState({"w": np.zeros(2)}, 0.5), p)


@pytest.mark.parametrize("gamma", [0.9, 0.99, 0.5])
def test_ema_closed_form(gamma):
    r = np.random.default_rng(0)
    s0 = r.standard_normal(3)
    seq = r.standard_normal((100, 3))
    e = EmaState({"w": s0.copy()}, gamma)
    for t, x in enumerate(seq, 1):
        ema_update(e, {"w": x})
        ref = gamma ** t * s0 + sum((1 - gamma) * gamma ** (t - i) * seq[i - 1]
                                    for i in range(1, t + 1))
        np.testing.assert_allclose(e.shadow["w"], ref, rtol=1e-10, atol=1e-12)


def test_accuracy_on_dataset():
    ds = synth_dataset(8, 4, (32, 32), seed=0)
    model = CSMixer(tiny_config(), 0)
    acc = accuracy(model, ds)
    assert 0.0 <= acc <= 100.0 and (acc * 8 / 100).is_integer()
    with pytest.raises(ValueError):
        accuracy(model, ds.subset(np.arange(0)))


def small_run(tmp_path, seed=0, **kw):
    cfg = tiny_config()
    tr = synth_dataset(96, 4, (32, 32), seed=seed)
    va = synth_dataset(32, 4, (32, 32), seed=seed + 1)
    rng = np.random.default_rng(seed)
    model = CSMixer(cfg, rng)
    recipe = Recipe(epochs=3, batch_size=32, warmup_epochs=1)
    return train(model, tr, va, recipe, rng, tmp_path, **kw)


def test_training_reduces_loss_and_writes_outputs(tmp_path):
    res = small_run(tmp_path)
    losses = [r["train_loss"] for r in res.metrics]
    assert losses[-1] < losses[0]
    for f in ("metrics.csv", "last.ckpt", "best.ckpt", "final.ckpt"):
        assert (tmp_path / f).exists()
    assert read_metrics(tmp_path / "metrics.csv") == res.metrics


def test_training_is_deterministic(tmp_path):
    a = small_run(tmp_path / "a")
    b = small_run(tmp_path / "b")
    assert a.metrics == b.metrics
    for f in ("metrics.csv", "final.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_training_rejects_mismatched_data(tmp_path):
    cfg = tiny_config()
    model = CSMixer(cfg, 0)
    tr = synth_dataset(8, 4, (16, 16), seed=0)
    with pytest.raises(ValueError):
        train(model, tr, tr, Recipe(epochs=1), np.random.default_rng(0))


def test_non_finite_loss_raises(tmp_path):
    from csmixer.training import NumericError
    cfg = tiny_config()
    model = CSMixer(cfg, 0)
    model.params["head.bias"].data[:] = np.nan
    ds = synth_dataset(8, 4, (32, 32), seed=0)
    with pytest.raises(NumericError, match="epoch 0 batch 0"):
        train(model, ds, ds, Recipe(epochs=1, batch_size=8, warmup_epochs=0),
              np.random.default_rng(0))
