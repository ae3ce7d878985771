from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmestorm.errors import UsageError
from cmestorm.model import ModelSpec
from cmestorm.training import (ClassWeights, TrainConfig, class_weights, expand_grid, grid_search, make_folds,
                               make_split, train, wbce, wbce_grad_logit)

STUB = ModelSpec(stub_backbones=True)


def brute_wbce(y, p, w_pos, w_neg, eps=1e-7):
    total = 0.0
    for yi, pi in zip(y, p):
        pi = min(max(pi, eps), 1 - eps)
        if yi == 1:
            total += w_pos * math.log(pi)
        else:
            total += w_neg * math.log(1 - pi)
    return -total / len(y)


def toy(n_pos, n_neg):
    return [(f"P{i:03d}", 1) for i in range(n_pos)] + [(f"N{i:03d}", 0) for i in range(n_neg)]


# -- loss and weights -------------------------------------------------------

def test_wbce_examples():
    assert wbce([1], [1 - 1e-7]) == pytest.approx(0.0, abs=1e-6)
    assert wbce([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
    w = ClassWeights(0.67, 1.94)
    expected = -(0.67 * math.log(0.9) + 1.94 * math.log(0.8) + 1.94 * math.log(0.6)) / 3
    assert abs(wbce([1, 0, 0], [0.9, 0.2, 0.4], w) - expected) < 1e-9
    assert abs(wbce([1, 0, 0], [0.9, 0.2, 0.4], w) - brute_wbce([1, 0, 0], [0.9, 0.2, 0.4], 0.67, 1.94)) < 1e-9
    with pytest.raises(UsageError):
        wbce([1, 0], [0.5])
    with pytest.raises(UsageError):
        wbce([], [])


def test_wbce_clamps_extremes():
    assert math.isfinite(wbce([1, 0], [0.0, 1.0]))
    assert wbce([1], [0.0]) == pytest.approx(-math.log(1e-7))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0.001, 0.999)), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_wbce_permutation_and_unit_weights(pairs, rnd):
    y = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    bce = -np.mean([a * math.log(b) + (1 - a) * math.log(1 - b) for a, b in pairs])
    assert abs(wbce(y, p) - bce) < 1e-12
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    w = ClassWeights(0.7, 1.9)
    assert wbce([a for a, _ in shuffled], [b for _, b in shuffled], w) == pytest.approx(wbce(y, p, w), rel=1e-12)


def test_wbce_grad_matches_finite_difference():
    y = np.array([1.0, 0.0, 0.0, 1.0])
    z = np.array([0.3, -1.2, 2.0, -0.4])
    w = ClassWeights(0.67, 1.94)
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    g = wbce_grad_logit(y, sig(z), w)
    h = 1e-6
    for i in range(4):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        num = (wbce(y, sig(zp), w) - wbce(y, sig(zm), w)) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-6)


def test_class_weights_examples():
    w = class_weights([1] * 101 + [0] * 35)
    assert w.w_pos == pytest.approx(136 / 202) and round(w.w_pos, 3) == 0.673
    assert w.w_neg == pytest.approx(136 / 70) and round(w.w_neg, 3) == 1.943
    assert class_weights([1, 0] * 50) == ClassWeights(1.0, 1.0)
    assert class_weights([1] * 99 + [0]).w_neg == 50.0
    with pytest.raises(UsageError):
        class_weights([1, 1, 1])
    with pytest.raises(UsageError):
        ClassWeights(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300))
def test_class_weights_balance(n_pos, n_neg):
    w = class_weights([1] * n_pos + [0] * n_neg)
    assert n_pos * w.w_pos + n_neg * w.w_neg == pytest.approx(n_pos + n_neg, rel=1e-12)
    if n_pos < n_neg:
        assert w.w_pos > w.w_neg


# -- splits and folds -------------------------------------------------------

def test_make_split_examples(caplog):
    plan = make_split(toy(10, 10), seed=3)
    assert sum(e.startswith("P") for e in plan.test_ids) == 2
    assert sum(e.startswith("N") for e in plan.test_ids) == 2
    assert len(plan.train_ids) + len(plan.val_ids) == 16
    big = make_split(toy(101, 35), seed=0)
    assert sum(e.startswith("P") for e in big.test_ids) == 20
    assert sum(e.startswith("N") for e in big.test_ids) == 7
    assert make_split(toy(101, 35), seed=0) == big
    assert make_split(toy(101, 35), seed=1).id_hash() != big.id_hash()
    with caplog.at_level("WARNING"):
        make_split(toy(3, 10), seed=0)
    assert "best-effort" in caplog.text
    with pytest.raises(UsageError):
        make_split(toy(5, 0), seed=0)


def test_make_folds_examples():
    plan = make_folds(toy(5, 5), seed=0)
    assert len(plan) == 5
    for f in plan.folds:
        assert sorted(e[0] for e in f) == ["N", "P"]
    big = make_folds(toy(101, 35), seed=0)
    for f in big.folds:
        assert sum(e.startswith("P") for e in f) in (20, 21)
        assert sum(e.startswith("N") for e in f) == 7
    assert sorted(e for f in big.folds for e in f) == sorted(e for e, _ in toy(101, 35))
    train_ids, test_ids = big.train_test(2)
    assert not set(train_ids) & set(test_ids) and len(train_ids) + len(test_ids) == 136
    with pytest.raises(UsageError):
        make_folds(toy(4, 10), seed=0)


def test_split_accepts_manifest(tiny_manifest):
    plan = make_split(tiny_manifest, seed=0)
    ids = {e.event_id for e in tiny_manifest}
    assert set(plan.train_ids) | set(plan.val_ids) | set(plan.test_ids) == ids


# -- training ---------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(epochs=0)
    with pytest.raises(UsageError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(learning_rate=3e-4, patience=4)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_train_loss_decreases(tiny_manifest, tmp_path):
    split = make_split(tiny_manifest, seed=0)
    result = train(tiny_manifest, STUB, TrainConfig(learning_rate=1e-5, epochs=10, batch_size=32), split)
    losses = [h["train_loss"] for h in result.history]
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert 1 <= result.best_epoch <= 10
    path = result.write_history(tmp_path / "history.csv")
    rows = list(csv.DictReader(open(path)))
    assert [int(r["epoch"]) for r in rows] == list(range(1, 11))
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "val_mcc", "val_tss"}


def test_train_deterministic_and_best_snapshot(tiny_manifest):
    split = make_split(tiny_manifest, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    a = train(tiny_manifest, STUB, cfg, split)
    b = train(tiny_manifest, STUB, cfg, split)
    assert a.history[0]["train_loss"] == b.history[0]["train_loss"]
    final = {k: v.copy() for k, v in a.network.heads["C2"].params.items()}
    net = a.best_network()
    if a.best_epoch != 2:
        assert any(not np.array_equal(final[k], v) for k, v in net.heads["C2"].params.items())


def test_train_rejects_unknown_ids(tiny_manifest):
    split = make_split(toy(10, 10), seed=0)
    with pytest.raises(UsageError):
        train(tiny_manifest, STUB, TrainConfig(epochs=1), split)


def test_expand_grid():
    base = TrainConfig(epochs=1)
    configs = expand_grid({"dropout": [0.2, 0.3], "batch_size": [16, 32]}, base)
    assert len(configs) == 4 and {(c.dropout, c.batch_size) for c in configs} == {
        (0.2, 16), (0.2, 32), (0.3, 16), (0.3, 32)}
    with pytest.raises(UsageError):
        expand_grid([], base)


def test_grid_search(tiny_manifest):
    split = make_split(tiny_manifest, seed=0)
    base = TrainConfig(epochs=1, batch_size=16)
    one = grid_search(tiny_manifest, STUB, [{"dropout": 0.3}], split, base)
    assert one.best_config == TrainConfig(epochs=1, batch_size=16, dropout=0.3)
    four = grid_search(tiny_manifest, STUB, {"dropout": [0.2, 0.3], "batch_size": [8, 16]}, split, base)
    assert len(four.runs) == 4
    assert 0.0 < four.threshold < 1.0
    top = max(r["val_mcc"] for r in four.runs)
    assert four.best_val_mcc == top
