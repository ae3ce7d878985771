"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the pytest summary under
"acceptance criteria".
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from cmestorm.ablation import enumerate_cases, enumerate_variants
from cmestorm.cli import main
from cmestorm.ensemble import aggregate_event, aggregate_instrument, decide
from cmestorm.evaluation import ConfusionMatrix, brier, brier_skill, evaluate, mcc, tss
from cmestorm.gradcheck import check_gradients
from cmestorm.inference import FeatureCache, predict_events
from cmestorm.model import FusionHead, HeadConfig, ModelSpec, Network, StubAdapter
from cmestorm.synth import SynthSpec, generate
from cmestorm.training import ClassWeights, TrainConfig, make_folds, make_split, train, wbce

TABLE_CHAIN = [(8, 8, 64), (8, 8, 128), (8, 8, 256), (16384,), (1024,), (1,)]


def test_criterion_1_metric_oracle(acceptance):
    t0 = time.perf_counter()
    m = ConfusionMatrix(tp=21, fp=2, fn=0, tn=5)
    a, b = mcc(m), tss(m)
    ok = abs(a - 0.807) <= 0.001 and abs(b - 0.714) <= 0.001 and time.perf_counter() - t0 < 1
    acceptance(1, "metric oracle", ok, f"MCC {a:.4f}, TSS {b:.4f}")


def _brute(y, p, w_pos, w_neg, eps=1e-7):
    s = 0.0
    for yi, pi in zip(y, p):
        pi = min(max(pi, eps), 1.0 - eps)
        s += w_pos * math.log(pi) if yi == 1 else w_neg * math.log(1.0 - pi)
    return -s / len(y)


def test_criterion_2_loss_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_w = worst_bce = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y = rng.integers(0, 2, n)
        p = rng.random(n)
        w_pos, w_neg = rng.uniform(0.05, 5.0, 2)
        worst_w = max(worst_w, abs(wbce(y, p, ClassWeights(w_pos, w_neg)) - _brute(y, p, w_pos, w_neg)))
        q = np.clip(p, 1e-7, 1 - 1e-7)
        bce = -np.mean(y * np.log(q) + (1 - y) * np.log(1 - q))
        worst_bce = max(worst_bce, abs(wbce(y, p) - bce))
    elapsed = time.perf_counter() - t0
    ok = worst_w <= 1e-9 and worst_bce <= 1e-12 and elapsed < 10
    acceptance(2, "loss oracle", ok, f"max |wbce - brute| {worst_w:.1e}, max |wbce - bce| {worst_bce:.1e}")


def test_criterion_3_gradient_check(acceptance):
    """Full head, float64, 4-channel stub features of two images, five fixed seeds."""
    t0 = time.perf_counter()
    errs, kinks = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        stub = StubAdapter("STUB", 4, seed=seed)
        x = np.stack([stub.extract(rng.standard_normal((32, 32))) for _ in range(2)]).astype(np.float64)
        head = FusionHead(HeadConfig(in_channels=4, dtype="float64"), seed=seed)
        res = check_gradients(head, x, np.array([1.0, 0.0]), ClassWeights(0.7, 1.9), n_samples=60, seed=seed)
        errs.append(res.rel_err)
        kinks.append(res.crossed_kink)
    errs, kinks = np.concatenate(errs), np.concatenate(kinks)
    rate = float(np.mean(errs < 1e-4))
    smooth = float(np.mean(errs[~kinks] < 1e-4))
    elapsed = time.perf_counter() - t0
    ok = len(errs) >= 200 and rate >= 0.95 and elapsed < 120
    acceptance(3, "gradient check", ok,
               f"{rate:.1%} of {len(errs)} sampled parameters within 1e-4; {kinks.mean():.0%} of samples "
               f"crossed a LeakyReLU kink at step 1e-4, {smooth:.1%} of the rest agree")


def test_criterion_4_shape_suite(acceptance):
    t0 = time.perf_counter()
    base = ModelSpec(stub_backbones=True)
    specs = enumerate_variants(base) + [base.with_(active_instruments=c) for c in enumerate_cases()]
    image = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    bad = []
    for spec in specs:
        net = Network.create(spec)
        for inst, head in net.heads.items():
            trace = []
            head.forward(net.features(image)[None], trace=trace)
            chain = [tuple(s) for name, s in trace if name in ("conv1", "conv2", "conv3", "flatten", "dense1",
                                                                   "dense2")]
            if chain != TABLE_CHAIN:
                bad.append((spec.name, inst, chain))
    elapsed = time.perf_counter() - t0
    acceptance(4, "architecture shape suite", not bad and elapsed < 60,
               f"{len(specs)} configurations, {len(bad)} mismatched, {elapsed:.1f}s")


def test_criterion_5_ensemble_properties(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(10_000):
        per = {inst: list(rng.random(int(rng.integers(1, 13)))) for inst in ("C2", "EIT", "MDI")
               if rng.random() < 0.8}
        if not per:
            per = {"EIT": [float(rng.random())]}
        means = {k: aggregate_instrument(v) for k, v in per.items()}
        p = aggregate_event(means)
        shuffled = {k: aggregate_instrument(list(rng.permutation(v))) for k, v in reversed(list(per.items()))}
        failures += aggregate_event(shuffled) != p
        inst = list(per)[int(rng.integers(len(per)))]
        raised = list(per[inst])
        j = int(rng.integers(len(raised)))
        raised[j] = raised[j] + (1.0 - raised[j]) * float(rng.random())
        failures += aggregate_event({**means, inst: aggregate_instrument(raised)}) < p
        t = float(rng.random())
        failures += decide(t, t).as_int != 1
    elapsed = time.perf_counter() - t0
    acceptance(5, "ensemble properties", failures == 0 and elapsed < 30,
               f"10000 trials, {failures} violations, {elapsed:.1f}s")


def test_criterion_6_split_invariants(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    problems = []
    for trial in range(100):
        n_pos, n_neg = (int(v) for v in rng.integers(5, 150, 2))
        items = [(f"P{i}", 1) for i in range(n_pos)] + [(f"N{i}", 0) for i in range(n_neg)]
        seed = int(rng.integers(0, 2**31))
        plan = make_split(items, seed)
        sets = [set(plan.train_ids), set(plan.val_ids), set(plan.test_ids)]
        if sum(map(len, sets)) != len(items) or set().union(*sets) != {e for e, _ in items}:
            problems.append((trial, "split not a partition"))
        for prefix, n in (("P", n_pos), ("N", n_neg)):
            n_test = sum(e.startswith(prefix) for e in plan.test_ids)
            n_val = sum(e.startswith(prefix) for e in plan.val_ids)
            if abs(n_test - 0.2 * n) > 1 or abs(n_val - 0.1 * (n - n_test)) > 1:
                problems.append((trial, f"split counts {prefix}"))
        folds = make_folds(items, seed)
        flat = [e for f in folds.folds for e in f]
        if len(flat) != len(items) or set(flat) != {e for e, _ in items}:
            problems.append((trial, "folds not a partition"))
        for prefix, n in (("P", n_pos), ("N", n_neg)):
            if any(abs(sum(e.startswith(prefix) for e in f) - n / 5) > 1 for f in folds.folds):
                problems.append((trial, f"fold counts {prefix}"))
        if make_split(items, seed) != plan or make_folds(items, seed) != folds:
            problems.append((trial, "not deterministic"))
    elapsed = time.perf_counter() - t0
    acceptance(6, "split/fold invariants", not problems and elapsed < 30,
               f"100 catalogs, {len(problems)} violations, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def synth40(tmp_path_factory):
    return generate(SynthSpec(n_events=40, separability=1.0, seed=0), tmp_path_factory.mktemp("synth40"))


def _holdout(manifest, spec, split, cache):
    result = train(manifest, spec, TrainConfig(epochs=20, seed=0), split, cache=cache)
    preds = predict_events(result.best_network(), manifest, split.test_ids, 0.6, cache)
    return evaluate(preds, {e.event_id: e.y for e in manifest}, 0.6)


@pytest.mark.slow
def test_criterion_7_end_to_end(acceptance, synth40):
    t0 = time.perf_counter()
    split = make_split(synth40, seed=0)
    cache = FeatureCache()
    full = _holdout(synth40, ModelSpec(stub_backbones=True), split, cache)
    bare = _holdout(synth40, ModelSpec(stub_backbones=True, active_backbones=(), name="model-RN-IRN"), split, cache)
    elapsed = time.perf_counter() - t0
    ok = full.mcc >= 0.8 and full.bs <= 0.15 and bare.mcc <= full.mcc + 0.1 and elapsed < 900
    acceptance(7, "end-to-end desk-scale training", ok,
               f"stub MCC {full.mcc:.3f} BS {full.bs:.3f}; no-backbone MCC {bare.mcc:.3f}; "
               f"{full.n_events} held-out events, {elapsed:.0f}s")


def test_criterion_8_brier_properties(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    dev = 0.0
    for _ in range(200):
        y = rng.integers(0, 2, int(rng.integers(2, 50)))
        y[0], y[1] = 0, 1
        dev = max(dev, brier(y, y.astype(float)), abs(brier_skill(y, y.astype(float)) - 1.0),
                  abs(brier_skill(y, np.full(len(y), y.mean()))))
    dev = max(dev, abs(brier([1, 1, 0], [0.8, 0.6, 0.3]) - 0.29 / 3),
              abs(brier([1, 0], [0.5, 0.5]) - 0.25),
              abs(brier_skill([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) - 0.9))
    elapsed = time.perf_counter() - t0
    acceptance(8, "Brier/BSS properties", dev <= 1e-12 and elapsed < 1, f"max deviation {dev:.1e}")


@pytest.mark.slow
def test_criterion_9_suite_completeness(acceptance, synth40, tmp_path):
    import yaml

    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"stub_backbones": True}, "train": {"epochs": 2}}))
    code = main(["ablate", "--config", str(cfg), "--dataset", str(synth40.root), "--run-dir", str(tmp_path / "run")])
    reports = sorted((tmp_path / "run" / "ablation" / "reports").glob("*.json"))
    metas = [json.loads(p.read_text())["meta"] for p in reports]
    count = {(m["kind"], m["mode"]): 0 for m in metas}
    for m in metas:
        count[(m["kind"], m["mode"])] += 1
    expected = {("case", "deterministic"): 7, ("case", "probabilistic"): 7,
                ("variant", "deterministic"): 4, ("variant", "probabilistic"): 4}
    hashes = {m["split_id_hash"] for m in metas}
    elapsed = time.perf_counter() - t0
    ok = code == 0 and count == expected and len(hashes) == 1 and elapsed < 45 * 60
    acceptance(9, "ablation suite completeness", ok,
               f"{len(reports)} reports {sorted(count.items())}, {len(hashes)} split hash(es), {elapsed:.0f}s")
