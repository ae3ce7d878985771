from __future__ import annotations

import json

import pytest

from cmestorm import ablation
from cmestorm.ablation import AblationSuite, enumerate_cases, enumerate_variants, run_suite
from cmestorm.errors import NumericError, UsageError
from cmestorm.model import ModelSpec
from cmestorm.training import TrainConfig, make_split

SMALL = ModelSpec(stub_backbones=True, conv_channels=(8, 8, 8), dense_units=16)


def test_enumerate_variants():
    vs = enumerate_variants(ModelSpec())
    assert [v.name for v in vs] == ["model", "model-RN", "model-IRN", "model-RN-IRN"]
    assert [v.active_backbones for v in vs] == [("RN", "IRN"), ("IRN",), ("RN",), ()]
    with pytest.raises(UsageError):
        enumerate_variants(ModelSpec(active_backbones=("RN",)))


def test_enumerate_cases():
    cases = enumerate_cases()
    assert cases == [("C2",), ("EIT",), ("MDI",), ("C2", "EIT"), ("C2", "MDI"), ("EIT", "MDI"),
                     ("C2", "EIT", "MDI")]
    assert all(cases)


def _suite(manifest, dedupe=False):
    return AblationSuite(SMALL, make_split(manifest, seed=0), TrainConfig(epochs=1, batch_size=16), dedupe=dedupe)


def test_run_suite_counts_and_outputs(tiny_manifest, tmp_path):
    suite = run_suite(tiny_manifest, _suite(tiny_manifest), tmp_path)
    assert len(suite.results) == 11 and all(r.ok for r in suite.results)
    reports = sorted((tmp_path / "reports").glob("*.json"))
    assert len(reports) == 22
    assert sum(p.name.startswith("case-") for p in reports) == 14
    hashes = {json.loads(p.read_text())["meta"]["split_id_hash"] for p in reports}
    assert hashes == {suite.split.id_hash()}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["ranked_mcc"]) == 11
    assert "no_backbones" in summary["reference_targets"]
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 23


def test_run_suite_dedupe(tiny_manifest, monkeypatch):
    calls = []
    real = ablation.train

    def counting(*a, **kw):
        calls.append(a[1].name)
        return real(*a, **kw)

    monkeypatch.setattr(ablation, "train", counting)
    suite = run_suite(tiny_manifest, _suite(tiny_manifest, dedupe=True))
    assert len(calls) == 10 and len(suite.results) == 11
    full = [r for r in suite.results if r.name == "C2+EIT+MDI"][0]
    assert full.alias_of == "model"
    assert full.reports["deterministic"].mcc == suite.results[0].reports["deterministic"].mcc


def test_run_suite_records_failures(tiny_manifest, monkeypatch, tmp_path):
    real = ablation.train

    def flaky(manifest, spec, *a, **kw):
        if spec.name == "model-IRN":
            raise NumericError("non-finite loss")
        return real(manifest, spec, *a, **kw)

    monkeypatch.setattr(ablation, "train", flaky)
    suite = run_suite(tiny_manifest, _suite(tiny_manifest), tmp_path)
    failed = [r for r in suite.results if not r.ok]
    assert [r.name for r in failed] == ["model-IRN"]
    assert len(suite.results) == 11
    assert (tmp_path / "reports" / "variant-model-IRN-failed.json").exists()
