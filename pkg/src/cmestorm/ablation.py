"""Backbone-removal variants and instrument-subset cases, trained and scored under one split."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CmeStormError, UsageError
from .evaluation import REFERENCE_TARGETS, EvaluationReport, evaluate
from .imaging import DatasetManifest
from .inference import FeatureCache, predict_events
from .instruments import INSTRUMENTS
from .model import ModelSpec
from .training import SplitPlan, TrainConfig, train

logger = logging.getLogger(__name__)

MODES = ("deterministic", "probabilistic")


def variant_name(base_name: str, removed: tuple[str, ...]) -> str:
    """Spec name for a variant: the base name plus each removed backbone, e.g. ``model-RN``."""
    return "-".join([base_name, *removed])


def enumerate_variants(base: ModelSpec) -> list[ModelSpec]:
    """Full model, RN removed, IRN removed, both removed (in that order)."""
    if set(base.active_backbones) != {"RN", "IRN"}:
        raise UsageError("variants are derived from a base spec with both RN and IRN active")
    out = []
    for removed in ((), ("RN",), ("IRN",), ("RN", "IRN")):
        kept = tuple(b for b in base.active_backbones if b not in removed)
        out.append(base.with_(active_backbones=kept, name=variant_name(base.name, removed)))
    return out


def enumerate_cases() -> list[tuple[str, ...]]:
    """The seven non-empty instrument subsets, singles first, full set last."""
    return [c for r in (1, 2, 3) for c in itertools.combinations(INSTRUMENTS, r)]


def case_name(case: tuple[str, ...]) -> str:
    return "+".join(case)


@dataclass
class RunOutcome:
    kind: str                  # "variant" or "case"
    name: str
    spec: ModelSpec
    reports: dict[str, EvaluationReport] = field(default_factory=dict)
    error: str | None = None
    alias_of: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationSuite:
    base: ModelSpec
    split: SplitPlan
    config: TrainConfig
    dedupe: bool = False
    threshold: float | None = None
    results: list[RunOutcome] = field(default_factory=list)

    def configurations(self) -> list[tuple[str, str, ModelSpec]]:
        out = [("variant", v.name, v) for v in enumerate_variants(self.base)]
        for case in enumerate_cases():
            out.append(("case", case_name(case), self.base.with_(active_instruments=case,
                                                                 name=f"{self.base.name}[{case_name(case)}]")))
        return out


def _report(network, manifest: DatasetManifest, split: SplitPlan, threshold: float, mode: str,
            cache: FeatureCache, meta: dict) -> EvaluationReport:
    preds = predict_events(network, manifest, split.test_ids,
                           threshold if mode == "deterministic" else None, cache)
    truths = {e.event_id: e.y for e in manifest}
    dropped = len(split.test_ids) - len(preds)
    return evaluate(preds, truths, threshold, {**meta, "mode": mode, "events_without_frames": dropped})


def run_suite(manifest: DatasetManifest, suite: AblationSuite, out_dir: str | Path | None = None,
              cache: FeatureCache | None = None) -> AblationSuite:
    """Train and evaluate every configuration; failures are recorded, not raised.

    With ``dedupe`` the full-instrument case reuses the full-model variant's
    run, giving ten trainings instead of eleven.
    """
    cache = cache if cache is not None else FeatureCache()
    threshold = suite.threshold if suite.threshold is not None else suite.base.threshold
    split_hash = suite.split.id_hash()
    done: dict[tuple, RunOutcome] = {}
    suite.results = []
    for kind, name, spec in suite.configurations():
        key = (spec.active_backbones, spec.active_instruments)
        if suite.dedupe and key in done:
            src = done[key]
            outcome = RunOutcome(kind, name, spec, {}, src.error, alias_of=src.name)
            for mode, rep in src.reports.items():
                outcome.reports[mode] = EvaluationReport(**{**rep.__dict__, "meta": {**rep.meta, "run": name,
                                                                                      "kind": kind,
                                                                                      "alias_of": src.name}})
            suite.results.append(outcome)
            continue
        logger.info("ablation run %s %s", kind, name)
        outcome = RunOutcome(kind, name, spec)
        try:
            result = train(manifest, spec, suite.config, suite.split, cache=cache)
            net = result.network
            meta = {"run": name, "kind": kind, "split_id_hash": split_hash, "seed": spec.seed,
                    "backbones": list(spec.active_backbones), "instruments": list(spec.active_instruments)}
            for mode in MODES:
                outcome.reports[mode] = _report(net, manifest, suite.split, threshold, mode, cache, meta)
        except (CmeStormError, ValueError, ArithmeticError, OSError) as exc:
            logger.error("run %s failed: %s", name, exc)
            outcome.error = f"{type(exc).__name__}: {exc}"
            logger.debug("%s", traceback.format_exc())
        done[key] = outcome
        suite.results.append(outcome)
    if out_dir is not None:
        write_suite(suite, out_dir)
    return suite


def summary_rows(suite: AblationSuite) -> list[dict]:
    rows = []
    for r in suite.results:
        for mode in MODES:
            rep = r.reports.get(mode)
            rows.append({
                "kind": r.kind, "name": r.name, "mode": mode, "status": "ok" if r.ok else "failed",
                "mcc": rep.mcc if rep else None, "tss": rep.tss if rep else None,
                "bs": rep.bs if rep else None, "bss": rep.bss if rep else None,
                "n_events": rep.n_events if rep else None, "split_id_hash": suite.split.id_hash(),
                "alias_of": r.alias_of or "", "error": r.error or "",
            })
    return rows


def ranked(suite: AblationSuite, mode: str = "deterministic", key: str = "mcc") -> list[tuple[str, float]]:
    vals = [(r.name, getattr(r.reports[mode], key)) for r in suite.results if r.ok and mode in r.reports]
    return sorted(vals, key=lambda kv: -kv[1])


def write_suite(suite: AblationSuite, out_dir: str | Path) -> Path:
    """One JSON per (run, mode), a roll-up CSV and a summary with the reference targets."""
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for r in suite.results:
        safe = r.name.replace("+", "_")
        for mode, rep in r.reports.items():
            rep.write(out / "reports" / f"{r.kind}-{safe}-{mode}.json")
        if not r.ok:
            (out / "reports" / f"{r.kind}-{safe}-failed.json").write_text(
                json.dumps({"run": r.name, "kind": r.kind, "error": r.error}, indent=2))
    rows = summary_rows(suite)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "split_id_hash": suite.split.id_hash(),
        "train_config": suite.config.to_json(),
        "base_spec": suite.base.to_json(),
        "ranked_mcc": ranked(suite),
        "ranked_bs": ranked(suite, "probabilistic", "bs")[::-1],
        "reference_targets": REFERENCE_TARGETS,
        "runs": rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return out
