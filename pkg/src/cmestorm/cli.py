"""Command-line interface.

Every command writes into a fresh run directory (``<output>/<command>-<UTC
timestamp>`` unless ``--run-dir`` is given) holding ``config.yaml`` (the
resolved configuration), ``run.log`` and the command's outputs.  An
``INCOMPLETE`` marker is present until the command finishes successfully.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .ablation import AblationSuite, run_suite
from .archive import Archive
from .catalog import EventCatalog, build_catalog, parse_time, summarize
from .config import RunConfig
from .ensemble import EventPrediction, read_predictions, write_predictions
from .errors import CmeStormError, DataError, UsageError
from .evaluation import REFERENCE_TARGETS, evaluate, plot_report
from .imaging import DatasetManifest, archive_queries, build_manifest, read_tensor
from .inference import FeatureCache, predict_events
from .instruments import INSTRUMENTS
from .model import Network
from .synth import generate
from .training import SplitPlan, expand_grid, grid_search, make_folds, make_split, train

logger = logging.getLogger("cmestorm")

METRIC_KEYS = ("mcc", "tss", "bs", "bss")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directory


class RunDir:
    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.marker = root / "INCOMPLETE"
        self.marker.write_text("command did not finish\n")
        self._handler = logging.FileHandler(root / "run.log")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("cmestorm").addHandler(self._handler)

    @classmethod
    def create(cls, cfg: RunConfig, command: str, explicit: str | None) -> "RunDir":
        if explicit:
            return cls(Path(explicit))
        base = cfg.path("output", "runs")
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        root = base / f"{command}-{stamp}"
        k = 1
        while root.exists():
            root = base / f"{command}-{stamp}-{k}"
            k += 1
        return cls(root)

    def complete(self) -> None:
        self.marker.unlink(missing_ok=True)

    def close(self) -> None:
        logging.getLogger("cmestorm").removeHandler(self._handler)
        self._handler.close()

    def __truediv__(self, name: str) -> Path:
        return self.root / name


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    return path


def _require(path: Path | None, what: str, flag: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given: pass {flag} or set it in the config")
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _catalog(args, cfg: RunConfig) -> EventCatalog:
    path = _require(Path(args.catalog) if args.catalog else cfg.path("catalog"), "catalog", "--catalog")
    return EventCatalog.read(path)


def _manifest(args, cfg: RunConfig) -> DatasetManifest:
    path = _require(Path(args.dataset) if args.dataset else cfg.path("dataset"), "dataset", "--dataset")
    return DatasetManifest.read(path)


def _split(args, manifest: DatasetManifest, cfg: RunConfig) -> SplitPlan:
    if getattr(args, "split", None):
        d = json.loads(_require(Path(args.split), "split file", "--split").read_text())
        return SplitPlan(tuple(d["train_ids"]), tuple(d["val_ids"]), tuple(d["test_ids"]), int(d["seed"]),
                         d.get("test_fraction", 0.2), d.get("val_fraction", 0.1))
    return make_split(manifest, seed=cfg.seed, test_fraction=float(cfg.split.get("test_fraction", 0.2)),
                      val_fraction=float(cfg.split.get("val_fraction", 0.1)))


def _archive(cfg: RunConfig) -> Archive:
    return Archive(cache_root=cfg.path("cache"), offline=cfg.offline)


def _load_network(path: str | None, cfg: RunConfig) -> Network:
    weights = _require(Path(path) if path else None, "weights directory", "--weights")
    return Network.load(weights, weights_dir=cfg.paths.get("weights_dir"))


def _metrics(report) -> dict:
    return {k: getattr(report, k) for k in METRIC_KEYS}


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg: RunConfig, run: RunDir) -> int:
    rc_path = _require(Path(args.rc_list) if args.rc_list else cfg.path("rc_list"), "ICME list", "--rc-list")
    lasco = [Path(p) for p in args.lasco] if args.lasco else cfg.lasco_paths()
    if not lasco:
        raise UsageError("no LASCO catalog files given: pass --lasco or set paths.lasco")
    for p in lasco:
        _require(p, "LASCO catalog", "--lasco")
    catalog = build_catalog(rc_path.read_text(errors="replace"), [p.read_text(errors="replace") for p in lasco],
                            cfg.match_tolerance(), cfg.partial_halo_width(), cfg.study_interval())
    out = catalog.write(run / "catalog.jsonl")
    if cfg.path("catalog"):
        catalog.write(cfg.path("catalog"))
    pos, neg = catalog.class_counts()
    print(f"{len(catalog)} events ({pos} geoeffective, {neg} non-geoeffective), "
          f"{len(catalog.exclusions)} exclusions -> {out}")
    if len(catalog):
        table = summarize(catalog)
        _write_json(run / "summary.json", {str(y): {"geoeffective": g, "non_geoeffective": n}
                                           for y, (g, n) in table.items()})
        print("year  geo  non")
        for y, (g, n) in table.items():
            print(f"{y}  {g:3d}  {n:3d}")
    return 0


def cmd_fetch(args, cfg: RunConfig, run: RunDir) -> int:
    catalog = _catalog(args, cfg)
    archive = _archive(cfg)
    policy = cfg.window_policy()
    counts = dict.fromkeys(INSTRUMENTS, 0)
    for event in catalog.labelled():
        for inst in INSTRUMENTS:
            for q in archive_queries(event.onset_time, inst, policy):
                counts[inst] += len(archive.fetch(q))
    _write_json(run / "fetch.json", {"frames": counts, "network_calls": archive.network_calls,
                                     "cache": str(archive.root)})
    print(f"cached frames: {counts} (network calls: {archive.network_calls})")
    return 0


def cmd_build(args, cfg: RunConfig, run: RunDir) -> int:
    catalog = _catalog(args, cfg)
    root = Path(args.dataset) if args.dataset else cfg.path("dataset", "dataset")
    manifest = build_manifest(catalog, _archive(cfg), cfg.window_policy(), root, cfg.target_shape(),
                              cfg.gauss_cap())
    _write_json(run / "build.json", {"dataset": str(manifest.root), "events": len(manifest),
                                     "frames": manifest.totals(), "mean_frames": manifest.mean_counts(),
                                     "exclusions": manifest.exclusions})
    print(f"{len(manifest)} events, frames {manifest.totals()} -> {manifest.root}")
    return 0


def cmd_synth(args, cfg: RunConfig, run: RunDir) -> int:
    root = Path(args.dataset) if args.dataset else cfg.path("dataset", "dataset")
    manifest = generate(cfg.synth_spec(), root)
    _write_json(run / "synth.json", {"dataset": str(root), "events": len(manifest), "frames": manifest.totals()})
    print(f"{len(manifest)} synthetic events -> {root}")
    return 0


def cmd_train(args, cfg: RunConfig, run: RunDir) -> int:
    manifest = _manifest(args, cfg)
    split = _split(args, manifest, cfg)
    _write_json(run / "split.json", split.to_json())
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    cache = FeatureCache()
    if args.grid:
        if not cfg.grid:
            raise UsageError("--grid needs a non-empty grid section in the config")
        gs = grid_search(manifest, spec, cfg.grid, split, tcfg, cache=cache)
        _write_json(run / "grid.json", {"runs": gs.runs, "best": gs.best_config.to_json(),
                                        "threshold": gs.threshold, "n_runs": len(expand_grid(cfg.grid, tcfg))})
        tcfg = gs.best_config
        spec = spec.with_(threshold=gs.threshold)
    result = train(manifest, spec, tcfg, split, cache=cache)
    result.write_history(run / "history.csv")
    result.network.save(run / "weights" / "final")
    best = result.best_network()
    best.save(run / "weights" / "best")
    preds = predict_events(best, manifest, split.val_ids, spec.threshold, cache) if split.val_ids else []
    summary = {"best_epoch": result.best_epoch, "epochs_run": len(result.history),
               "class_weights": {"w_pos": result.weights.w_pos, "w_neg": result.weights.w_neg},
               "train_config": tcfg.to_json(), "model": spec.to_json(), "split_id_hash": split.id_hash()}
    if preds and len({manifest.by_id()[p.event_id].y for p in preds}) > 1:
        rep = evaluate(preds, {e.event_id: e.y for e in manifest}, spec.threshold, {"set": "validation"})
        summary["validation"] = _metrics(rep)
    _write_json(run / "train.json", summary)
    try:
        plot_report_history(run, result.history)
    except Exception as exc:  # plotting is best-effort
        logger.warning("could not plot learning curve: %s", exc)
    print(f"trained {spec.name}: best epoch {result.best_epoch} -> {run / 'weights'}")
    return 0


def plot_report_history(run: RunDir, history: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["epoch"] for h in history], [h["train_loss"] for h in history], label="train")
    ax.plot([h["epoch"] for h in history], [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("WBCE")
    ax.legend()
    fig.savefig(run / "learning_curve.png", dpi=100)
    plt.close(fig)


def _truths(path: Path) -> dict[str, int]:
    """Ground truth from a dataset directory, a catalog JSONL, or a JSON {event_id: label} map."""
    if path.is_dir():
        return {e.event_id: e.y for e in DatasetManifest.read(path)}
    if path.suffix == ".jsonl":
        return {e.event_id: e.label.as_int for e in EventCatalog.read(path).labelled()}
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object mapping event ids to labels")
    return data


def cmd_eval(args, cfg: RunConfig, run: RunDir) -> int:
    threshold = cfg.effective_threshold()
    if args.predictions:
        preds = read_predictions(_require(Path(args.predictions), "predictions", "--predictions"))
        truths = _truths(_require(Path(args.truths) if args.truths else cfg.path("dataset"), "truths", "--truths"))
        meta = {"source": str(args.predictions)}
    else:
        manifest = _manifest(args, cfg)
        split = _split(args, manifest, cfg)
        net = _load_network(args.weights, cfg)
        threshold = float(cfg.threshold) if cfg.threshold is not None else net.spec.threshold
        preds = predict_events(net, manifest, split.test_ids, None if cfg.probabilistic else threshold)
        write_predictions(run / "predictions.jsonl", preds)
        truths = {e.event_id: e.y for e in manifest}
        meta = {"weights": str(args.weights), "split_id_hash": split.id_hash(), "seed": cfg.seed}
    meta["mode"] = "probabilistic" if cfg.probabilistic else "deterministic"
    meta["reference_targets"] = REFERENCE_TARGETS["holdout"]
    report = evaluate(preds, truths, threshold, meta)
    report.write(run / "report.json")
    try:
        plot_report(report, run / "plots")
    except Exception as exc:
        logger.warning("could not plot report: %s", exc)
    print(report.table(), end="")
    return 0


def _event_images(event_dir: Path) -> dict[str, list[Path]]:
    out = {}
    for inst in INSTRUMENTS:
        d = event_dir / inst
        if d.is_dir():
            files = sorted(d.glob("*.f32"))
            if files:
                out[inst] = files
    if not out:
        raise DataError(f"{event_dir}: no <instrument>/*.f32 frames found")
    return out


def cmd_predict(args, cfg: RunConfig, run: RunDir) -> int:
    net = _load_network(args.weights, cfg)
    event_dir = _require(Path(args.event_dir) if args.event_dir else None, "event directory", "--event-dir")
    per_image = {}
    for inst, files in _event_images(event_dir).items():
        if inst not in net.spec.active_instruments:
            logger.info("ignoring %s frames: instrument not active in this model", inst)
            continue
        per_image[inst] = []
        for f in files:
            side = json.loads(f.with_suffix(".json").read_text())
            t = side.get("observation_time")
            per_image[inst].append((parse_time(t) if t else None, net.predict_image(read_tensor(f), inst)))
    if not per_image:
        raise DataError(f"{event_dir}: no frames from the model's active instruments")
    threshold = None if cfg.probabilistic else (float(cfg.threshold) if cfg.threshold is not None
                                                else net.spec.threshold)
    pred = EventPrediction.from_images(event_dir.name, per_image, threshold)
    _write_json(run / "prediction.json", pred.to_json())
    print(json.dumps(pred.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_cv(args, cfg: RunConfig, run: RunDir) -> int:
    manifest = _manifest(args, cfg)
    k = int(cfg.split.get("folds", 5))
    folds = make_folds(manifest, seed=cfg.seed, k=k)
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    threshold = cfg.effective_threshold()
    by_id = manifest.by_id()
    cache = FeatureCache()
    per_fold = []
    for i in range(k):
        train_ids, test_ids = folds.train_test(i)
        inner = make_split([(e, by_id[e].y) for e in train_ids], seed=cfg.seed, test_fraction=0.0,
                           val_fraction=float(cfg.split.get("val_fraction", 0.1)))
        split = SplitPlan(inner.train_ids, inner.val_ids, tuple(test_ids), cfg.seed, 0.2, inner.val_fraction)
        result = train(manifest, spec, tcfg, split, cache=cache)
        result.write_history(run / f"fold-{i + 1}" / "history.csv")
        preds = predict_events(result.network, manifest, split.test_ids,
                               None if cfg.probabilistic else threshold, cache)
        report = evaluate(preds, {e.event_id: e.y for e in manifest}, threshold,
                          {"fold": i + 1, "split_id_hash": split.id_hash(), "seed": cfg.seed})
        report.write(run / f"fold-{i + 1}.json")
        per_fold.append(_metrics(report))
        logger.info("fold %d: MCC %.3f TSS %.3f BS %.3f", i + 1, report.mcc, report.tss, report.bs)
    average = {}
    for key in METRIC_KEYS:
        vals = [m[key] for m in per_fold if m[key] is not None and math.isfinite(m[key])]
        average[key] = sum(vals) / len(vals) if vals else None
    _write_json(run / "average.json", {"folds": per_fold, "mean": average, "k": k,
                                       "reference_targets": REFERENCE_TARGETS["five_fold_mean"]})
    print("fold   MCC    TSS    BS     BSS")
    for i, m in enumerate(per_fold + [average]):
        label = str(i + 1) if i < k else "mean"
        print(f"{label:5s} " + " ".join("  n/a " if m[key] is None else f"{m[key]:6.3f}" for key in METRIC_KEYS))
    return 0


def cmd_ablate(args, cfg: RunConfig, run: RunDir) -> int:
    manifest = _manifest(args, cfg)
    split = _split(args, manifest, cfg)
    base = cfg.model_spec()
    if not base.active_backbones:
        base = base.with_(active_backbones=("RN", "IRN"))
    suite = AblationSuite(base.with_(active_instruments=INSTRUMENTS), split, cfg.train_config(),
                          dedupe=bool(cfg.ablation.get("dedupe", False)), threshold=cfg.threshold)
    run_suite(manifest, suite, run / "ablation")
    failed = [r.name for r in suite.results if not r.ok]
    print(f"{len(suite.results)} configurations, {len(failed)} failed -> {run / 'ablation'}")
    for r in suite.results:
        rep = r.reports.get("deterministic")
        status = f"MCC {rep.mcc:6.3f}  TSS {rep.tss:6.3f}  BS {rep.bs:6.3f}" if rep else f"FAILED {r.error}"
        print(f"  {r.kind:8s} {r.name:28s} {status}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "fetch": cmd_fetch, "build": cmd_build, "synth": cmd_synth, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "cv": cmd_cv, "ablate": cmd_ablate,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copy suppresses defaults so flags given before the subcommand survive
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration", **kw)
    common.add_argument("--seed", type=int, help="global seed (overrides the config)", **kw)
    common.add_argument("--offline", action="store_true", help="never touch the network; cache misses fail", **kw)
    common.add_argument("--probabilistic", action="store_true", help="report probabilities without decisions",
                        **kw)
    common.add_argument("--threshold", type=float, help="decision threshold (default 0.6)", **kw)
    common.add_argument("--run-dir", help="explicit run directory instead of a timestamped one", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    parser = _Parser(prog="cmestorm", description="Geoeffectiveness forecasting from SOHO imagery.",
                     parents=[_common_flags(suppress=False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="parse and join the event catalogs")
    p.add_argument("--rc-list")
    p.add_argument("--lasco", nargs="+")
    p = sub.add_parser("fetch", parents=[common], help="populate the image cache for catalog events")
    p.add_argument("--catalog")
    p = sub.add_parser("build", parents=[common], help="build the preprocessed dataset")
    p.add_argument("--catalog")
    p.add_argument("--dataset")
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset")
    p.add_argument("--split", help="split JSON from a previous run")
    p.add_argument("--grid", action="store_true", help="grid-search the config's grid section first")
    p = sub.add_parser("eval", parents=[common], help="evaluate weights or stored predictions")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--weights")
    p.add_argument("--predictions", help="JSONL of event predictions to score")
    p.add_argument("--truths", help="dataset dir, catalog JSONL or JSON {event_id: label}")
    p = sub.add_parser("predict", parents=[common], help="predict a single event")
    p.add_argument("--weights")
    p.add_argument("--event-dir", help="directory with <instrument>/*.f32 frames")
    p = sub.add_parser("cv", parents=[common], help="stratified k-fold cross-validation")
    p.add_argument("--dataset")
    p = sub.add_parser("ablate", parents=[common], help="backbone variants and instrument cases")
    p.add_argument("--dataset")
    p.add_argument("--split")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = RunConfig.load(args.config).with_overrides(args.seed, args.offline, args.threshold, args.probabilistic)
        run = RunDir.create(cfg, args.command, args.run_dir)
        cfg.write_snapshot(run / "config.yaml")
        logger.info("%s: run directory %s (seed %d)", args.command, run.root, cfg.seed)
        code = COMMANDS[args.command](args, cfg, run)
        if code == 0:
            run.complete()
        return code
    except CmeStormError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
