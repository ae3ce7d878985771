"""Weighted BCE, class weights, stratified splits/folds, the training loop and grid search.

Training is per image: every image carries its event's label, each
instrument pipeline is optimised on its own images, and event-level
aggregation only happens when validating or predicting.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .catalog import Label
from .errors import NumericError, UsageError
from .evaluation import confusion, mcc, threshold_sweep, tss
from .ensemble import decide
from .imaging import DatasetManifest
from .inference import FeatureCache, predict_events
from .model import ModelSpec, Network

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    w_pos: float = 1.0
    w_neg: float = 1.0

    def __post_init__(self):
        if self.w_pos <= 0 or self.w_neg <= 0:
            raise UsageError("class weights must be positive")


def _labels01(labels) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, Label):
            out.append(v.as_int)
        elif isinstance(v, str):
            out.append(Label(v).as_int)
        else:
            out.append(int(v))
    arr = np.asarray(out, dtype=np.int64)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise UsageError("labels must be 0 or 1")
    return arr


def class_weights(labels: Iterable) -> ClassWeights:
    """Balanced weights N / (2 N_c): the rarer class gets the larger weight."""
    y = _labels01(labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UsageError("class weights are undefined when only one class is present")
    n = y.size
    return ClassWeights(w_pos=n / (2.0 * n_pos), w_neg=n / (2.0 * n_neg))


def wbce(y: Sequence, p: Sequence[float], w: ClassWeights = ClassWeights(), eps: float = EPS) -> float:
    """Mean class-weighted binary cross-entropy.

    Each class's weight multiplies that class's own log term; probabilities
    are clamped to [eps, 1 - eps].
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise UsageError(f"length mismatch: {y.size} labels vs {p.size} probabilities")
    if y.size == 0:
        raise UsageError("wbce needs at least one sample")
    pc = np.clip(p, eps, 1.0 - eps)
    terms = w.w_pos * y * np.log(pc) + w.w_neg * (1.0 - y) * np.log(1.0 - pc)
    return float(-np.mean(terms))


def wbce_grad_logit(y: np.ndarray, p: np.ndarray, w: ClassWeights, eps: float = EPS) -> np.ndarray:
    """d wbce / d logit for sigmoid outputs ``p``; zero where the clamp is active."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    g = (-w.w_pos * y * (1.0 - p) + w.w_neg * (1.0 - y) * p) / y.size
    inside = (p >= eps) & (p <= 1.0 - eps)
    return np.where(inside, g, 0.0)


# ---------------------------------------------------------------------------
# splits


def _items(source) -> list[tuple[str, int]]:
    """(event_id, y) pairs from a catalog, manifest or iterable of pairs."""
    out = []
    for item in source:
        if isinstance(item, tuple):
            eid, lab = item
        else:
            eid, lab = item.event_id, item.label
            if lab is None:
                continue
        out.append((str(eid), int(_labels01([lab])[0])))
    ids = [e for e, _ in out]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate event ids in split input")
    return sorted(out)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def id_hash(self) -> str:
        blob = json.dumps([sorted(self.train_ids), sorted(self.val_ids), sorted(self.test_ids)])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        d = asdict(self)
        d["id_hash"] = self.id_hash()
        return d


def make_split(source, seed: int = 0, test_fraction: float = 0.2, val_fraction: float = 0.1) -> SplitPlan:
    """Per-class seeded shuffle; ``test_fraction`` of each class to test, then
    ``val_fraction`` of the remainder to validation."""
    items = _items(source)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    classes = {c: [e for e, y in items if y == c] for c in (1, 0)}
    if not classes[0] or not classes[1]:
        raise UsageError("make_split needs both classes present")
    for c, ids in classes.items():
        if len(ids) < 5:
            logger.warning("class %d has only %d events; split proportions are best-effort", c, len(ids))
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = _round_half_up(test_fraction * len(ids))
        n_val = _round_half_up(val_fraction * (len(ids) - n_test))
        test += ids[:n_test]
        val += ids[n_test:n_test + n_val]
        train += ids[n_test + n_val:]
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), seed,
                     test_fraction, val_fraction)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]
    seed: int

    def __len__(self):
        return len(self.folds)

    def train_test(self, k: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[k])
        train = sorted(e for j, f in enumerate(self.folds) if j != k for e in f)
        return train, test


def make_folds(source, seed: int = 0, k: int = 5) -> FoldPlan:
    """Stratified folds: per-class seeded shuffle, then round-robin assignment.

    The second class continues the round-robin where the first stopped so
    total fold sizes stay balanced too.
    """
    items = _items(source)
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for c in (1, 0):
        ids = [e for e, y in items if y == c]
        if len(ids) < k:
            raise UsageError(f"class {c} has {len(ids)} events, fewer than {k} folds")
        for e in (ids[i] for i in rng.permutation(len(ids))):
            folds[cursor % k].append(e)
            cursor += 1
    return FoldPlan(tuple(tuple(sorted(f)) for f in folds), seed)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    patience: int | None = None
    class_weighting: bool = True
    merge_validation: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    network: Network
    history: list[dict]
    best_epoch: int
    best_snapshot: dict
    weights: ClassWeights
    config: TrainConfig

    def best_network(self) -> Network:
        """The network with the lowest-validation-loss weights restored (in place)."""
        self.network.restore(self.best_snapshot)
        return self.network

    def write_history(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_mcc", "val_tss"])
            for h in self.history:
                writer.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]),
                                 repr(h["val_mcc"]), repr(h["val_tss"])])
        return path


def _samples(manifest: DatasetManifest, ids: Iterable[str], network: Network, cache: FeatureCache):
    """Per instrument: (features (N,8,8,C), labels (N,)) over all frames of ``ids``."""
    by_id = manifest.by_id()
    out = {}
    for inst in network.spec.active_instruments:
        feats, ys = [], []
        for eid in ids:
            entry = by_id[eid]
            for _, rel in entry.frames.get(inst, []):
                feats.append(cache.get(manifest, rel, network.spec, network.adapters))
                ys.append(entry.y)
        if feats:
            out[inst] = (np.stack(feats), np.asarray(ys, dtype=np.float64))
    return out


def _image_paths(manifest: DatasetManifest, ids: Iterable[str], inst: str):
    by_id = manifest.by_id()
    paths, ys = [], []
    for eid in ids:
        entry = by_id[eid]
        for _, rel in entry.frames.get(inst, []):
            paths.append(rel)
            ys.append(entry.y)
    return paths, np.asarray(ys, dtype=np.float64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # batch norm is degenerate on a single sample
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        for k, g in grads.items():
            kernels.adam_step(params[k], g.astype(params[k].dtype, copy=False), self.m[k], self.v[k],
                              c.learning_rate, c.beta1, c.beta2, c.epsilon, self.t)


def _val_metrics(network: Network, manifest: DatasetManifest, val_ids, weights: ClassWeights,
                 cache: FeatureCache, feature_fn=None):
    if not val_ids:
        return float("nan"), float("nan"), float("nan")
    losses, n = 0.0, 0
    samples = _samples(manifest, val_ids, network, cache) if feature_fn is None else feature_fn(val_ids)
    for inst, (x, y) in samples.items():
        p = network.predict_features(x, inst)
        losses += wbce(y, p, weights) * len(y)
        n += len(y)
    preds = predict_events(network, manifest, val_ids, network.spec.threshold, cache if feature_fn is None else None)
    by_id = manifest.by_id()
    if not preds:
        return losses / max(n, 1), float("nan"), float("nan")
    m = confusion((by_id[p.event_id].y, p.decision.as_int) for p in preds)
    return losses / max(n, 1), mcc(m), tss(m)


def train(manifest: DatasetManifest, spec: ModelSpec, config: TrainConfig, split: SplitPlan,
          adapters: list | None = None, cache: FeatureCache | None = None,
          network: Network | None = None) -> TrainResult:
    """Train all instrument pipelines for ``config.epochs`` epochs.

    The lowest-validation-loss weights are kept in ``best_snapshot``; the
    returned ``network`` holds the final-epoch weights.
    """
    by_id = manifest.by_id()
    missing = [e for e in (*split.train_ids, *split.val_ids, *split.test_ids) if e not in by_id]
    if missing:
        raise UsageError(f"split references {len(missing)} events absent from the manifest, e.g. {missing[0]}")
    spec = spec.with_(dropout=config.dropout)
    if network is None:
        network = Network.create(spec, adapters)
    cache = cache if cache is not None else FeatureCache()
    train_ids = list(split.train_ids) + (list(split.val_ids) if config.merge_validation else [])
    val_ids = [] if config.merge_validation else list(split.val_ids)
    labels = [by_id[e].y for e in train_ids]
    weights = class_weights(labels) if config.class_weighting else ClassWeights()
    logger.info("training %s on %d events (val %d), class weights pos=%.3f neg=%.3f",
                spec.name, len(train_ids), len(val_ids), weights.w_pos, weights.w_neg)

    finetune = spec.finetune_backbone and any(hasattr(a, "forward_torch") for a in network.adapters)
    if finetune:
        return _train_finetune(manifest, network, config, train_ids, val_ids, weights)

    data = _samples(manifest, train_ids, network, cache)
    optims = {inst: _Adam(network.heads[inst].params, config) for inst in data}
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best = (math.inf, 0, network.snapshot())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for inst, (x, y) in data.items():
            head = network.heads[inst]
            for b, idx in enumerate(_batches(len(y), config.batch_size, rng)):
                prob, fwd = head.forward(x[idx], train=True, rng=rng)
                loss = wbce(y[idx], prob, weights)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, {inst} batch {b}, "
                                       f"lr={config.learning_rate}")
                grads, _ = head.backward(fwd, wbce_grad_logit(y[idx], prob, weights))
                optims[inst].step(head.params, grads)
                total += loss * len(idx)
                count += len(idx)
        train_loss = total / max(count, 1)
        val_loss, val_mcc, val_tss = _val_metrics(network, manifest, val_ids, weights, cache)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "val_mcc": val_mcc, "val_tss": val_tss})
        logger.debug("epoch %d train %.4f val %.4f mcc %.3f", epoch, train_loss, val_loss, val_mcc)
        score = val_loss if math.isfinite(val_loss) else train_loss
        if score < best[0]:
            best = (score, epoch, network.snapshot())
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info("early stop at epoch %d", epoch)
                break
    return TrainResult(network, history, best[1], best[2], weights, config)


def _train_finetune(manifest, network: Network, config: TrainConfig, train_ids, val_ids,
                    weights: ClassWeights) -> TrainResult:
    """Joint head + top-backbone-stage training through torch autograd."""
    import torch

    torch.manual_seed(config.seed)
    torch_adapters = [a for a in network.adapters if hasattr(a, "forward_torch")]
    tparams = []
    for a in torch_adapters:
        a.set_finetune(True)
        tparams += [p for p in a.top_stage_parameters() if p.requires_grad]
    topt = torch.optim.Adam(tparams, lr=config.learning_rate, betas=(config.beta1, config.beta2),
                            eps=config.epsilon)
    optims = {inst: _Adam(h.params, config) for inst, h in network.heads.items()}
    rng = np.random.default_rng(config.seed)
    history, best = [], (math.inf, 0, network.snapshot())

    def feats_torch(images):
        return torch.cat([a.forward_torch(images) for a in network.adapters], dim=-1)

    def fresh_features(ids):
        out = {}
        for inst in network.spec.active_instruments:
            paths, y = _image_paths(manifest, ids, inst)
            if paths:
                out[inst] = (np.stack([network.features(manifest.load(p)) for p in paths]), y)
        return out

    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for inst in network.spec.active_instruments:
            paths, y = _image_paths(manifest, train_ids, inst)
            if not paths:
                continue
            head = network.heads[inst]
            for b, idx in enumerate(_batches(len(y), config.batch_size, rng)):
                imgs = np.stack([manifest.load(paths[i]) for i in idx])
                ft = feats_torch(imgs)
                prob, fwd = head.forward(ft.detach().numpy(), train=True, rng=rng)
                loss = wbce(y[idx], prob, weights)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, {inst} batch {b}, "
                                       f"lr={config.learning_rate}")
                grads, dx = head.backward(fwd, wbce_grad_logit(y[idx], prob, weights))
                optims[inst].step(head.params, grads)
                topt.zero_grad()
                ft.backward(torch.as_tensor(np.asarray(dx, dtype=np.float32)))
                topt.step()
                total += loss * len(idx)
                count += len(idx)
        val_loss, val_mcc, val_tss = _val_metrics(network, manifest, val_ids, weights, None,
                                                  feature_fn=fresh_features)
        train_loss = total / max(count, 1)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "val_mcc": val_mcc, "val_tss": val_tss})
        score = val_loss if math.isfinite(val_loss) else train_loss
        if score < best[0]:
            best = (score, epoch, network.snapshot())
    for a in torch_adapters:
        a.set_finetune(False)
    return TrainResult(network, history, best[1], best[2], weights, config)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    best_config: TrainConfig
    threshold: float
    best_val_mcc: float
    runs: list[dict] = field(default_factory=list)


def expand_grid(grid: Mapping[str, Sequence] | Sequence[Mapping], base: TrainConfig) -> list[TrainConfig]:
    if isinstance(grid, Mapping):
        keys = sorted(grid)
        combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    else:
        combos = [dict(c) for c in grid]
    if not combos:
        raise UsageError("grid is empty")
    return [replace(base, **c) for c in combos]


def grid_search(manifest: DatasetManifest, spec: ModelSpec, grid, split: SplitPlan,
                base: TrainConfig = TrainConfig(), adapters: list | None = None,
                cache: FeatureCache | None = None) -> GridResult:
    """Exhaustive search scored by validation MCC at the sweep-optimal threshold.

    Ties prefer smaller dropout, then smaller batch size.
    """
    configs = expand_grid(grid, base)
    cache = cache if cache is not None else FeatureCache()
    by_id = manifest.by_id()
    runs = []
    for cfg in configs:
        result = train(manifest, spec, cfg, split, adapters, cache)
        net = result.best_network()
        preds = predict_events(net, manifest, split.val_ids, None, cache)
        y = [by_id[p.event_id].y for p in preds]
        p = [q.event_probability for q in preds]
        if y and 0 < sum(y) < len(y):
            sweep = threshold_sweep(y, p)
            th = sweep.best_threshold
            score = max(sweep.mcc)
        else:
            th = spec.threshold
            score = mcc(confusion((t, decide(q, th).as_int) for t, q in zip(y, p))) if y else float("nan")
        runs.append({"config": cfg.to_json(), "val_mcc": score, "threshold": th, "best_epoch": result.best_epoch})
        logger.info("grid run %s -> val MCC %.3f at %.2f", cfg.to_json(), score, th)
    best = min(range(len(runs)), key=lambda i: (-_finite(runs[i]["val_mcc"]), configs[i].dropout,
                                                configs[i].batch_size, i))
    return GridResult(configs[best], runs[best]["threshold"], runs[best]["val_mcc"], runs)


def _finite(x: float) -> float:
    return x if math.isfinite(x) else -math.inf
