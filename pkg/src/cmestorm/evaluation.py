"""Forecast verification: confusion counts, MCC, TSS, Brier score and skill, threshold sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .catalog import Label
from .ensemble import EventPrediction, decide
from .errors import UsageError

# Published scores of the full model, carried into reports for comparison only.
REFERENCE_TARGETS = {
    "holdout": {"mcc": 0.807, "tss": 0.714, "bs": 0.094, "bss": 0.493, "threshold": 0.6},
    "no_backbones": {"mcc": 0.365, "tss": 0.380, "bs": 0.239, "bss": 0.225},
    "eit_only": {"mcc": 0.657, "tss": 0.50, "bs": 0.125, "bss": 0.310},
    "five_fold_mean": {"mcc": 0.782, "tss": 0.673, "bs": 0.107, "bss": 0.461},
}


def default_thresholds() -> np.ndarray:
    return np.round(np.arange(1, 20) * 0.05, 2)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _as_int(label) -> int:
    if isinstance(label, Label):
        return label.as_int
    if isinstance(label, str):
        return Label(label).as_int
    return int(bool(label))


def confusion(preds: Iterable[tuple]) -> ConfusionMatrix:
    """Count (true, predicted) pairs; labels may be ``Label``, strings or 0/1."""
    tp = fp = fn = tn = 0
    n = 0
    for truth, pred in preds:
        t, p = _as_int(truth), _as_int(pred)
        n += 1
        if t and p:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    if n == 0:
        raise UsageError("confusion matrix needs at least one prediction")
    return ConfusionMatrix(tp, fp, fn, tn)


def mcc(m: ConfusionMatrix) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    denom = (m.tp + m.fp) * (m.tp + m.fn) * (m.tn + m.fp) * (m.tn + m.fn)
    if denom == 0:
        return 0.0
    return (m.tp * m.tn - m.fp * m.fn) / math.sqrt(denom)


def tss(m: ConfusionMatrix) -> float:
    """Hit rate minus false-alarm rate; a term with an empty class counts as 0."""
    hit = m.tp / (m.tp + m.fn) if (m.tp + m.fn) else 0.0
    far = m.fp / (m.fp + m.tn) if (m.fp + m.tn) else 0.0
    return hit - far


def _arrays(y, p):
    y = np.asarray([_as_int(v) for v in y], dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise UsageError(f"length mismatch: {y.shape[0]} labels vs {p.shape[0]} probabilities")
    if y.size == 0:
        raise UsageError("need at least one forecast")
    return y, p


def brier(y: Sequence, p: Sequence[float]) -> float:
    y, p = _arrays(y, p)
    return float(np.mean(np.square(y - p)))


def brier_skill(y: Sequence, p: Sequence[float]) -> float:
    """Skill relative to always forecasting the evaluated set's base rate."""
    y, p = _arrays(y, p)
    ref = float(np.mean(np.square(y - y.mean())))
    if ref == 0.0:
        raise UsageError("Brier skill score undefined: only one class present")
    return 1.0 - brier(y, p) / ref


@dataclass
class SweepResult:
    thresholds: list[float]
    mcc: list[float]
    tss: list[float]
    best_threshold: float

    def rows(self):
        return list(zip(self.thresholds, self.mcc, self.tss))


def threshold_sweep(y: Sequence, p: Sequence[float], grid: Sequence[float] | None = None) -> SweepResult:
    """MCC/TSS at each threshold; best by MCC, then TSS, then closeness to 0.5."""
    y = np.asarray([_as_int(v) for v in y], dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    if not (y.any() and (~y.astype(bool)).any()):
        raise UsageError("threshold sweep needs both classes present")
    th = default_thresholds() if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(th) <= 0):
        raise UsageError("sweep thresholds must be strictly increasing")
    counts = kernels.sweep_counts(y, p, th)
    mccs, tsss = [], []
    for tp, fp, fn, tn in counts:
        m = ConfusionMatrix(int(tp), int(fp), int(fn), int(tn))
        mccs.append(mcc(m))
        tsss.append(tss(m))
    best = max(range(len(th)), key=lambda i: (round(mccs[i], 12), round(tsss[i], 12), -abs(th[i] - 0.5)))
    return SweepResult([float(t) for t in th], mccs, tsss, float(th[best]))


@dataclass
class EvaluationReport:
    matrix: ConfusionMatrix
    mcc: float
    tss: float
    bs: float
    bss: float | None
    threshold: float
    sweep: list[tuple[float, float, float]]
    n_events: int
    events: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "matrix": self.matrix.to_json(),
            "mcc": self.mcc,
            "tss": self.tss,
            "bs": self.bs,
            "bss": self.bss,
            "threshold": self.threshold,
            "sweep": [{"threshold": t, "mcc": m, "tss": s} for t, m, s in self.sweep],
            "n_events": self.n_events,
            "events": self.events,
            "meta": self.meta,
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        path.with_suffix(".txt").write_text(self.table())
        return path

    def table(self) -> str:
        m = self.matrix
        bss = "n/a" if self.bss is None else f"{self.bss:.3f}"
        lines = [
            f"events     {self.n_events}",
            f"threshold  {self.threshold:.2f}",
            "",
            "              pred +   pred -",
            f"  actual +  {m.tp:7d}  {m.fn:7d}",
            f"  actual -  {m.fp:7d}  {m.tn:7d}",
            "",
            f"MCC  {self.mcc:.3f}",
            f"TSS  {self.tss:.3f}",
            f"BS   {self.bs:.3f}",
            f"BSS  {bss}",
        ]
        if self.sweep:
            lines += ["", "threshold    MCC     TSS"]
            lines += [f"  {t:.2f}     {a:6.3f}  {b:6.3f}" for t, a, b in self.sweep]
        return "\n".join(lines) + "\n"


def evaluate(predictions: Sequence[EventPrediction], truths: Mapping[str, object],
             threshold: float = 0.6, meta: dict | None = None) -> EvaluationReport:
    """Recompute every metric from the stored event probabilities."""
    if not predictions:
        raise UsageError("no predictions to evaluate")
    y, p, rows = [], [], []
    for pred in predictions:
        if pred.event_id not in truths:
            raise UsageError(f"no ground truth for event {pred.event_id}")
        truth = _as_int(truths[pred.event_id])
        y.append(truth)
        p.append(pred.event_probability)
        rows.append({"event_id": pred.event_id, "y": truth, "p": pred.event_probability,
                     "instruments": pred.instruments})
    m = confusion((t, decide(q, threshold).as_int) for t, q in zip(y, p))
    both = 0 < sum(y) < len(y)
    sweep = threshold_sweep(y, p).rows() if both else []
    return EvaluationReport(
        matrix=m,
        mcc=mcc(m),
        tss=tss(m),
        bs=brier(y, p),
        bss=brier_skill(y, p) if both else None,
        threshold=threshold,
        sweep=sweep,
        n_events=len(y),
        events=rows,
        meta=dict(meta or {}),
    )


def plot_report(report: EvaluationReport, directory: str | Path, history: list[dict] | None = None) -> list[Path]:
    """Write sweep, confusion-matrix and (optionally) learning-curve PNGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    if report.sweep:
        t, a, b = zip(*report.sweep)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(t, a, marker="o", label="MCC")
        ax.plot(t, b, marker="s", label="TSS")
        ax.set_xlabel("threshold")
        ax.legend()
        fig.savefig(directory / "sweep.png", dpi=100)
        plt.close(fig)
        out.append(directory / "sweep.png")
    m = report.matrix
    fig, ax = plt.subplots(figsize=(4, 4))
    grid = np.array([[m.tp, m.fn], [m.fp, m.tn]])
    ax.imshow(grid, cmap="Blues")
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, str(v), ha="center", va="center")
    ax.set_xticks([0, 1], ["pred +", "pred -"])
    ax.set_yticks([0, 1], ["actual +", "actual -"])
    fig.savefig(directory / "confusion.png", dpi=100)
    plt.close(fig)
    out.append(directory / "confusion.png")
    if history:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([h["epoch"] for h in history], [h["train_loss"] for h in history], label="train")
        ax.plot([h["epoch"] for h in history], [h["val_loss"] for h in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("WBCE")
        ax.legend()
        fig.savefig(directory / "learning_curve.png", dpi=100)
        plt.close(fig)
        out.append(directory / "learning_curve.png")
    return out
