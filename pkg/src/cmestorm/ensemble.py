"""Mean-of-images per instrument, mean-of-instruments per event, then threshold."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping

from .catalog import Label, format_time, parse_time
from .errors import InstrumentMissing, UsageError
from .instruments import INSTRUMENTS, check_instrument

DEFAULT_THRESHOLD = 0.6


def _check_prob(p: float, what: str = "probability") -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise UsageError(f"{what} {p} outside [0, 1]")
    return p


def aggregate_instrument(probs: Iterable[float]) -> float:
    """Arithmetic mean of per-image probabilities for one instrument."""
    vals = [_check_prob(p) for p in probs]
    if not vals:
        raise InstrumentMissing("no image probabilities for this instrument")
    return math.fsum(vals) / len(vals)


def aggregate_event(per_instrument: Mapping[str, float | None]) -> float:
    """Mean over the instruments that are present; absent ones are left out."""
    present = [_check_prob(p) for p in per_instrument.values() if p is not None]
    if not present:
        raise InstrumentMissing("no instrument produced a prediction for this event")
    return math.fsum(present) / len(present)


def decide(p: float, threshold: float = DEFAULT_THRESHOLD) -> Label:
    """Geoeffective iff ``p >= threshold``."""
    return Label.GEOEFFECTIVE if p >= threshold else Label.NON_GEOEFFECTIVE


@dataclass
class EventPrediction:
    event_id: str
    per_image: dict[str, list[tuple[datetime | None, float]]]
    per_instrument: dict[str, float] = field(default_factory=dict)
    event_probability: float = float("nan")
    decision: Label | None = None
    threshold_used: float | None = None

    @classmethod
    def from_images(cls, event_id: str, per_image: Mapping[str, list[tuple[datetime | None, float]]],
                    threshold: float | None = DEFAULT_THRESHOLD) -> "EventPrediction":
        """Aggregate image-level outputs; ``threshold=None`` gives a probabilistic prediction."""
        images = {check_instrument(k): list(v) for k, v in per_image.items() if v}
        per_inst = {k: aggregate_instrument(p for _, p in v) for k, v in images.items()}
        prob = aggregate_event(per_inst)
        decision = decide(prob, threshold) if threshold is not None else None
        ordered = {i: images[i] for i in INSTRUMENTS if i in images}
        return cls(event_id, ordered, {i: per_inst[i] for i in ordered}, prob, decision, threshold)

    @property
    def instruments(self) -> list[str]:
        return list(self.per_instrument)

    def to_json(self) -> dict:
        d = {
            "event_id": self.event_id,
            "per_image": {i: [[format_time(t) if t else None, p] for t, p in v] for i, v in self.per_image.items()},
            "per_instrument": self.per_instrument,
            "event_probability": self.event_probability,
            "threshold_used": self.threshold_used,
        }
        if self.decision is not None:
            d["decision"] = self.decision.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EventPrediction":
        per_image = {i: [(parse_time(t) if t else None, float(p)) for t, p in v]
                     for i, v in d.get("per_image", {}).items()}
        return cls(
            event_id=d["event_id"],
            per_image=per_image,
            per_instrument={k: float(v) for k, v in d.get("per_instrument", {}).items()},
            event_probability=float(d["event_probability"]),
            decision=Label(d["decision"]) if d.get("decision") else None,
            threshold_used=d.get("threshold_used"),
        )


def write_predictions(path: str | Path, preds: Iterable[EventPrediction]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(p.to_json(), sort_keys=True) + "\n" for p in preds))
    return path


def read_predictions(path: str | Path) -> list[EventPrediction]:
    return [EventPrediction.from_json(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]
