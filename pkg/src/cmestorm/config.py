"""Run configuration: a YAML file with flat sections, plus command-line overrides.

Schema (every key optional)::

    seed: 0
    offline: false
    threshold: 0.6
    probabilistic: false
    paths:
      rc_list: rc_list.html          # ICME list export (file path)
      lasco: [univ_all.txt]          # LASCO catalog text files
      catalog: out/catalog.jsonl
      cache: cache
      dataset: dataset
      output: runs
      weights_dir: null              # pretrained backbone weights (<name>.pt)
    catalog:   {match_tolerance_minutes: 120, partial_halo_width: 120,
                study_start: 1996-01-01, study_end: 2008-12-31}
    window:    {c2_before: 10, c2_after: 240, eit_before: 240, eit_after: 0, mdi_count: 3, ...}  # minutes
    imaging:   {target_shape: [256, 256], gauss_cap: 1000}
    model:     ModelSpec fields (active_backbones, active_instruments, stub_backbones, ...)
    train:     TrainConfig fields (learning_rate, dropout, batch_size, epochs, patience, ...)
    grid:      {dropout: [0.2, 0.3], batch_size: [16, 32]}   # used by ``train --grid``
    split:     {test_fraction: 0.2, val_fraction: 0.1, folds: 5}
    ablation:  {dedupe: false}
    synth:     SynthSpec fields (n_events, separability, frames_per_instrument, ...)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import UsageError
from .imaging import WindowPolicy
from .model import ModelSpec
from .synth import SynthSpec
from .training import TrainConfig

SECTIONS = ("paths", "catalog", "window", "imaging", "model", "train", "grid", "split", "ablation", "synth")
TOP_LEVEL = ("seed", "offline", "threshold", "probabilistic")


def _date(v) -> datetime:
    if isinstance(v, datetime):
        d = v
    else:
        d = datetime.fromisoformat(str(v))
    return d if d.tzinfo else d.replace(tzinfo=timezone.utc)


def _known(section: str, d: Mapping, cls) -> dict:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown keys in {section} section: {sorted(unknown)}")
    return dict(d)


@dataclass
class RunConfig:
    seed: int = 0
    offline: bool = False
    threshold: float | None = None
    probabilistic: bool = False
    paths: dict = field(default_factory=dict)
    catalog: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    imaging: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    source: str | None = None

    # -- loading -------------------------------------------------------------

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any], source: str | None = None) -> "RunConfig":
        unknown = set(d) - set(SECTIONS) - set(TOP_LEVEL)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in TOP_LEVEL if k in d and d[k] is not None}
        for s in SECTIONS:
            val = d.get(s) or {}
            if not isinstance(val, Mapping):
                raise UsageError(f"config section {s!r} must be a mapping")
            kw[s] = dict(val)
        cfg = cls(**kw, source=source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise UsageError(f"config {p} must be a mapping at top level")
        return cls.from_mapping(data, source=str(p))

    def validate(self) -> None:
        # building every typed section surfaces bad values at command start
        self.window_policy()
        self.model_spec()
        self.train_config()
        self.synth_spec()
        if self.threshold is not None and not 0.0 < float(self.threshold) < 1.0:
            raise UsageError(f"threshold must lie in (0, 1), got {self.threshold}")

    def with_overrides(self, seed: int | None = None, offline: bool | None = None,
                       threshold: float | None = None, probabilistic: bool | None = None) -> "RunConfig":
        if seed is not None:
            self.seed = int(seed)
        if offline:
            self.offline = True
        if threshold is not None:
            self.threshold = float(threshold)
        if probabilistic:
            self.probabilistic = True
        self.validate()
        return self

    # -- typed views ---------------------------------------------------------

    def path(self, key: str, default: str | None = None) -> Path | None:
        v = self.paths.get(key, default)
        return None if v is None else Path(v)

    def lasco_paths(self) -> list[Path]:
        v = self.paths.get("lasco") or []
        return [Path(p) for p in ([v] if isinstance(v, str) else v)]

    def match_tolerance(self) -> timedelta:
        return timedelta(minutes=float(self.catalog.get("match_tolerance_minutes", 120)))

    def partial_halo_width(self) -> float:
        return float(self.catalog.get("partial_halo_width", 120))

    def study_interval(self) -> tuple[datetime, datetime]:
        start = _date(self.catalog.get("study_start", "1996-01-01"))
        end = _date(self.catalog.get("study_end", "2008-12-31T23:59:59"))
        if end <= start:
            raise UsageError("study_end must be after study_start")
        return start, end

    def window_policy(self) -> WindowPolicy:
        try:
            return WindowPolicy.from_json(_known("window", self.window, WindowPolicy)) if self.window \
                else WindowPolicy()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad window section: {exc}") from exc

    def target_shape(self) -> tuple[int, int]:
        return tuple(int(s) for s in self.imaging.get("target_shape", (256, 256)))

    def gauss_cap(self) -> float:
        return float(self.imaging.get("gauss_cap", 1000.0))

    def model_spec(self) -> ModelSpec:
        d = _known("model", self.model, ModelSpec)
        d.setdefault("seed", self.seed)
        if self.threshold is not None:
            d["threshold"] = float(self.threshold)
        try:
            return ModelSpec.from_json(d)
        except TypeError as exc:
            raise UsageError(f"bad model section: {exc}") from exc

    def train_config(self) -> TrainConfig:
        d = _known("train", self.train, TrainConfig)
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_json(d)
        except TypeError as exc:
            raise UsageError(f"bad train section: {exc}") from exc

    def synth_spec(self) -> SynthSpec:
        d = _known("synth", self.synth, SynthSpec)
        d.setdefault("seed", self.seed)
        try:
            return SynthSpec.from_json(d)
        except TypeError as exc:
            raise UsageError(f"bad synth section: {exc}") from exc

    def effective_threshold(self) -> float:
        return float(self.threshold) if self.threshold is not None else self.model_spec().threshold

    # -- snapshot ------------------------------------------------------------

    def to_mapping(self) -> dict:
        out = {k: getattr(self, k) for k in TOP_LEVEL}
        for s in SECTIONS:
            out[s] = getattr(self, s)
        return out

    def resolved(self) -> dict:
        """Every effective setting, defaults included; enough to reproduce a run."""
        out = self.to_mapping()
        out["window"] = self.window_policy().to_json()
        out["model"] = self.model_spec().to_json()
        out["train"] = self.train_config().to_json()
        out["synth"] = self.synth_spec().to_json()
        out["threshold"] = self.effective_threshold()
        return json.loads(json.dumps(out, default=str))

    def write_snapshot(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path
