"""Synthetic labelled multi-instrument datasets for offline testing.

Frames are generated directly in normalised [0, 1] space: a noisy
background plus a Gaussian blob whose amplitude carries the label with a
strength set by ``separability``.  The on-disk layout and manifest are the
same as those written by :func:`cmestorm.imaging.build_manifest`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np

from .catalog import Label, format_time
from .errors import UsageError
from .imaging import DatasetManifest, ManifestEntry, WindowPolicy, _RunningStats, write_tensor
from .instruments import C2, EIT, INSTRUMENTS, MDI

logger = logging.getLogger(__name__)

DEFAULT_FRAMES = {C2: 4, EIT: 3, MDI: 3}
_START = datetime(2000, 1, 1)
_CADENCE = {C2: timedelta(minutes=24), EIT: timedelta(minutes=12), MDI: timedelta(minutes=96)}


@dataclass(frozen=True)
class SynthSpec:
    """``frames_per_instrument`` values are an int (exact count) or ``[lo, hi]`` (uniform, inclusive)."""

    n_events: int = 40
    class_balance: float = 0.5
    frames_per_instrument: Mapping[str, object] = field(default_factory=lambda: dict(DEFAULT_FRAMES))
    separability: float = 1.0
    seed: int = 0
    image_shape: tuple[int, int] = (64, 64)
    noise: float = 0.05
    blob_sigma: float = 0.15

    def __post_init__(self):
        if self.n_events < 2:
            raise UsageError("n_events must be >= 2")
        if not 0.0 < self.class_balance < 1.0:
            raise UsageError("class_balance must lie in (0, 1)")
        if not 0.0 <= self.separability <= 1.0:
            raise UsageError("separability must lie in [0, 1]")
        for inst, v in self.frames_per_instrument.items():
            if inst not in INSTRUMENTS:
                raise UsageError(f"unknown instrument {inst!r}")
            lo, hi = _range(v)
            if lo < 0 or hi < lo:
                raise UsageError(f"bad frame count {v!r} for {inst}")
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def to_json(self) -> dict:
        d = asdict(self)
        d["frames_per_instrument"] = dict(self.frames_per_instrument)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        kw = {k: v for k, v in d.items() if k in known}
        if "image_shape" in kw:
            kw["image_shape"] = tuple(kw["image_shape"])
        return cls(**kw)


def _range(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _frame(rng: np.random.Generator, shape, amplitude: float, spec: SynthSpec) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy = h * (0.5 + rng.uniform(-0.1, 0.1))
    cx = w * (0.5 + rng.uniform(-0.1, 0.1))
    s2 = 2.0 * (spec.blob_sigma * min(h, w)) ** 2
    blob = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / s2)
    img = 0.3 + blob + spec.noise * rng.standard_normal(shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(spec: SynthSpec, root: str | Path) -> DatasetManifest:
    """Write a synthetic dataset under ``root`` and return its manifest.

    The blob amplitude is ``0.2 + 0.4 * separability * y`` plus a
    label-independent per-event jitter, so separability 0 gives images
    whose distribution does not depend on the label.
    """
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    n_pos = int(round(spec.class_balance * spec.n_events))
    n_pos = min(max(n_pos, 1), spec.n_events - 1)
    labels = np.array([1] * n_pos + [0] * (spec.n_events - n_pos))
    labels = labels[rng.permutation(spec.n_events)]
    entries = []
    stats: dict[str, _RunningStats] = {}
    for k, y in enumerate(labels):
        eid = f"SYN{k:04d}"
        onset = _START + timedelta(days=3 * k, hours=int(rng.integers(0, 24)))
        label = Label.GEOEFFECTIVE if y else Label.NON_GEOEFFECTIVE
        jitter = 0.05 * rng.standard_normal()
        frames: dict[str, list[tuple[datetime, str]]] = {}
        for inst in INSTRUMENTS:
            lo, hi = _range(spec.frames_per_instrument.get(inst, 0))
            n = int(rng.integers(lo, hi + 1))
            refs = []
            for j in range(n):
                if inst == C2:
                    t = onset + (j + 1) * _CADENCE[inst]
                else:
                    t = onset - (n - j) * _CADENCE[inst]
                amp = 0.2 + 0.4 * spec.separability * y + jitter
                img = _frame(rng, spec.image_shape, amp, spec)
                meta = {"observation_time": format_time(t), "instrument": inst, "synthetic": True,
                        "scaling": {"method": "synthetic"}}
                path = write_tensor(root / eid / inst / f"{j:03d}", img, meta)
                stats.setdefault(inst, _RunningStats()).add(img)
                refs.append((t, path.relative_to(root).as_posix()))
            frames[inst] = refs
        if not any(frames.values()):
            logger.warning("%s has no frames; dropped", eid)
            continue
        entries.append(ManifestEntry(eid, label, onset, frames))
    manifest = DatasetManifest(root, entries, WindowPolicy(), {k: v.to_json() for k, v in sorted(stats.items())},
                               [], {"target_shape": list(spec.image_shape), "synthetic": spec.to_json()})
    manifest.write()
    logger.info("synthetic dataset: %d events (%d geoeffective) in %s", len(entries), int(labels.sum()), root)
    return manifest
