"""Frame windows, C2 base differences, normalisation and the dataset manifest.

On-disk layout written by :func:`build_manifest` (and by the synthetic
generator)::

    <dataset>/<event_id>/<instrument>/<index>.f32    raw little-endian float32
    <dataset>/<event_id>/<instrument>/<index>.json   shape, dtype, scaling record
    <dataset>/manifest.jsonl                         one entry per event
    <dataset>/manifest.meta.json                     window policy, stats, exclusions
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .catalog import CmeEvent, EventCatalog, Label, format_time, parse_time
from .errors import DataError, InstrumentMissing, ShapeError
from .instruments import C2, EIT, INSTRUMENTS, MDI, check_instrument

logger = logging.getLogger(__name__)

DEFAULT_TARGET_SHAPE = (256, 256)
DEFAULT_GAUSS_CAP = 1000.0


@dataclass(frozen=True)
class WindowPolicy:
    c2_before: timedelta = timedelta(minutes=10)
    c2_after: timedelta = timedelta(hours=4)
    eit_before: timedelta = timedelta(hours=4)
    eit_after: timedelta = timedelta(0)
    mdi_count: int = 3
    # how far back archive queries look for a C2 base frame / MDI observations
    c2_base_lookback: timedelta = timedelta(hours=2)
    mdi_lookback: timedelta = timedelta(hours=24)

    def __post_init__(self):
        for name in ("c2_before", "c2_after", "eit_before", "eit_after", "c2_base_lookback", "mdi_lookback"):
            if getattr(self, name) < timedelta(0):
                raise ValueError(f"{name} must be non-negative")
        if self.mdi_count < 1:
            raise ValueError("mdi_count must be >= 1")

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.total_seconds() / 60.0 if isinstance(v, timedelta) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "WindowPolicy":
        kw = {}
        for k, v in d.items():
            if k == "mdi_count":
                kw[k] = int(v)
            elif k.endswith("_minutes"):
                kw[k[: -len("_minutes")]] = timedelta(minutes=float(v))
            else:
                kw[k] = timedelta(minutes=float(v))
        return cls(**kw)


def _onset(event) -> datetime:
    return event.onset_time if isinstance(event, CmeEvent) else event


def select_window(event, instrument: str, frames_available: Sequence[datetime],
                  policy: WindowPolicy = WindowPolicy()) -> list[datetime]:
    """Timestamps used for one (event, instrument) pair, in input order.

    C2 uses the closed window [onset - c2_before, onset + c2_after]; EIT the
    closed window [onset - eit_before, onset + eit_after]; MDI the last
    ``mdi_count`` observations strictly before onset.
    """
    instrument = check_instrument(instrument)
    onset = _onset(event)
    times = list(frames_available)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("frames_available must be sorted ascending")
    if instrument == C2:
        lo, hi = onset - policy.c2_before, onset + policy.c2_after
        sel = [t for t in times if lo <= t <= hi]
    elif instrument == EIT:
        lo, hi = onset - policy.eit_before, onset + policy.eit_after
        sel = [t for t in times if lo <= t <= hi]
    else:
        before = [t for t in times if t < onset]
        sel = before[-policy.mdi_count:]
    if not sel:
        logger.info("no %s frames in window for onset %s", instrument, format_time(onset))
    return sel


def choose_base(frames_available: Sequence[datetime], onset: datetime,
                policy: WindowPolicy = WindowPolicy()) -> datetime | None:
    """Latest frame at or before ``onset - c2_before``."""
    cutoff = onset - policy.c2_before
    cands = [t for t in frames_available if t <= cutoff]
    return max(cands) if cands else None


@dataclass
class InstrumentFrameSet:
    event_id: str
    instrument: str
    frames: list[tuple[datetime, np.ndarray]]
    preprocessing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.instrument = check_instrument(self.instrument)
        times = [t for t, _ in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frames must be strictly increasing in time")
        shapes = {f.shape for _, f in self.frames}
        if len(shapes) > 1:
            raise ShapeError(f"mixed frame shapes {shapes}")
        if any(not np.all(np.isfinite(f)) for _, f in self.frames):
            raise ValueError("frames contain non-finite values")
        base = self.preprocessing.get("base_time")
        if base is not None and times and not parse_time(base) < times[0]:
            raise ValueError("base frame must precede the first difference frame")

    def __len__(self):
        return len(self.frames)


def base_difference(frames: Sequence[tuple[datetime, np.ndarray]], base_time: datetime | None,
                    event_id: str = "", record: dict | None = None) -> InstrumentFrameSet:
    """Subtract the base frame from every frame strictly after it.

    ``frames`` must contain the base frame itself.  The base is not emitted.
    """
    if base_time is None:
        raise InstrumentMissing(f"{event_id}: no pre-event C2 base frame")
    lookup = dict(frames)
    if base_time not in lookup:
        raise InstrumentMissing(f"{event_id}: base frame {format_time(base_time)} not supplied")
    base = np.asarray(lookup[base_time], dtype=np.float64)
    out = []
    for t, f in sorted(frames, key=lambda x: x[0]):
        if t <= base_time:
            continue
        f = np.asarray(f, dtype=np.float64)
        if f.shape != base.shape:
            raise ShapeError(f"{event_id}: frame {f.shape} vs base {base.shape}")
        out.append((t, f - base))
    rec = dict(record or {})
    rec["base_time"] = format_time(base_time)
    return InstrumentFrameSet(event_id, C2, out, rec)


def clean(frame: np.ndarray) -> np.ndarray:
    """NaN / inf pixels become 0."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    return np.where(np.isfinite(arr), arr, 0.0)


def resize(frame: np.ndarray, target_shape=DEFAULT_TARGET_SHAPE) -> np.ndarray:
    if frame.shape == tuple(target_shape):
        return frame
    return kernels.resize_bilinear(np.ascontiguousarray(frame, dtype=np.float64), *target_shape)


def normalization_for(instrument: str) -> str:
    return "clip" if check_instrument(instrument) == MDI else "minmax"


def preprocess(frame: np.ndarray, target_shape=DEFAULT_TARGET_SHAPE, normalization: str = "minmax",
               gauss_cap: float = DEFAULT_GAUSS_CAP) -> tuple[np.ndarray, dict]:
    """Clean, resize and scale one frame.

    ``minmax`` maps to [0, 1] per image (constant images become all zeros);
    ``clip`` clips to +/- ``gauss_cap`` and maps to [-1, 1].
    Returns the float32 tensor and the scaling record.
    """
    arr = resize(clean(frame), target_shape)
    if normalization == "minmax":
        lo, hi = float(arr.min()), float(arr.max())
        if hi > lo:
            out = (arr - lo) / (hi - lo)
        else:
            logger.warning("constant image (value %g); normalised to zeros", lo)
            out = np.zeros_like(arr)
        rec = {"method": "minmax", "min": lo, "max": hi}
    elif normalization == "clip":
        out = np.clip(arr, -gauss_cap, gauss_cap) / gauss_cap
        rec = {"method": "clip", "cap": float(gauss_cap)}
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    rec["shape"] = list(target_shape)
    return np.ascontiguousarray(out, dtype=np.float32), rec


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(path: str | Path, arr: np.ndarray, meta: dict | None = None) -> Path:
    path = Path(path).with_suffix(".f32")
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(data.tobytes())
    side = {"shape": list(data.shape), "dtype": "<f4"}
    side.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path).with_suffix(".f32")
    side = json.loads(path.with_suffix(".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=side.get("dtype", "<f4"))
    return arr.reshape(side["shape"]).astype(np.float32)


def load_frame(path: str | Path, instrument: str | None = None, gauss_cap: float = DEFAULT_GAUSS_CAP) -> np.ndarray:
    """Read a FITS file or quick-look image into a float64 2-D array.

    Quick-look MDI images are 8-bit grey maps; they are rescaled so that
    mid-grey is 0 G and full scale is +/- ``gauss_cap``.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".fits", ".fts", ".fit"):
        from astropy.io import fits

        with fits.open(path, memmap=False) as hdul:
            for hdu in hdul:
                if hdu.data is not None and np.ndim(hdu.data) >= 2:
                    data = np.asarray(hdu.data, dtype=np.float64)
                    break
            else:
                raise DataError(f"{path}: no image HDU")
        while data.ndim > 2:
            data = data[0]
        return data
    if suffix == ".f32":
        return read_tensor(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    if instrument is not None and check_instrument(instrument) == MDI:
        data = (data - 128.0) / 127.0 * gauss_cap
    return data


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    event_id: str
    label: Label
    onset_time: datetime
    frames: dict[str, list[tuple[datetime, str]]]

    @property
    def y(self) -> int:
        return self.label.as_int

    @property
    def counts(self) -> dict[str, int]:
        return {i: len(self.frames.get(i, [])) for i in INSTRUMENTS}

    @property
    def missing(self) -> list[str]:
        return [i for i in INSTRUMENTS if not self.frames.get(i)]

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "label": self.label.value,
            "onset_time": format_time(self.onset_time),
            "counts": self.counts,
            "missing": self.missing,
            "frames": {i: [{"time": format_time(t), "path": p} for t, p in self.frames.get(i, [])]
                       for i in INSTRUMENTS},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        frames = {i: [(parse_time(f["time"]), f["path"]) for f in d["frames"].get(i, [])] for i in INSTRUMENTS}
        return cls(d["event_id"], Label(d["label"]), parse_time(d["onset_time"]), frames)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    policy: WindowPolicy = field(default_factory=WindowPolicy)
    stats: dict = field(default_factory=dict)
    exclusions: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        for e in self.entries:
            if not any(e.frames.get(i) for i in INSTRUMENTS):
                raise ValueError(f"manifest entry {e.event_id} has no frames")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.event_id: e for e in self.entries}

    def totals(self) -> dict[str, int]:
        out = dict.fromkeys(INSTRUMENTS, 0)
        for e in self.entries:
            for i, n in e.counts.items():
                out[i] += n
        return out

    def mean_counts(self) -> dict[str, float]:
        n = max(len(self.entries), 1)
        return {i: c / n for i, c in self.totals().items()}

    def load(self, rel_path: str) -> np.ndarray:
        return read_tensor(self.root / rel_path)

    def write(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.jsonl"
        path.write_text("".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries))
        meta = {
            "policy": self.policy.to_json(),
            "stats": self.stats,
            "exclusions": self.exclusions,
            "totals": self.totals(),
            **self.extra,
        }
        (self.root / "manifest.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.jsonl"
        if not path.exists():
            raise DataError(f"no manifest at {path}")
        entries = [ManifestEntry.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        meta_path = root / "manifest.meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        policy = WindowPolicy.from_json(meta.get("policy", {})) if meta.get("policy") else WindowPolicy()
        extra = {k: v for k, v in meta.items() if k not in ("policy", "stats", "exclusions", "totals")}
        return cls(root, entries, policy, meta.get("stats", {}), meta.get("exclusions", []), extra)


class _RunningStats:
    def __init__(self):
        self.n = 0
        self.s = 0.0
        self.ss = 0.0

    def add(self, arr: np.ndarray):
        a = arr.astype(np.float64)
        self.n += a.size
        self.s += float(a.sum())
        self.ss += float(np.square(a).sum())

    def to_json(self):
        if self.n == 0:
            return {"n_pixels": 0}
        mean = self.s / self.n
        return {"n_pixels": self.n, "mean": mean, "std": max(self.ss / self.n - mean * mean, 0.0) ** 0.5}


def archive_queries(onset: datetime, instrument: str, policy: WindowPolicy):
    from .archive import MAX_QUERY_SPAN, ArchiveQuery

    if instrument == C2:
        start, end = onset - policy.c2_before - policy.c2_base_lookback, onset + policy.c2_after
    elif instrument == EIT:
        start, end = onset - policy.eit_before, onset + policy.eit_after
        if start == end:
            end = end + timedelta(seconds=1)
    else:
        start, end = onset - policy.mdi_lookback, onset
    out = []
    while start < end:
        stop = min(end, start + MAX_QUERY_SPAN)
        out.append(ArchiveQuery(instrument, start, stop))
        start = stop
    return out


def build_event(event: CmeEvent, archive, policy: WindowPolicy, dataset_root: Path,
                target_shape=DEFAULT_TARGET_SHAPE, gauss_cap: float = DEFAULT_GAUSS_CAP,
                stats: dict | None = None) -> ManifestEntry:
    """Fetch, window, difference and persist all frames of one event."""
    frames: dict[str, list[tuple[datetime, str]]] = {}
    onset = event.onset_time
    for inst in INSTRUMENTS:
        cached = []
        for q in archive_queries(onset, inst, policy):
            cached.extend(archive.fetch(q))
        cached.sort(key=lambda f: f.observation_time)
        by_time = {f.observation_time: f for f in cached}
        times = sorted(by_time)
        selected = select_window(event, inst, times, policy)
        out_dir = Path(dataset_root) / event.event_id / inst
        written: list[tuple[datetime, str]] = []
        if inst == C2:
            base_t = choose_base(times, onset, policy)
            post = [t for t in selected if base_t is not None and t > base_t]
            if base_t is None or not post:
                logger.info("%s: C2 missing (base=%s, frames=%d)", event.event_id, base_t, len(post))
                frames[inst] = []
                continue
            raw = [(t, resize(clean(load_frame(by_time[t].local_path, inst, gauss_cap)), target_shape))
                   for t in [base_t, *post]]
            fset = base_difference(raw, base_t, event.event_id,
                                   {"target_shape": list(target_shape), "product": by_time[base_t].product})
            items = [(t, f, by_time[t]) for t, f in fset.frames]
            extra = {"base_time": format_time(base_t)}
        else:
            items = [(t, load_frame(by_time[t].local_path, inst, gauss_cap), by_time[t]) for t in selected]
            extra = {}
        for k, (t, arr, src) in enumerate(items):
            tensor, rec = preprocess(arr, target_shape, normalization_for(inst), gauss_cap)
            meta = {"observation_time": format_time(t), "instrument": inst, "scaling": rec,
                    "source": src.local_path.name, "source_sha256": src.checksum, "product": src.product, **extra}
            path = write_tensor(out_dir / f"{k:03d}", tensor, meta)
            if stats is not None:
                stats.setdefault(inst, _RunningStats()).add(tensor)
            written.append((t, path.relative_to(dataset_root).as_posix()))
        frames[inst] = written
    return ManifestEntry(event.event_id, event.label, onset, frames)


def build_manifest(catalog: EventCatalog, archive, policy: WindowPolicy = WindowPolicy(),
                   dataset_root: str | Path = "dataset", target_shape=DEFAULT_TARGET_SHAPE,
                   gauss_cap: float = DEFAULT_GAUSS_CAP, resume: bool = True) -> DatasetManifest:
    """Build the per-event frame dataset for every labelled catalog event.

    Progress is checkpointed to ``manifest.partial.jsonl`` after each event;
    an I/O failure aborts with that checkpoint left in place, and a rerun
    resumes from it.
    """
    root = Path(dataset_root)
    root.mkdir(parents=True, exist_ok=True)
    events = catalog.labelled()
    if not events:
        logger.warning("empty catalog; writing empty manifest")
    partial = root / "manifest.partial.jsonl"
    done: dict[str, dict] = {}
    if resume and partial.exists():
        for line in partial.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                done[d["event_id"]] = d
    stats: dict[str, _RunningStats] = {}
    entries, exclusions = [], []
    for event in events:
        if event.event_id in done:
            d = done[event.event_id]
            if d.get("excluded"):
                exclusions.append(d["excluded"])
                continue
            entry = ManifestEntry.from_json(d)
            for inst, refs in entry.frames.items():
                for _, p in refs:
                    stats.setdefault(inst, _RunningStats()).add(read_tensor(root / p))
        else:
            try:
                entry = build_event(event, archive, policy, root, target_shape, gauss_cap, stats)
            except (OSError, DataError) as exc:
                if isinstance(exc, InstrumentMissing):
                    raise
                raise DataError(f"build aborted at {event.event_id}: {exc}; "
                                f"{len(entries)} events checkpointed in {partial}") from exc
            with open(partial, "a") as fh:
                if not any(entry.frames.values()):
                    rec = {"event_id": event.event_id, "reason": "no_frames"}
                    fh.write(json.dumps({"event_id": event.event_id, "excluded": rec}) + "\n")
                else:
                    fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        if not any(entry.frames.values()):
            exclusions.append({"event_id": event.event_id, "reason": "no_frames"})
            logger.warning("%s excluded: no frames from any instrument", event.event_id)
            continue
        entries.append(entry)
    manifest = DatasetManifest(root, entries, policy, {k: v.to_json() for k, v in sorted(stats.items())},
                               exclusions, {"target_shape": list(target_shape), "gauss_cap": gauss_cap})
    manifest.write()
    partial.unlink(missing_ok=True)
    return manifest
