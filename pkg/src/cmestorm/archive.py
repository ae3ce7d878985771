"""SOHO archive client with an append-only local cache.

Frames are discovered from per-day directory listings on the archive,
downloaded atomically into ``<cache>/<instrument>/<YYYY>/<MM>/<DD>/`` and
recorded in ``<cache>/manifest.jsonl`` with their SHA-256.  Day listings are
cached too, so a fully cached query needs no network at all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Callable
from urllib.parse import urljoin

from filelock import FileLock

from .catalog import format_time, parse_time
from .errors import ChecksumError, FetchError, OfflineCacheMiss, UsageError
from .instruments import check_instrument

logger = logging.getLogger(__name__)

CACHE_ENV = "CMESTORM_CACHE"
MAX_QUERY_SPAN = timedelta(hours=24)

# Preference when one observation time is published in several products.
PRODUCT_PREFERENCE = (".fits", ".fts", ".png", ".gif", ".jpg", ".jpeg")
FITS_SUFFIXES = (".fits", ".fts")


@dataclass(frozen=True)
class InstrumentSource:
    """Where one instrument's daily listings live and how its files are named.

    ``listing_url`` is formatted with ``yyyy``, ``mm``, ``dd``;
    ``name_pattern`` must define ``date`` (YYYYMMDD) and ``time`` (HHMM or
    HHMMSS) named groups.
    """

    listing_url: str
    name_pattern: str


_QUICKLOOK = "https://soho.nascom.nasa.gov/data/REPROCESSING/Completed/{yyyy}/{sub}/{yyyy}{mm}{dd}/"

DEFAULT_SOURCES: dict[str, InstrumentSource] = {
    "C2": InstrumentSource(_QUICKLOOK.replace("{sub}", "c2"),
                           r"(?P<date>\d{8})_(?P<time>\d{4,6})_c2_1024\.(?:jpg|png|gif|fits|fts)$"),
    "EIT": InstrumentSource(_QUICKLOOK.replace("{sub}", "eit195"),
                            r"(?P<date>\d{8})_(?P<time>\d{4,6})_eit195_1024\.(?:jpg|png|gif|fits|fts)$"),
    "MDI": InstrumentSource(_QUICKLOOK.replace("{sub}", "mdimag"),
                            r"(?P<date>\d{8})_(?P<time>\d{4,6})_mdimag_1024\.(?:jpg|png|gif|fits|fts)$"),
}


@dataclass(frozen=True)
class ArchiveQuery:
    instrument: str
    start: datetime
    end: datetime

    def __post_init__(self):
        object.__setattr__(self, "instrument", check_instrument(self.instrument))
        if not self.start < self.end:
            raise UsageError(f"query start {self.start} must precede end {self.end}")
        if self.end - self.start > MAX_QUERY_SPAN:
            raise UsageError(f"query spans {self.end - self.start}, more than {MAX_QUERY_SPAN}")


@dataclass(frozen=True)
class CachedFrame:
    instrument: str
    observation_time: datetime
    local_path: Path
    checksum: str
    source_url: str

    @property
    def product(self) -> str:
        return "fits" if self.local_path.suffix.lower() in FITS_SUFFIXES else "quicklook"

    def verify(self) -> bool:
        return self.local_path.exists() and sha256_file(self.local_path) == self.checksum

    def to_json(self, root: Path) -> dict:
        return {
            "instrument": self.instrument,
            "observation_time": format_time(self.observation_time),
            "path": self.local_path.relative_to(root).as_posix(),
            "sha256": self.checksum,
            "source_url": self.source_url,
        }


@dataclass
class Inventory:
    frames: dict[str, list[CachedFrame]] = field(default_factory=dict)
    dangling: list[str] = field(default_factory=list)
    untracked: list[str] = field(default_factory=list)

    def __len__(self):
        return sum(len(v) for v in self.frames.values())

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in sorted(self.frames.items())}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, "cache"))


def _days(start: datetime, end: datetime):
    d: date = start.date()
    while d <= end.date():
        yield d
        d += timedelta(days=1)


class Archive:
    """Caching HTTP client for SOHO C2 / EIT / MDI files.

    ``session`` is anything with a requests-style ``get(url, timeout=...)``;
    ``sleep`` and ``clock`` are injectable so the retry and rate-limit policy
    is testable without waiting.
    """

    def __init__(
        self,
        cache_root: str | Path | None = None,
        sources: dict[str, InstrumentSource] | None = None,
        session=None,
        offline: bool = False,
        min_interval: float = 1.0,
        retries: int = 3,
        backoff: float = 2.0,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.root = Path(cache_root) if cache_root is not None else default_cache_root()
        self.sources = dict(DEFAULT_SOURCES if sources is None else sources)
        self._session = session
        self.offline = offline
        self.min_interval = min_interval
        self.retries = max(1, int(retries))
        self.backoff = backoff
        self.timeout = timeout
        self._sleep = sleep
        self._clock = clock
        self._last_request: float | None = None
        self.network_calls = 0

    # -- paths ---------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    def _day_dir(self, instrument: str, day: date) -> Path:
        return self.root / instrument / f"{day.year:04d}" / f"{day.month:02d}" / f"{day.day:02d}"

    # -- network -------------------------------------------------------------

    @property
    def session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def _get(self, url: str, allow_missing: bool = False) -> bytes | None:
        if self.offline:
            raise OfflineCacheMiss(f"offline mode: {url} is not cached")
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            if self._last_request is not None:
                wait = self.min_interval - (self._clock() - self._last_request)
                if wait > 0:
                    self._sleep(wait)
            self._last_request = self._clock()
            self.network_calls += 1
            try:
                resp = self.session.get(url, timeout=self.timeout)
                status = getattr(resp, "status_code", 200)
                if status == 404 and allow_missing:
                    return None
                if status >= 400:
                    raise FetchError(f"HTTP {status} for {url}")
                return resp.content
            except Exception as exc:  # network stacks raise many types
                last_exc = exc
                logger.warning("fetch %s failed (attempt %d/%d): %s", url, attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    self._sleep(self.backoff * (2 ** attempt))
        raise FetchError(f"giving up on {url} after {self.retries} attempts: {last_exc}")

    # -- listings ------------------------------------------------------------

    def _listing(self, instrument: str, day: date) -> list[dict]:
        day_dir = self._day_dir(instrument, day)
        cached = day_dir / ".listing.json"
        if cached.exists():
            return json.loads(cached.read_text())
        src = self.sources[instrument]
        url = src.listing_url.format(yyyy=f"{day.year:04d}", mm=f"{day.month:02d}", dd=f"{day.day:02d}")
        body = self._get(url, allow_missing=True)
        entries = [] if body is None else self._parse_listing(body.decode("utf-8", "replace"), url, src)
        day_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(cached, json.dumps(entries, sort_keys=True).encode())
        return entries

    @staticmethod
    def _parse_listing(html: str, base_url: str, src: InstrumentSource) -> list[dict]:
        pattern = re.compile(src.name_pattern)
        out = {}
        for href in re.findall(r'href\s*=\s*["\']([^"\']+)["\']', html, flags=re.I):
            name = href.rsplit("/", 1)[-1]
            m = pattern.search(name)
            if not m:
                continue
            clock = m.group("time").ljust(6, "0")
            t = datetime.strptime(m.group("date") + clock, "%Y%m%d%H%M%S").replace(tzinfo=timezone.utc)
            out[name] = {"name": name, "url": urljoin(base_url, href), "time": format_time(t)}
        return [out[k] for k in sorted(out)]

    # -- manifest ------------------------------------------------------------

    def _records(self) -> dict[str, dict]:
        """Latest manifest record per relative path."""
        recs: dict[str, dict] = {}
        if self.manifest_path.exists():
            for line in self.manifest_path.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    recs[d["path"]] = d
        return recs

    def _append_record(self, frame: CachedFrame) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.manifest_path) + ".lock"):
            with open(self.manifest_path, "a") as fh:
                fh.write(json.dumps(frame.to_json(self.root), sort_keys=True) + "\n")

    def _quarantine(self, path: Path) -> Path:
        qdir = self.root / "quarantine"
        qdir.mkdir(parents=True, exist_ok=True)
        dest = qdir / f"{path.name}.{int(time.time() * 1e6)}"
        shutil.move(str(path), dest)
        logger.error("checksum mismatch; quarantined %s -> %s", path, dest)
        return dest

    # -- public --------------------------------------------------------------

    def fetch(self, query: ArchiveQuery) -> list[CachedFrame]:
        """All frames of ``query.instrument`` observed in [start, end], sorted by time."""
        chosen: dict[str, dict] = {}
        for day in _days(query.start, query.end):
            for entry in self._listing(query.instrument, day):
                t = parse_time(entry["time"])
                if not (query.start <= t <= query.end):
                    continue
                prev = chosen.get(entry["time"])
                if prev is None or _rank(entry["name"]) < _rank(prev["name"]):
                    chosen[entry["time"]] = entry
        records = self._records()
        frames = [self._materialize(query.instrument, e, records) for _, e in sorted(chosen.items())]
        return frames

    def _materialize(self, instrument: str, entry: dict, records: dict[str, dict]) -> CachedFrame:
        t = parse_time(entry["time"])
        path = self._day_dir(instrument, t.date()) / entry["name"]
        rel = path.relative_to(self.root).as_posix()
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            rec = records.get(rel) or self._records().get(rel)
            if path.exists():
                digest = sha256_file(path)
                if rec is not None and rec["sha256"] != digest:
                    self._quarantine(path)
                    raise ChecksumError(f"{rel}: checksum {digest[:12]} != recorded {rec['sha256'][:12]}")
                frame = CachedFrame(instrument, t, path, digest, entry["url"])
                if rec is None:
                    self._append_record(frame)
                return frame
            body = self._get(entry["url"])
            _atomic_write(path, body)
            frame = CachedFrame(instrument, t, path, hashlib.sha256(body).hexdigest(), entry["url"])
            self._append_record(frame)
            return frame

    def cache_manifest(self) -> Inventory:
        """Inventory of verified-on-record frames, grouped by instrument."""
        if not self.root.exists() or not self.root.is_dir():
            raise OSError(f"cache directory {self.root} does not exist")
        inv = Inventory()
        tracked = set()
        for rel, rec in sorted(self._records().items()):
            path = self.root / rel
            if not path.exists():
                inv.dangling.append(rel)
                continue
            tracked.add(rel)
            frame = CachedFrame(rec["instrument"], parse_time(rec["observation_time"]), path,
                                rec["sha256"], rec["source_url"])
            inv.frames.setdefault(frame.instrument, []).append(frame)
        for inst in self.sources:
            base = self.root / inst
            if not base.exists():
                continue
            for p in base.rglob("*"):
                if p.is_file() and not p.name.startswith(".") and not p.name.endswith(".lock"):
                    rel = p.relative_to(self.root).as_posix()
                    if rel not in tracked:
                        inv.untracked.append(rel)
        for frames in inv.frames.values():
            frames.sort(key=lambda f: f.observation_time)
        return inv


def _rank(name: str) -> int:
    suffix = Path(name).suffix.lower()
    return PRODUCT_PREFERENCE.index(suffix) if suffix in PRODUCT_PREFERENCE else len(PRODUCT_PREFERENCE)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
