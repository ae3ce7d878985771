"""ICME list / LASCO catalog ingestion and event labelling.

The ICME list supplies, per Earth-arriving disturbance, the associated CME
time and the minimum Dst.  The LASCO CME catalog supplies the first-appearance
time and apparent angular width used to classify halo events.  Joining the
two yields the labelled event set used by every later stage.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable

from .errors import ParseError, UsageError

logger = logging.getLogger(__name__)

STORM_DST_THRESHOLD = -50.0
DEFAULT_PARTIAL_HALO_WIDTH = 120.0
DEFAULT_MATCH_TOLERANCE = timedelta(minutes=120)
DEFAULT_STUDY_INTERVAL = (
    datetime(1996, 1, 1, tzinfo=timezone.utc),
    datetime(2008, 12, 31, 23, 59, 59, tzinfo=timezone.utc),
)


class HaloClass(str, Enum):
    HALO = "halo"
    PARTIAL_HALO = "partial_halo"
    OTHER = "other"


class Label(str, Enum):
    GEOEFFECTIVE = "geoeffective"
    NON_GEOEFFECTIVE = "non_geoeffective"

    @property
    def as_int(self) -> int:
        return 1 if self is Label.GEOEFFECTIVE else 0


def label_for_dst(dst_min: float | None) -> Label | None:
    """Storm criterion: strictly below -50 nT is geoeffective."""
    if dst_min is None:
        return None
    return Label.GEOEFFECTIVE if dst_min < STORM_DST_THRESHOLD else Label.NON_GEOEFFECTIVE


def classify_width(width: float, partial_threshold: float = DEFAULT_PARTIAL_HALO_WIDTH) -> HaloClass:
    if width >= 360.0:
        return HaloClass.HALO
    if width >= partial_threshold:
        return HaloClass.PARTIAL_HALO
    return HaloClass.OTHER


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_time(text: str) -> datetime:
    t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


@dataclass(frozen=True)
class CmeEvent:
    event_id: str
    onset_time: datetime
    halo_class: HaloClass
    dst_min: float | None
    label: Label | None = None

    def __post_init__(self):
        expected = label_for_dst(self.dst_min)
        if self.label is None and expected is not None:
            object.__setattr__(self, "label", expected)
        elif self.label is not None and self.label != expected:
            raise ValueError(f"{self.event_id}: label {self.label} inconsistent with dst_min={self.dst_min}")

    @property
    def year(self) -> int:
        return self.onset_time.year

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "onset_time": format_time(self.onset_time),
            "halo_class": self.halo_class.value,
            "dst_min": _num(self.dst_min),
            "label": self.label.value if self.label else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CmeEvent":
        return cls(
            event_id=d["event_id"],
            onset_time=parse_time(d["onset_time"]),
            halo_class=HaloClass(d["halo_class"]),
            dst_min=None if d.get("dst_min") is None else float(d["dst_min"]),
            label=Label(d["label"]) if d.get("label") else None,
        )


def _num(x):
    if x is None:
        return None
    return int(x) if float(x).is_integer() else float(x)


@dataclass(frozen=True)
class RcRecord:
    line: int
    onset_time: datetime | None
    dst_min: float | None
    arrival_time: datetime | None = None
    icme_start: datetime | None = None


@dataclass(frozen=True)
class LascoRecord:
    line: int
    onset_time: datetime
    halo_class: HaloClass
    width: float
    cpa: str = ""


@dataclass(frozen=True)
class RowError:
    line: int
    reason: str
    text: str


@dataclass
class ParseResult:
    records: list
    errors: list[RowError] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class Exclusion:
    line: int
    reason: str
    detail: str = ""
    onset_time: datetime | None = None

    def to_json(self) -> dict:
        return {
            "line": self.line,
            "reason": self.reason,
            "detail": self.detail,
            "onset_time": format_time(self.onset_time) if self.onset_time else None,
        }


@dataclass
class EventCatalog:
    events: list[CmeEvent]
    exclusions: list[Exclusion] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.onset_time, e.event_id))
        ids = [e.event_id for e in self.events]
        dupes = [k for k, n in Counter(ids).items() if n > 1]
        if dupes:
            raise ValueError(f"duplicate event ids: {dupes}")

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def labelled(self) -> list[CmeEvent]:
        return [e for e in self.events if e.label is not None]

    def by_id(self) -> dict[str, CmeEvent]:
        return {e.event_id: e for e in self.events}

    def class_counts(self) -> tuple[int, int]:
        pos = sum(1 for e in self.events if e.label is Label.GEOEFFECTIVE)
        neg = sum(1 for e in self.events if e.label is Label.NON_GEOEFFECTIVE)
        return pos, neg

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.events)

    def write(self, path: str | Path) -> Path:
        """Write the canonical catalog plus ``*.exclusions.jsonl`` and ``*.provenance.json`` sidecars."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        sidecar = path.with_name(path.stem + ".exclusions.jsonl")
        sidecar.write_text("".join(json.dumps(x.to_json(), sort_keys=True) + "\n" for x in self.exclusions))
        if self.provenance:
            prov = path.with_name(path.stem + ".provenance.json")
            prov.write_text(json.dumps(self.provenance, indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EventCatalog":
        path = Path(path)
        events = [CmeEvent.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        exclusions = []
        sidecar = path.with_name(path.stem + ".exclusions.jsonl")
        if sidecar.exists():
            for line in sidecar.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    exclusions.append(Exclusion(d["line"], d["reason"], d.get("detail", ""),
                                                parse_time(d["onset_time"]) if d.get("onset_time") else None))
        prov = path.with_name(path.stem + ".provenance.json")
        provenance = json.loads(prov.read_text()) if prov.exists() else {}
        return cls(events, exclusions, provenance)


# ---------------------------------------------------------------------------
# ICME list


class _TableExtractor(HTMLParser):
    def __init__(self):
        super().__init__()
        self.rows: list[tuple[int, list[str]]] = []
        self._row: list[str] | None = None
        self._cell: list[str] | None = None
        self._row_line = 0

    def handle_starttag(self, tag, attrs):
        if tag == "tr":
            self._row = []
            self._row_line = self.getpos()[0]
        elif tag in ("td", "th") and self._row is not None:
            self._cell = []

    def handle_endtag(self, tag):
        if tag in ("td", "th") and self._row is not None and self._cell is not None:
            self._row.append(" ".join("".join(self._cell).split()))
            self._cell = None
        elif tag == "tr" and self._row is not None:
            self.rows.append((self._row_line, self._row))
            self._row = None

    def handle_data(self, data):
        if self._cell is not None:
            self._cell.append(data)


def _split_rows(text: str) -> list[tuple[int, list[str]]]:
    if "<tr" in text.lower():
        parser = _TableExtractor()
        parser.feed(text)
        return parser.rows
    rows = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        sep = "\t" if "\t" in line else ","
        rows.append((i, [c.strip() for c in line.split(sep)]))
    return rows


_RC_COLUMNS = {
    "arrival": lambda h: "disturbance" in h or "arrival" in h,
    "icme_start": lambda h: "icme" in h and "start" in h,
    "onset": lambda h: "lasco" in h or ("cme" in h and "icme" not in h),
    "dst": lambda h: "dst" in h,
}

_NULL_TOKENS = {"", "...", "..", "-", "--", "n/a", "na", "none", "nan"}
_FULL_TS = re.compile(r"(\d{4})[/-](\d{1,2})[/-](\d{1,2})[ T]+(\d{2}):?(\d{2})(?::?(\d{2}))?")
_SHORT_TS = re.compile(r"^(\d{1,2})/(\d{1,2})\s+(\d{2}):?(\d{2})")
_NUMBER = re.compile(r"^[+-]?\d+(?:\.\d+)?$")


class _AmbiguousTime(ValueError):
    pass


def _parse_rc_time(cell: str, reference: datetime | None) -> datetime | None:
    text = cell.strip()
    if text.lower() in _NULL_TOKENS:
        return None
    m = _FULL_TS.search(text)
    if m:
        y, mo, d, hh, mm, ss = m.groups()
        try:
            return datetime(int(y), int(mo), int(d), int(hh), int(mm), int(ss or 0), tzinfo=timezone.utc)
        except ValueError as exc:
            raise _AmbiguousTime(f"invalid timestamp {text!r}") from exc
    m = _SHORT_TS.match(text)
    if m:
        if reference is None:
            raise _AmbiguousTime(f"timestamp {text!r} has no year and no reference date")
        mo, d, hh, mm = (int(g) for g in m.groups())
        try:
            t = datetime(reference.year, mo, d, hh, mm, tzinfo=timezone.utc)
        except ValueError as exc:
            raise _AmbiguousTime(f"invalid timestamp {text!r}") from exc
        # CME precedes its arrival; a date after the arrival belongs to the previous year.
        if t > reference + timedelta(days=1):
            t = t.replace(year=reference.year - 1)
        return t
    raise _AmbiguousTime(f"unrecognised timestamp {text!r}")


def _parse_dst(cell: str) -> float | None:
    text = cell.strip().replace("−", "-").replace("–", "-")
    if text.lower() in _NULL_TOKENS:
        return None
    token = text.split()[0]
    if not _NUMBER.match(token):
        raise ValueError(f"unparseable Dst value {cell!r}")
    return float(token)


def parse_rc_list(raw_table: str) -> ParseResult:
    """Parse an ICME list export (HTML table, TSV or CSV) into records.

    Rows whose Dst cell is empty keep ``dst_min=None``; rows with malformed
    cells go to ``errors`` rather than being dropped silently.
    """
    if not isinstance(raw_table, str) or "\x00" in raw_table:
        raise ParseError("document is not readable text", line=1)
    rows = _split_rows(raw_table)
    header_idx = None
    cols: dict[str, int] = {}
    for idx, (_, cells) in enumerate(rows):
        lowered = [c.lower() for c in cells]
        found = {}
        for key, match in _RC_COLUMNS.items():
            for j, h in enumerate(lowered):
                if match(h) and j not in found.values():
                    found[key] = j
                    break
        if "dst" in found and "onset" in found:
            header_idx, cols = idx, found
            break
    if header_idx is None:
        raise ParseError("no header row with CME-time and Dst columns", line=rows[0][0] if rows else 1)

    records, errors = [], []
    for line, cells in rows[header_idx + 1:]:
        if not any(c.strip() for c in cells):
            continue
        joined = "\t".join(cells)
        if len(cells) <= max(cols.values()):
            errors.append(RowError(line, "short_row", joined))
            continue
        try:
            arrival = _parse_rc_time(cells[cols["arrival"]], None) if "arrival" in cols else None
            icme = _parse_rc_time(cells[cols["icme_start"]], arrival) if "icme_start" in cols else None
            onset = _parse_rc_time(cells[cols["onset"]], arrival or icme)
        except _AmbiguousTime as exc:
            errors.append(RowError(line, "ambiguous_timestamp", f"{exc}: {joined}"))
            continue
        try:
            dst = _parse_dst(cells[cols["dst"]])
        except ValueError as exc:
            errors.append(RowError(line, "bad_dst", f"{exc}: {joined}"))
            continue
        records.append(RcRecord(line=line, onset_time=onset, dst_min=dst, arrival_time=arrival, icme_start=icme))
    for err in errors:
        logger.warning("ICME list line %d: %s", err.line, err.reason)
    return ParseResult(records, errors)


# ---------------------------------------------------------------------------
# LASCO catalog

_LASCO_ROW = re.compile(r"^\s*(\d{4}/\d{2}/\d{2})\s+(\d{2}:\d{2}(?::\d{2})?)\s+(\S+)\s+(\S+)")
_WIDTH = re.compile(r"^[<>~]?(\d+(?:\.\d+)?)[*?hH]?$")


def parse_lasco_catalog(raw_table: str, partial_halo_width: float = DEFAULT_PARTIAL_HALO_WIDTH) -> ParseResult:
    """Parse LASCO CME catalog text rows: ``date time CPA width ...``.

    Header and comment lines (anything not starting with a date) are skipped.
    """
    if not isinstance(raw_table, str) or "\x00" in raw_table:
        raise ParseError("document is not readable text", line=1)
    records, errors = [], []
    for line_no, line in enumerate(raw_table.splitlines(), start=1):
        if not re.match(r"^\s*\d{4}/\d{2}/\d{2}", line):
            continue
        m = _LASCO_ROW.match(line)
        if not m:
            errors.append(RowError(line_no, "malformed_row", line))
            continue
        date, clock, cpa, width_tok = m.groups()
        fmt = "%Y/%m/%d %H:%M:%S" if clock.count(":") == 2 else "%Y/%m/%d %H:%M"
        try:
            onset = datetime.strptime(f"{date} {clock}", fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            errors.append(RowError(line_no, "bad_timestamp", line))
            continue
        wm = _WIDTH.match(width_tok)
        if not wm:
            errors.append(RowError(line_no, "unknown_width", line))
            continue
        width = float(wm.group(1))
        records.append(LascoRecord(line_no, onset, classify_width(width, partial_halo_width), width, cpa))
    for err in errors:
        logger.warning("LASCO catalog line %d: %s", err.line, err.reason)
    return ParseResult(records, errors)


# ---------------------------------------------------------------------------
# join


def event_id_for(onset: datetime) -> str:
    return "CME" + onset.strftime("%Y%m%dT%H%M%S")


def _nearest(lasco: list[LascoRecord], times: list[datetime], t: datetime):
    """Nearest LASCO row to ``t``; ties go to the earlier row. Returns (record, tied)."""
    i = bisect.bisect_left(times, t)
    cands = [j for j in (i - 1, i) if 0 <= j < len(lasco)]
    if not cands:
        return None, False
    dists = [(abs((times[j] - t).total_seconds()), j) for j in cands]
    dists.sort()
    tied = len(dists) == 2 and dists[0][0] == dists[1][0]
    return lasco[dists[0][1]], tied


def join_and_label(
    rc_records: Iterable[RcRecord],
    lasco_records: Iterable[LascoRecord],
    match_tolerance: timedelta = DEFAULT_MATCH_TOLERANCE,
    study_interval: tuple[datetime, datetime] = DEFAULT_STUDY_INTERVAL,
    provenance: dict | None = None,
) -> EventCatalog:
    """Match each ICME row to the nearest LASCO CME and label it.

    Every input record ends up either as a catalog event or as an exclusion
    with a machine-readable reason.
    """
    rc_records = list(rc_records)
    lasco = sorted(lasco_records, key=lambda r: (r.onset_time, r.line))
    times = [r.onset_time for r in lasco]
    if not rc_records:
        logger.warning("no ICME records supplied; catalog is empty")

    events: list[CmeEvent] = []
    exclusions: list[Exclusion] = []
    seen: set[str] = set()
    for rec in rc_records:
        if rec.onset_time is None:
            exclusions.append(Exclusion(rec.line, "no_cme_time"))
            continue
        match, tied = _nearest(lasco, times, rec.onset_time)
        if match is None or abs(match.onset_time - rec.onset_time) > match_tolerance:
            exclusions.append(Exclusion(rec.line, "no_lasco_match", "", rec.onset_time))
            continue
        if tied:
            logger.warning("ICME line %d equidistant from two LASCO rows; using earlier %s",
                           rec.line, format_time(match.onset_time))
        onset = match.onset_time
        if not (study_interval[0] <= onset <= study_interval[1]):
            exclusions.append(Exclusion(rec.line, "outside_study_interval", "", onset))
            continue
        if match.halo_class is HaloClass.OTHER:
            exclusions.append(Exclusion(rec.line, "not_halo", f"width={match.width:g}", onset))
            continue
        if rec.dst_min is None:
            exclusions.append(Exclusion(rec.line, "missing_dst", "", onset))
            continue
        eid = event_id_for(onset)
        if eid in seen:
            exclusions.append(Exclusion(rec.line, "duplicate_event", eid, onset))
            continue
        seen.add(eid)
        events.append(CmeEvent(eid, onset, match.halo_class, rec.dst_min))
    for x in exclusions:
        logger.info("excluded ICME line %d: %s %s", x.line, x.reason, x.detail)
    return EventCatalog(events, exclusions, dict(provenance or {}))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_catalog(
    rc_text: str,
    lasco_texts: Iterable[str],
    match_tolerance: timedelta = DEFAULT_MATCH_TOLERANCE,
    partial_halo_width: float = DEFAULT_PARTIAL_HALO_WIDTH,
    study_interval: tuple[datetime, datetime] = DEFAULT_STUDY_INTERVAL,
) -> EventCatalog:
    """Parse and join source documents, recording their checksums."""
    lasco_texts = list(lasco_texts)
    rc = parse_rc_list(rc_text)
    lasco_records = []
    lasco_errors = []
    for text in lasco_texts:
        res = parse_lasco_catalog(text, partial_halo_width)
        lasco_records.extend(res.records)
        lasco_errors.extend(res.errors)
    provenance = {
        "rc_sha256": sha256_text(rc_text),
        "lasco_sha256": sorted(sha256_text(t) for t in lasco_texts),
        "parsed_at": format_time(datetime.now(timezone.utc)),
        "rc_row_errors": len(rc.errors),
        "lasco_row_errors": len(lasco_errors),
        "match_tolerance_min": match_tolerance.total_seconds() / 60.0,
        "partial_halo_width": partial_halo_width,
    }
    return join_and_label(rc.records, lasco_records, match_tolerance, study_interval, provenance)


def summarize(catalog: EventCatalog) -> dict[int, tuple[int, int]]:
    """Per-year (geoeffective, non-geoeffective) counts."""
    if len(catalog) == 0:
        raise UsageError("cannot summarize an empty catalog")
    out: dict[int, list[int]] = {}
    for e in catalog:
        if e.label is None:
            continue
        slot = out.setdefault(e.year, [0, 0])
        slot[0 if e.label is Label.GEOEFFECTIVE else 1] += 1
    return {y: (c[0], c[1]) for y, c in sorted(out.items())}
