from __future__ import annotations

import hashlib
from datetime import datetime, timedelta, timezone

import pytest

from cmestorm.archive import Archive, ArchiveQuery, InstrumentSource
from cmestorm.errors import ChecksumError, FetchError, OfflineCacheMiss, UsageError

UTC = timezone.utc
BASE = "https://archive.test/{yyyy}/c2/{yyyy}{mm}{dd}/"
SOURCES = {"C2": InstrumentSource(BASE, r"(?P<date>\d{8})_(?P<time>\d{4,6})_c2\.(?:fits|png)$")}
ONSET = datetime(2002, 9, 17, 8, 6, tzinfo=UTC)


class Resp:
    def __init__(self, content=b"", status_code=200):
        self.content = content
        self.status_code = status_code


class FakeSession:
    """Serves one day's listing with a FITS and a PNG product for 07:54 and 08:30."""

    def __init__(self, fail_first=0):
        self.calls = []
        self.fail_first = fail_first
        self.files = {
            "20020917_0754_c2.fits": b"fits-0754",
            "20020917_0754_c2.png": b"png-0754",
            "20020917_0830_c2.png": b"png-0830",
        }

    def get(self, url, timeout=None):
        self.calls.append(url)
        if self.fail_first:
            self.fail_first -= 1
            raise ConnectionError("boom")
        if url.endswith("/20020917/"):
            links = "".join(f'<a href="{n}">{n}</a>' for n in self.files)
            return Resp(f"<html>{links}</html>".encode())
        name = url.rsplit("/", 1)[-1]
        if name in self.files:
            return Resp(self.files[name])
        return Resp(b"", 404)


def make(tmp_path, session=None, **kw):
    return Archive(tmp_path / "cache", SOURCES, session or FakeSession(), min_interval=0.0,
                   sleep=lambda s: None, **kw)


def query():
    return ArchiveQuery("C2", ONSET - timedelta(hours=1), ONSET + timedelta(hours=1))


def test_query_validation():
    with pytest.raises(UsageError):
        ArchiveQuery("C2", ONSET, ONSET)
    with pytest.raises(UsageError):
        ArchiveQuery("C2", ONSET, ONSET + timedelta(hours=25))
    with pytest.raises(UsageError):
        ArchiveQuery("C3", ONSET, ONSET + timedelta(hours=1))


def test_fetch_prefers_fits_and_caches(tmp_path):
    sess = FakeSession()
    arch = make(tmp_path, sess)
    frames = arch.fetch(query())
    assert [f.observation_time.strftime("%H%M") for f in frames] == ["0754", "0830"]
    assert frames[0].product == "fits" and frames[1].product == "quicklook"
    assert frames[0].local_path.read_bytes() == b"fits-0754"
    assert frames[0].local_path.parent == tmp_path / "cache" / "C2" / "2002" / "09" / "17"
    assert all(f.verify() for f in frames)
    n = len(sess.calls)
    again = arch.fetch(query())
    assert len(sess.calls) == n, "fully cached query must not touch the network"
    assert [f.checksum for f in again] == [f.checksum for f in frames]


def test_offline_hit_and_miss(tmp_path):
    make(tmp_path).fetch(query())
    offline = make(tmp_path, offline=True)
    assert len(offline.fetch(query())) == 2
    assert offline.network_calls == 0
    other_day = ArchiveQuery("C2", ONSET + timedelta(days=2), ONSET + timedelta(days=2, hours=1))
    with pytest.raises(OfflineCacheMiss):
        offline.fetch(other_day)


def test_missing_day_is_empty(tmp_path):
    arch = make(tmp_path)
    q = ArchiveQuery("C2", ONSET + timedelta(days=5), ONSET + timedelta(days=5, hours=2))
    assert arch.fetch(q) == []


def test_retry_then_success(tmp_path):
    sleeps = []
    arch = Archive(tmp_path / "c", SOURCES, FakeSession(fail_first=2), min_interval=0.0, retries=3,
                   backoff=1.0, sleep=sleeps.append)
    assert len(arch.fetch(query())) == 2
    assert sleeps[:2] == [1.0, 2.0]


def test_retry_exhausted(tmp_path):
    arch = Archive(tmp_path / "c", SOURCES, FakeSession(fail_first=10), min_interval=0.0, retries=2,
                   sleep=lambda s: None)
    with pytest.raises(FetchError):
        arch.fetch(query())


def test_rate_limit_waits(tmp_path):
    clock = iter([0.0, 0.2, 0.2, 5.0, 5.0, 9.0, 9.0, 20.0, 20.0])
    sleeps = []
    arch = Archive(tmp_path / "c", SOURCES, FakeSession(), min_interval=1.0, sleep=sleeps.append,
                   clock=lambda: next(clock))
    arch.fetch(query())
    assert sleeps and sleeps[0] == pytest.approx(0.8)


def test_checksum_mismatch_quarantines(tmp_path):
    arch = make(tmp_path)
    frames = arch.fetch(query())
    frames[0].local_path.write_bytes(b"tampered")
    with pytest.raises(ChecksumError):
        make(tmp_path).fetch(query())
    assert list((tmp_path / "cache" / "quarantine").iterdir())
    assert not frames[0].local_path.exists()


def test_cache_manifest_inventory(tmp_path):
    arch = make(tmp_path)
    (tmp_path / "cache").mkdir()
    assert len(arch.cache_manifest()) == 0
    frames = arch.fetch(query())
    inv = arch.cache_manifest()
    assert len(inv) == len(frames) == 2
    assert inv.counts() == {"C2": 2}
    assert inv.dangling == [] and inv.untracked == []
    rec = inv.frames["C2"][0]
    assert rec.checksum == hashlib.sha256(b"fits-0754").hexdigest()


def test_cache_manifest_missing_root(tmp_path):
    with pytest.raises(OSError):
        make(tmp_path).cache_manifest()
