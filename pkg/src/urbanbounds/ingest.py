"""Parse point-record streams, filter them and assemble user trajectories.

Records are kept columnar (numpy arrays) so that corpora of millions of lines
go through the filters without per-record Python objects. ``RawRecord``,
``PointRecord`` and ``Trajectory`` remain available as value types for
callers that want them.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional

import numpy as np

from .geo import PASSTHROUGH, Fishnet, Projection, cells_of, project

log = logging.getLogger(__name__)

SOURCES = ("gps", "geocoded", "unknown")
SRC_GPS, SRC_GEOCODED, SRC_UNKNOWN = 0, 1, 2
DAY = 86400.0


@dataclass(frozen=True)
class RawRecord:
    user_id: str
    lat: float
    lon: float
    t: float
    source_tag: str = "unknown"


@dataclass(frozen=True)
class PointRecord:
    user_id: str
    x: float
    y: float
    t: float


@dataclass(frozen=True)
class FilterConfig:
    max_speed: float = 240.0
    min_residency: float = 30.0
    keep_geocoded: bool = False
    keep_unknown: bool = True
    time_window: Optional[tuple[float, float]] = None
    dedup_key: str = "user_time_loc"

    def __post_init__(self):
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if self.min_residency < 0:
            raise ValueError("min_residency must be >= 0")
        if self.dedup_key not in ("user_time", "user_time_loc"):
            raise ValueError(f"unknown dedup_key {self.dedup_key!r}")


@dataclass
class FilterReport:
    """Per-stage counts. ``dropped_speed`` and ``dropped_residency`` count
    users; the ``*_records`` fields carry the matching record counts so that
    ``parsed`` equals the sum of every record-level drop plus
    ``retained_records``."""

    parsed: int = 0
    dropped_geocoded: int = 0
    dropped_outside: int = 0
    dropped_window: int = 0
    dropped_duplicate: int = 0
    dropped_speed: int = 0
    dropped_speed_records: int = 0
    dropped_residency: int = 0
    dropped_residency_records: int = 0
    retained_records: int = 0
    retained_users: int = 0
    parse_errors: int = 0

    def __add__(self, other: "FilterReport") -> "FilterReport":
        return FilterReport(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def record_drops(self) -> int:
        return (self.dropped_geocoded + self.dropped_outside + self.dropped_window
                + self.dropped_duplicate + self.dropped_speed_records
                + self.dropped_residency_records)


class RecordTable(Sequence):
    """Columnar batch of raw records; indexing yields :class:`RawRecord`.

    ``users`` is the list of distinct user ids and ``user`` holds per-record
    indices into it. When ``projected`` is set, ``lat``/``lon`` carry planar
    y/x meters (input had ``x``/``y`` columns).
    """

    def __init__(self, users, user, lat, lon, t, source, projected=False):
        self.users = list(users)
        self.user = np.asarray(user, dtype=np.int64)
        self.lat = np.asarray(lat, dtype=float)
        self.lon = np.asarray(lon, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.source = np.asarray(source, dtype=np.int8)
        self.projected = projected

    @classmethod
    def from_records(cls, records: Iterable[RawRecord], projected=False) -> "RecordTable":
        users: dict[str, int] = {}
        cols = ([], [], [], [], [])
        for r in records:
            cols[0].append(users.setdefault(r.user_id, len(users)))
            cols[1].append(r.lat)
            cols[2].append(r.lon)
            cols[3].append(r.t)
            cols[4].append(SOURCES.index(r.source_tag))
        return cls(list(users), *cols, projected=projected)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return RawRecord(self.users[self.user[i]], float(self.lat[i]), float(self.lon[i]),
                         float(self.t[i]), SOURCES[self.source[i]])

    def take(self, idx) -> "RecordTable":
        return RecordTable(self.users, self.user[idx], self.lat[idx], self.lon[idx],
                           self.t[idx], self.source[idx], self.projected)

    @classmethod
    def concat(cls, parts) -> "RecordTable":
        """Join tables in order; user ids are merged by name."""
        parts = list(parts)
        if len({p.projected for p in parts}) > 1:
            raise ValueError("cannot mix projected and lat/lon inputs")
        users: dict[str, int] = {}
        codes = []
        for p in parts:
            remap = np.array([users.setdefault(u, len(users)) for u in p.users], dtype=np.int64)
            codes.append(remap[p.user] if len(p.users) else p.user)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(list(users), np.concatenate(codes), cat("lat"), cat("lon"), cat("t"),
                   cat("source"), parts[0].projected if parts else False)


def parse_timestamp(value) -> float:
    """Epoch seconds from a number or an ISO-8601 string (naive means UTC)."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        t = float(value)
    else:
        s = str(value).strip()
        try:
            t = float(s)
        except ValueError:
            if s.endswith("Z"):
                s = s[:-1] + "+00:00"
            dt = datetime.fromisoformat(s)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            t = dt.timestamp()
    if not math.isfinite(t):
        raise ValueError("non-finite timestamp")
    return t


def _source_code(value) -> int:
    if value is None or value == "":
        return SRC_UNKNOWN
    v = str(value).strip().lower()
    if v not in SOURCES:
        raise ValueError(f"unknown source tag {value!r}")
    return SOURCES.index(v)


def parse_records(stream, fmt: str = "csv"):
    """Read line-delimited records from a text stream, path, or string list.

    Returns ``(RecordTable, n_errors)``. Malformed lines are counted and
    skipped. CSV may carry a header; a header naming ``x``/``y`` instead of
    ``lat``/``lon`` marks the input as already projected (no range checks).
    """
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown input format {fmt!r}")
    if isinstance(stream, (str, bytes)) or hasattr(stream, "__fspath__"):
        with open(stream, newline="") as fh:
            return parse_records(fh, fmt)
    users: dict[str, int] = {}
    uc, la, lo, ts, src = [], [], [], [], []
    errors = 0
    projected = False
    lines = iter(stream)

    if fmt == "csv":
        reader = csv.reader(lines)
        cols = {"user_id": 0, "lat": 1, "lon": 2, "t": 3, "source": 4}
        first = True
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if first:
                first = False
                head = [c.strip().lower() for c in row]
                if "user_id" in head:
                    if "x" in head and "y" in head:
                        projected = True
                        cols = {"user_id": head.index("user_id"), "lat": head.index("y"),
                                "lon": head.index("x"), "t": head.index("t")}
                    else:
                        cols = {k: head.index(k) for k in ("user_id", "lat", "lon", "t")}
                    if "source" in head:
                        cols["source"] = head.index("source")
                    continue
            try:
                uid = row[cols["user_id"]].strip()
                lat = float(row[cols["lat"]])
                lon = float(row[cols["lon"]])
                t = parse_timestamp(row[cols["t"]])
                si = cols.get("source")
                s = _source_code(row[si] if si is not None and si < len(row) else None)
                _check(uid, lat, lon, projected)
            except (ValueError, IndexError, OverflowError):
                errors += 1
                continue
            uc.append(users.setdefault(uid, len(users)))
            la.append(lat)
            lo.append(lon)
            ts.append(t)
            src.append(s)
    else:
        for line in lines:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                uid = str(obj["user_id"])
                if "x" in obj and "lat" not in obj:
                    projected = True
                    lat, lon = float(obj["y"]), float(obj["x"])
                else:
                    lat, lon = float(obj["lat"]), float(obj["lon"])
                t = parse_timestamp(obj["t"])
                s = _source_code(obj.get("source"))
                _check(uid, lat, lon, projected)
            except (ValueError, KeyError, TypeError, OverflowError):
                errors += 1
                continue
            uc.append(users.setdefault(uid, len(users)))
            la.append(lat)
            lo.append(lon)
            ts.append(t)
            src.append(s)
    return RecordTable(list(users), uc, la, lo, ts, src, projected), errors


def _check(uid, lat, lon, projected):
    if not uid:
        raise ValueError("empty user id")
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValueError("non-finite coordinate")
    if not projected and not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError("coordinate out of range")


def deduplicate(records, key: str = "user_time_loc"):
    """Keep the first occurrence of each key value, preserving order."""
    table = records if isinstance(records, RecordTable) else RecordTable.from_records(records)
    keep = _first_occurrence(table, key)
    out = table.take(keep)
    return out if isinstance(records, RecordTable) else list(out)


def _first_occurrence(table: RecordTable, key: str) -> np.ndarray:
    n = len(table)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if key == "user_time":
        cols = [table.t, table.user]
    elif key == "user_time_loc":
        cols = [table.lon, table.lat, table.t, table.user]
    else:
        raise ValueError(f"unknown dedup key {key!r}")
    order = np.lexsort(cols)  # stable: ties keep input order
    same = np.ones(n - 1, dtype=bool)
    for c in cols:
        cs = c[order]
        same &= cs[1:] == cs[:-1]
    first = np.concatenate(([True], ~same))
    return np.sort(order[first])


@dataclass(frozen=True, eq=False)
class Trajectory:
    user_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.t) < 1:
            raise ValueError("trajectory needs at least one point")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("trajectory timestamps must be non-decreasing")

    @classmethod
    def from_points(cls, user_id, points) -> "Trajectory":
        pts = sorted(points, key=lambda p: p[2])
        arr = np.asarray(pts, dtype=float).reshape(-1, 3)
        return cls(user_id, arr[:, 2].copy(), arr[:, 0].copy(), arr[:, 1].copy())

    def __len__(self):
        return len(self.t)

    @property
    def points(self) -> list[PointRecord]:
        return [PointRecord(self.user_id, float(a), float(b), float(c))
                for a, b, c in zip(self.x, self.y, self.t)]

    @property
    def span_days(self) -> float:
        return float(self.t[-1] - self.t[0]) / DAY

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.user_id == other.user_id
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y))


def filter_speed(traj: Trajectory, max_speed: float = 240.0):
    """Return ``(keep, offending_index)``; the index is the first ``i`` such
    that the move from point ``i`` to ``i+1`` exceeds ``max_speed``."""
    if len(traj) < 2:
        return True, None
    bad = _speed_violations(traj.x, traj.y, traj.t, max_speed)
    if bad.any():
        return False, int(np.argmax(bad))
    return True, None


def _speed_violations(x, y, t, max_speed):
    d = np.hypot(np.diff(x), np.diff(y))
    dt = np.diff(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(dt > 0, d > max_speed * dt, d > 0)


def filter_residency(traj: Trajectory, min_days: float = 30.0) -> bool:
    return traj.span_days > min_days


@dataclass
class TrajectorySet:
    """All trajectories in one columnar block, grouped by user and sorted by t.

    ``offsets[k]:offsets[k+1]`` slices user ``user_ids[k]``.
    """

    user_ids: list
    offsets: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.user_ids)

    @property
    def n_records(self) -> int:
        return int(self.offsets[-1]) if len(self.offsets) else 0

    def __iter__(self):
        for k in range(len(self.user_ids)):
            yield self[k]

    def __getitem__(self, k) -> Trajectory:
        a, b = self.offsets[k], self.offsets[k + 1]
        return Trajectory(self.user_ids[k], self.t[a:b], self.x[a:b], self.y[a:b])

    def user_index(self) -> np.ndarray:
        """Per-record user position in ``user_ids``."""
        return np.repeat(np.arange(len(self.user_ids)), np.diff(self.offsets))

    @classmethod
    def from_trajectories(cls, trajs: Iterable[Trajectory]) -> "TrajectorySet":
        trajs = list(trajs)
        lens = [len(tr) for tr in trajs]
        offsets = np.concatenate(([0], np.cumsum(lens))).astype(np.int64)
        cat = (lambda attr: np.concatenate([getattr(tr, attr) for tr in trajs])
               if trajs else np.zeros(0))
        return cls([tr.user_id for tr in trajs], offsets, cat("t"), cat("x"), cat("y"))

    @classmethod
    def concat(cls, parts: Iterable["TrajectorySet"]) -> "TrajectorySet":
        trajs = [tr for p in parts for tr in p]
        trajs.sort(key=lambda tr: tr.user_id)
        return cls.from_trajectories(trajs)


def build_trajectories(records, config: FilterConfig = FilterConfig()):
    """Group points per user, sort by time and apply the speed then the
    residency rule (a violation drops the whole user).

    ``records`` is a sequence of :class:`PointRecord` or an
    ``(user_ids, user, x, y, t)`` column tuple. Returns
    ``(TrajectorySet, FilterReport)``; only the speed/residency/retained
    fields of the report are filled in.
    """
    if isinstance(records, tuple):
        names, user, x, y, t = records
        names = list(names)
    else:
        lookup: dict[str, int] = {}
        user = np.array([lookup.setdefault(r.user_id, len(lookup)) for r in records], dtype=np.int64)
        names = list(lookup)
        x = np.array([r.x for r in records], dtype=float)
        y = np.array([r.y for r in records], dtype=float)
        t = np.array([r.t for r in records], dtype=float)
    user = np.asarray(user, dtype=np.int64)
    report = FilterReport()
    if len(user) == 0:
        return TrajectorySet([], np.zeros(1, dtype=np.int64), np.zeros(0), np.zeros(0), np.zeros(0)), report

    # group users in user-id order so output is independent of input order
    rank = np.empty(len(names), dtype=np.int64)
    rank[np.argsort(np.array(names, dtype=object), kind="stable")] = np.arange(len(names))
    key = rank[user]
    order = np.lexsort((t, key))
    key, x, y, t = key[order], np.asarray(x)[order], np.asarray(y)[order], np.asarray(t)[order]
    starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
    ends = np.concatenate((starts[1:], [len(key)]))
    sizes = ends - starts

    viol = _speed_violations(x, y, t, config.max_speed)
    viol &= key[1:] == key[:-1]
    bad_speed = np.zeros(len(starts), dtype=bool)
    if viol.any():
        grp = np.searchsorted(starts, np.flatnonzero(viol), side="right") - 1
        bad_speed[grp] = True
    span = (t[ends - 1] - t[starts]) / DAY
    bad_res = ~bad_speed & ~(span > config.min_residency)
    good = ~bad_speed & ~bad_res

    report.dropped_speed = int(bad_speed.sum())
    report.dropped_speed_records = int(sizes[bad_speed].sum())
    report.dropped_residency = int(bad_res.sum())
    report.dropped_residency_records = int(sizes[bad_res].sum())
    report.retained_users = int(good.sum())
    report.retained_records = int(sizes[good].sum())

    keep = np.repeat(good, sizes)
    inv = np.argsort(rank)
    uids = [names[inv[key[s]]] for s in starts[good]]
    offsets = np.concatenate(([0], np.cumsum(sizes[good]))).astype(np.int64)
    return TrajectorySet(uids, offsets, t[keep], x[keep], y[keep]), report


def filter_records(table: RecordTable, config: FilterConfig = FilterConfig(),
                   projection: Projection = PASSTHROUGH, region: Optional[Fishnet] = None,
                   parse_errors: int = 0):
    """Full filtering chain over a parsed table.

    Order: source tag, projection + study region, time window, dedup, then
    per-user speed and residency rules.
    """
    report = FilterReport(parsed=len(table), parse_errors=parse_errors)

    src = table.source
    keep = src == SRC_GPS
    if config.keep_geocoded:
        keep |= src == SRC_GEOCODED
    if config.keep_unknown:
        keep |= src == SRC_UNKNOWN
    report.dropped_geocoded = int((~keep).sum())
    table = table.take(np.flatnonzero(keep))

    proj = PASSTHROUGH if table.projected else projection
    x, y = project(table.lat, table.lon, proj)
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if region is not None:
        inside = cells_of(x, y, region)[2]
        report.dropped_outside = int((~inside).sum())
        idx = np.flatnonzero(inside)
        table, x, y = table.take(idx), x[idx], y[idx]

    if config.time_window is not None:
        lo, hi = config.time_window
        inw = (table.t >= lo) & (table.t < hi)
        report.dropped_window = int((~inw).sum())
        idx = np.flatnonzero(inw)
        table, x, y = table.take(idx), x[idx], y[idx]

    first = _first_occurrence(table, config.dedup_key)
    report.dropped_duplicate = len(table) - len(first)
    table, x, y = table.take(first), x[first], y[first]

    trajs, rep = build_trajectories((table.users, table.user, x, y, table.t), config)
    for k in ("dropped_speed", "dropped_speed_records", "dropped_residency",
              "dropped_residency_records", "retained_users", "retained_records"):
        setattr(report, k, getattr(rep, k))
    log.info("filter: %s", report.to_dict())
    return trajs, report


def shard_of(user_id: str, n_shards: int) -> int:
    """Stable user-id shard assignment (crc32) for split processing."""
    return zlib.crc32(user_id.encode()) % n_shards


def split_table(table: RecordTable, n_shards: int) -> list[RecordTable]:
    ushard = np.array([shard_of(u, n_shards) for u in table.users], dtype=np.int64)
    rec_shard = ushard[table.user] if len(table) else np.zeros(0, dtype=np.int64)
    return [table.take(np.flatnonzero(rec_shard == s)) for s in range(n_shards)]


def write_trajectories(trajs: TrajectorySet, fh) -> None:
    """JSONL trajectory store: one user per line with t/x/y arrays."""
    for tr in trajs:
        fh.write(json.dumps({"user_id": tr.user_id, "t": tr.t.tolist(),
                             "x": tr.x.tolist(), "y": tr.y.tolist()}))
        fh.write("\n")


def read_trajectories(fh) -> TrajectorySet:
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh) as f:
            return read_trajectories(f)
    ids, ts, xs, ys, lens = [], [], [], [], [0]
    for line in fh:
        if not line.strip():
            continue
        obj = json.loads(line)
        ids.append(obj["user_id"])
        ts.append(obj["t"])
        xs.append(obj["x"])
        ys.append(obj["y"])
        lens.append(len(obj["t"]))
    flat = lambda parts: np.array([v for p in parts for v in p], dtype=float)
    return TrajectorySet(ids, np.cumsum(lens).astype(np.int64), flat(ts), flat(xs), flat(ys))


def dumps_trajectories(trajs: TrajectorySet) -> str:
    buf = io.StringIO()
    write_trajectories(trajs, buf)
    return buf.getvalue()
