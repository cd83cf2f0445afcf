"""Gauge/satellite ingestion and assembly of regression samples.

Each sample pairs one gauge-month with 17 predictors: the station elevation,
the distances to the four closest nodes of two gridded products (field A and
field B), and the monthly totals at those nodes.
"""

from __future__ import annotations

import calendar
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0

PREDICTOR_NAMES = (
    "elevation_m",
    "dist1_a", "dist2_a", "dist3_a", "dist4_a",
    "dist1_b", "dist2_b", "dist3_b", "dist4_b",
    "pr1_a", "pr2_a", "pr3_a", "pr4_a",
    "pr1_b", "pr2_b", "pr3_b", "pr4_b",
)
N_PREDICTORS = len(PREDICTOR_NAMES)

GAUGE_HEADER = ("station_id", "lat", "lon", "elevation_m", "year", "month", "precip_mm")


class IngestError(ValueError):
    """Malformed input; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)


class NoSamples(ValueError):
    """Every gauge-month was skipped, so there is nothing to learn from."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", (lon + 180.0) % 360.0 - 180.0)


def _haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; inputs in degrees, arrays broadcast."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.subtract(lon2, lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    return float(_haversine(a.lat, a.lon, b.lat, b.lon))


@dataclass(frozen=True)
class GaugeRecord:
    station_id: str
    location: GeoPoint
    elevation_m: float | None
    year: int
    month: int
    precip_mm: float | None

    def __post_init__(self):
        if not 1 <= int(self.month) <= 12:
            raise ValueError(f"month {self.month} outside 1..12")
        if self.precip_mm is not None and not self.precip_mm >= 0:
            raise ValueError(f"precipitation must be >= 0, got {self.precip_mm}")


@dataclass(frozen=True, eq=False)
class GridField:
    """Gridded product; ``values`` is indexed [time, lat, lon], NaN = missing."""

    source_tag: str
    lat_axis: np.ndarray
    lon_axis: np.ndarray
    values: np.ndarray
    time_axis: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        lat = np.array(self.lat_axis, dtype=np.float64)
        lon = np.array(self.lon_axis, dtype=np.float64)
        vals = np.array(self.values, dtype=np.float64)
        times = tuple(tuple(int(v) for v in t) for t in self.time_axis)
        for name, ax in (("lat", lat), ("lon", lon)):
            if ax.ndim != 1 or ax.size == 0:
                raise ValueError(f"{name} axis must be a non-empty vector")
            if np.any(np.diff(ax) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing")
        if vals.shape != (len(times), lat.size, lon.size):
            raise ValueError(
                f"values shape {vals.shape} does not match axes ({len(times)}, {lat.size}, {lon.size})"
            )
        if len({len(t) for t in times}) > 1 or (times and len(times[0]) not in (2, 3)):
            raise ValueError("time axis must hold (year, month) or (year, month, day) entries")
        for arr in (lat, lon, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "lat_axis", lat)
        object.__setattr__(self, "lon_axis", lon)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time_axis", times)

    @property
    def is_daily(self) -> bool:
        return bool(self.time_axis) and len(self.time_axis[0]) == 3

    @property
    def n_nodes(self) -> int:
        return self.lat_axis.size * self.lon_axis.size

    def time_lookup(self) -> dict[tuple[int, ...], int]:
        return {t: i for i, t in enumerate(self.time_axis)}


def nearest_grid_points(p: GeoPoint, g: GridField, k: int = 4) -> list[tuple[int, int, float]]:
    """The ``k`` grid nodes closest to ``p``, nearest first.

    Equal distances are ordered by (lat_idx, lon_idx).
    """
    if g.n_nodes < k:
        raise ValueError(f"insufficient grid: {g.n_nodes} nodes, {k} requested")
    lat_idx, lon_idx = np.meshgrid(
        np.arange(g.lat_axis.size), np.arange(g.lon_axis.size), indexing="ij"
    )
    lat_idx, lon_idx = lat_idx.ravel(), lon_idx.ravel()
    d = _haversine(p.lat, p.lon, g.lat_axis[lat_idx], g.lon_axis[lon_idx])
    order = np.lexsort((lon_idx, lat_idx, d))[:k]
    return [(int(lat_idx[i]), int(lon_idx[i]), float(d[i])) for i in order]


def _bracket(src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower cell index and fractional offset of each target coordinate."""
    if src.size < 2:
        raise ValueError("bilinear interpolation needs at least two nodes per axis")
    if np.any(tgt < src[0]) or np.any(tgt > src[-1]):
        raise ValueError("extrapolation requested: target axis outside source hull")
    i = np.clip(np.searchsorted(src, tgt, side="right") - 1, 0, src.size - 2)
    w = (tgt - src[i]) / (src[i + 1] - src[i])
    return i, w


def regrid_bilinear(g: GridField, target_lat_axis, target_lon_axis) -> GridField:
    """Bilinear interpolation of every time slice onto new axes.

    A missing corner with nonzero weight makes the target node missing.
    """
    tlat = np.asarray(target_lat_axis, dtype=np.float64)
    tlon = np.asarray(target_lon_axis, dtype=np.float64)
    i, wy = _bracket(g.lat_axis, tlat)
    j, wx = _bracket(g.lon_axis, tlon)
    wy, wx = wy[:, None], wx[None, :]
    v = g.values
    out = np.zeros((v.shape[0], tlat.size, tlon.size))
    corners = (
        (i, j, (1 - wy) * (1 - wx)),
        (i, j + 1, (1 - wy) * wx),
        (i + 1, j, wy * (1 - wx)),
        (i + 1, j + 1, wy * wx),
    )
    for ci, cj, w in corners:
        vals = v[:, ci[:, None], cj[None, :]]
        active = np.broadcast_to(w > 0, vals.shape)
        out += np.where(active, vals * w, 0.0)
        out[active & np.isnan(vals)] = np.nan
    return GridField(g.source_tag, tlat, tlon, out, g.time_axis)


def aggregate_daily_to_monthly(g: GridField) -> GridField:
    """Sum daily values into monthly totals.

    A month is missing at a node if any of its days is missing there; a month
    whose time axis lacks calendar days is missing everywhere.
    """
    if not g.is_daily:
        raise ValueError(f"field {g.source_tag!r} does not have a daily time axis")
    months: dict[tuple[int, int], list[int]] = {}
    for t, (year, month, _day) in enumerate(g.time_axis):
        months.setdefault((year, month), []).append(t)
    keys = sorted(months)
    out = np.empty((len(keys), g.lat_axis.size, g.lon_axis.size))
    for m, (year, month) in enumerate(keys):
        idx = months[(year, month)]
        days = {g.time_axis[t][2] for t in idx}
        if len(idx) != len(days):
            raise ValueError(f"duplicate days in {year}-{month:02d} of {g.source_tag!r}")
        if len(days) < calendar.monthrange(year, month)[1]:
            out[m] = np.nan
            continue
        out[m] = g.values[idx].sum(axis=0)
    return GridField(g.source_tag, g.lat_axis, g.lon_axis, out, tuple(keys))


@dataclass(frozen=True)
class Sample:
    station_id: str
    target_mm: float
    predictors: tuple[float, ...]
    time: tuple[int, int]

    def __post_init__(self):
        if len(self.predictors) != N_PREDICTORS:
            raise ValueError(f"expected {N_PREDICTORS} predictors, got {len(self.predictors)}")

    def to_json(self) -> str:
        return json.dumps({
            "station_id": self.station_id,
            "year": self.time[0],
            "month": self.time[1],
            "target_mm": self.target_mm,
            "predictors": dict(zip(PREDICTOR_NAMES, self.predictors)),
        })

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        d = json.loads(line)
        preds = d["predictors"]
        if set(preds) != set(PREDICTOR_NAMES):
            raise ValueError("sample predictors do not match the expected names")
        return cls(
            station_id=str(d["station_id"]),
            target_mm=float(d["target_mm"]),
            predictors=tuple(float(preds[n]) for n in PREDICTOR_NAMES),
            time=(int(d["year"]), int(d["month"])),
        )


class Dataset:
    """Immutable column store of samples.

    ``X`` is the (n, 17) predictor matrix in ``PREDICTOR_NAMES`` order and ``y``
    the targets; ``station_index`` maps each station to its sample rows.
    """

    def __init__(self, X, y, station_ids: Sequence[str], times: Sequence[tuple[int, int]],
                 skips: Sequence[dict] = (), sources: dict | None = None):
        X = np.array(X, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or y.ndim != 1:
            raise ValueError(f"inconsistent shapes X{X.shape}, y{y.shape}")
        if len(station_ids) != y.size or len(times) != y.size:
            raise ValueError("station ids and times must match the sample count")
        X.setflags(write=False)
        y.setflags(write=False)
        self.X = X
        self.y = y
        self.station_ids = tuple(str(s) for s in station_ids)
        self.times = tuple((int(a), int(b)) for a, b in times)
        self.skips = tuple(skips)
        self.sources = dict(sources or {})
        index: dict[str, list[int]] = {}
        for i, s in enumerate(self.station_ids):
            index.setdefault(s, []).append(i)
        self.station_index = {s: tuple(v) for s, v in index.items()}

    def __len__(self) -> int:
        return self.y.size

    @property
    def samples(self) -> tuple[Sample, ...]:
        return tuple(
            Sample(s, float(t), tuple(float(v) for v in row), tm)
            for s, t, row, tm in zip(self.station_ids, self.y, self.X, self.times)
        )

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], **kw) -> "Dataset":
        samples = list(samples)
        if not samples:
            return cls(np.empty((0, N_PREDICTORS)), np.empty(0), [], [], **kw)
        return cls(
            np.array([s.predictors for s in samples]),
            np.array([s.target_mm for s in samples]),
            [s.station_id for s in samples],
            [s.time for s in samples],
            **kw,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.X[idx], self.y[idx],
            [self.station_ids[i] for i in idx], [self.times[i] for i in idx],
            sources=self.sources,
        )

    def manifest(self) -> dict:
        return {
            "n_samples": len(self),
            "n_stations": len(self.station_index),
            "predictors": list(PREDICTOR_NAMES),
            "sources": self.sources,
            "n_skipped": len(self.skips),
            "skips": list(self.skips),
        }

    def save(self, path) -> tuple[Path, Path]:
        """Write ``path`` as JSON lines plus ``<path>.manifest.json``."""
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in self.samples:
                fh.write(s.to_json() + "\n")
        mpath = manifest_path(path)
        mpath.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, mpath

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        samples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    samples.append(Sample.from_json(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise IngestError(f"bad sample: {exc}", lineno, str(path)) from exc
        skips, sources = (), {}
        mpath = manifest_path(path)
        if mpath.exists():
            m = json.loads(mpath.read_text(encoding="utf-8"))
            skips, sources = m.get("skips", ()), m.get("sources", {})
        return cls.from_samples(samples, skips=skips, sources=sources)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _station_neighbors(p: GeoPoint, g: GridField):
    nn = nearest_grid_points(p, g, 4)
    return [n[0] for n in nn], [n[1] for n in nn], [n[2] for n in nn]


def build_samples(gauges: Sequence[GaugeRecord], field_a: GridField, field_b: GridField) -> Dataset:
    """Assemble one sample per gauge-month with complete predictors.

    Stations keep their order of first appearance; months are sorted within a
    station. Incomplete gauge-months are dropped and listed in ``Dataset.skips``.
    """
    for f in (field_a, field_b):
        if f.is_daily:
            raise ValueError(f"field {f.source_tag!r} must be monthly; aggregate it first")

    by_station: dict[str, list[GaugeRecord]] = {}
    seen: set[tuple[str, int, int]] = set()
    for r in gauges:
        key = (r.station_id, r.year, r.month)
        if key in seen:
            raise ValueError(f"duplicate gauge record {key}")
        seen.add(key)
        by_station.setdefault(r.station_id, []).append(r)

    time_a, time_b = field_a.time_lookup(), field_b.time_lookup()
    samples: list[Sample] = []
    skips: list[dict] = []
    for sid, recs in by_station.items():
        first = recs[0]
        if any(r.location != first.location or r.elevation_m != first.elevation_m for r in recs):
            raise ValueError(f"station {sid!r} has inconsistent location or elevation")
        if first.elevation_m is None or not math.isfinite(first.elevation_m):
            raise ValueError(f"station {sid!r} is missing elevation")
        ia, ja, da = _station_neighbors(first.location, field_a)
        ib, jb, db = _station_neighbors(first.location, field_b)
        for r in sorted(recs, key=lambda r: (r.year, r.month)):
            t = (r.year, r.month)
            reason = None
            if r.precip_mm is None:
                reason = "missing target"
            elif t not in time_a:
                reason = f"{field_a.source_tag}: month absent"
            elif t not in time_b:
                reason = f"{field_b.source_tag}: month absent"
            if reason is None:
                pa = field_a.values[time_a[t], ia, ja]
                pb = field_b.values[time_b[t], ib, jb]
                if np.isnan(pa).any():
                    reason = f"{field_a.source_tag}: missing at node"
                elif np.isnan(pb).any():
                    reason = f"{field_b.source_tag}: missing at node"
            if reason is not None:
                skips.append({"station_id": sid, "year": r.year, "month": r.month, "reason": reason})
                continue
            preds = (float(first.elevation_m), *da, *db, *map(float, pa), *map(float, pb))
            samples.append(Sample(sid, float(r.precip_mm), preds, t))

    for s in skips:
        log.debug("skipped %s %d-%02d: %s", s["station_id"], s["year"], s["month"], s["reason"])
    if not samples:
        raise NoSamples("no complete samples could be formed")
    sources = {"field_a": field_a.source_tag, "field_b": field_b.source_tag}
    return Dataset.from_samples(samples, skips=skips, sources=sources)


def _parse_float(text: str, what: str, line: int, path: str, allow_missing=False):
    text = text.strip()
    if text == "":
        if allow_missing:
            return None
        raise IngestError(f"missing {what}", line, path)
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"invalid {what} {text!r}", line, path) from None
    if not math.isfinite(value):
        raise IngestError(f"non-finite {what} {text!r}", line, path)
    return value


def _parse_int(text: str, what: str, line: int, path: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise IngestError(f"invalid {what} {text!r}", line, path) from None


def read_gauge_csv(path) -> list[GaugeRecord]:
    path = str(path)
    records = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != GAUGE_HEADER:
            raise IngestError(f"expected header {','.join(GAUGE_HEADER)}", 1, path)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(GAUGE_HEADER):
                raise IngestError(f"expected {len(GAUGE_HEADER)} fields, got {len(row)}", line, path)
            sid = row[0].strip()
            if not sid:
                raise IngestError("missing station_id", line, path)
            lat = _parse_float(row[1], "lat", line, path)
            lon = _parse_float(row[2], "lon", line, path)
            elev = _parse_float(row[3], "elevation_m", line, path, allow_missing=True)
            year = _parse_int(row[4], "year", line, path)
            month = _parse_int(row[5], "month", line, path)
            precip = _parse_float(row[6], "precip_mm", line, path, allow_missing=True)
            key = (sid, year, month)
            if key in seen:
                raise IngestError(f"duplicate record for {sid} {year}-{month:02d}", line, path)
            seen.add(key)
            try:
                records.append(GaugeRecord(sid, GeoPoint(lat, lon), elev, year, month, precip))
            except ValueError as exc:
                raise IngestError(str(exc), line, path) from None
    return records


def read_grid_csv(path, source_tag: str | None = None) -> GridField:
    """Read a long-form grid file (``lat,lon,year,month[,day],value``)."""
    path = str(path)
    tag = source_tag or Path(path).stem
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        header = tuple(h.strip() for h in header) if header else ()
        if header == ("lat", "lon", "year", "month", "value"):
            daily = False
        elif header == ("lat", "lon", "year", "month", "day", "value"):
            daily = True
        else:
            raise IngestError("expected header lat,lon,year,month[,day],value", 1, path)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line, path)
            lat = _parse_float(row[0], "lat", line, path)
            lon = _parse_float(row[1], "lon", line, path)
            t = tuple(_parse_int(v, "time", line, path) for v in row[2:-1])
            if not 1 <= t[1] <= 12:
                raise IngestError(f"month {t[1]} outside 1..12", line, path)
            value = _parse_float(row[-1], "value", line, path, allow_missing=True)
            if value is not None and value < 0:
                raise IngestError(f"negative precipitation {value}", line, path)
            rows.append((lat, lon, t, value, line))
    if not rows:
        raise IngestError("grid file has no data rows", None, path)

    lats = np.unique([r[0] for r in rows])
    lons = np.unique([r[1] for r in rows])
    times = sorted({r[2] for r in rows})
    ti = {t: i for i, t in enumerate(times)}
    values = np.full((len(times), lats.size, lons.size), np.nan)
    filled = np.zeros(values.shape, dtype=bool)
    for lat, lon, t, value, line in rows:
        k = (ti[t], np.searchsorted(lats, lat), np.searchsorted(lons, lon))
        if filled[k]:
            raise IngestError(f"duplicate grid value at ({lat}, {lon}, {t})", line, path)
        filled[k] = True
        if value is not None:
            values[k] = value
    field_ = GridField(tag, lats, lons, values, tuple(times))
    log.info("read %s: %d times, %d x %d nodes%s", tag, len(times), lats.size, lons.size,
             " (daily)" if daily else "")
    return field_
