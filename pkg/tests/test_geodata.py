import calendar
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from precip_uq.geodata import (
    EARTH_RADIUS_M, PREDICTOR_NAMES, Dataset, GaugeRecord, GeoPoint, GridField, IngestError,
    NoSamples, aggregate_daily_to_monthly, build_samples, haversine_m, nearest_grid_points,
    read_gauge_csv, read_grid_csv, regrid_bilinear,
)

lat = st.floats(-90, 90)
lon = st.floats(-180, 179.999)


def field(values, lats=(0.0, 1.0), lons=(0.0, 1.0), times=((2001, 1),), tag="a"):
    return GridField(tag, np.asarray(lats, float), np.asarray(lons, float),
                     np.asarray(values, float), tuple(times))


def test_haversine_examples():
    o = GeoPoint(0, 0)
    assert haversine_m(o, o) == 0.0
    assert haversine_m(o, GeoPoint(0, 180)) == pytest.approx(20_015_086.8, abs=0.5)
    assert haversine_m(o, GeoPoint(0, 1)) == pytest.approx(111_194.93, abs=0.01)
    assert haversine_m(o, GeoPoint(0, 180)) == pytest.approx(math.pi * EARTH_RADIUS_M, rel=1e-12)


@given(lat, lon, lat, lon)
def test_haversine_symmetric_nonnegative(a1, o1, a2, o2):
    a, b = GeoPoint(a1, o1), GeoPoint(a2, o2)
    d = haversine_m(a, b)
    assert d >= 0 and d <= math.pi * EARTH_RADIUS_M * (1 + 1e-12)
    assert d == pytest.approx(haversine_m(b, a), rel=1e-12, abs=1e-6)


def test_geopoint_bounds_and_wrapping():
    assert GeoPoint(10, 180).lon == -180
    assert GeoPoint(10, 190).lon == pytest.approx(-170)
    with pytest.raises(ValueError):
        GeoPoint(91, 0)


def test_nearest_on_node_and_at_cell_centre():
    g = field(np.zeros((1, 2, 2)), lats=(-0.5, 0.5), lons=(0.0, 1.0))
    first = nearest_grid_points(GeoPoint(0.5, 1.0), g)[0]
    assert first == (1, 1, 0.0)
    nn = nearest_grid_points(GeoPoint(0.0, 0.5), g)
    assert [(i, j) for i, j, _ in nn] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len({d for *_, d in nn}) == 1


def brute_force(p, lats, lons, k):
    cand = [(haversine_m(p, GeoPoint(a, b)), i, j)
            for (i, a), (j, b) in itertools.product(enumerate(lats), enumerate(lons))]
    return [(i, j, d) for d, i, j in sorted(cand)[:k]]


@given(st.integers(2, 20), st.integers(2, 20), st.floats(0, 1), st.floats(0, 1), st.integers(1, 4))
def test_nearest_matches_exhaustive_search(nlat, nlon, u, v, k):
    lats = np.linspace(30, 30 + 0.25 * (nlat - 1), nlat)
    lons = np.linspace(-100, -100 + 0.25 * (nlon - 1), nlon)
    p = GeoPoint(lats[0] + u * (lats[-1] - lats[0]), lons[0] + v * (lons[-1] - lons[0]))
    got = nearest_grid_points(p, field(np.zeros((1, nlat, nlon)), lats, lons), k)
    assert got == brute_force(p, lats, lons, k)
    assert all(a[2] <= b[2] for a, b in zip(got, got[1:]))


def test_nearest_needs_enough_nodes():
    with pytest.raises(ValueError, match="insufficient grid"):
        nearest_grid_points(GeoPoint(0, 0), field(np.zeros((1, 1, 2)), lats=(0.0,)), 4)


def test_regrid_examples():
    const = regrid_bilinear(field(np.full((1, 2, 2), 7.5)), [0.2, 0.9], [0.1, 0.5, 1.0])
    assert np.all(const.values == 7.5)
    centre = regrid_bilinear(field([[[0.0, 1.0], [2.0, 3.0]]]), [0.5], [0.5])
    assert centre.values[0, 0, 0] == 1.5
    with pytest.raises(ValueError, match="extrapolation requested"):
        regrid_bilinear(field(np.zeros((1, 2, 2))), [1.5], [0.5])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_regrid_reproduces_affine_fields(a, b, c):
    lats, lons = np.array([10.0, 10.25, 10.5]), np.array([20.0, 20.25])
    f = a + b * lons[None, :] + c * lats[:, None]
    tl, to = np.array([10.1, 10.3, 10.5]), np.array([20.0, 20.07, 20.2])
    out = regrid_bilinear(field(f[None], lats, lons), tl, to).values[0]
    assert np.allclose(out, a + b * to[None, :] + c * tl[:, None], rtol=1e-12, atol=1e-12)


def test_regrid_onto_source_axes_is_identity(rng):
    v = rng.gamma(1.0, 3.0, (2, 4, 5))
    v[0, 1, 2] = np.nan
    g = field(v, np.arange(4.0), np.arange(5.0), ((2001, 1), (2001, 2)))
    out = regrid_bilinear(g, g.lat_axis, g.lon_axis).values
    assert np.array_equal(out, v, equal_nan=True)


def test_regrid_propagates_missing_corner():
    v = np.array([[[np.nan, 1.0], [2.0, 3.0]]])
    assert np.isnan(regrid_bilinear(field(v), [0.5], [0.5]).values[0, 0, 0])


def daily_field(values, year=2001, month=4, lats=(0.0, 1.0), lons=(0.0, 1.0)):
    times = [(year, month, d + 1) for d in range(values.shape[0])]
    return field(values, lats, lons, times)


def test_aggregation_examples():
    days = calendar.monthrange(2001, 4)[1]
    assert aggregate_daily_to_monthly(daily_field(np.ones((days, 2, 2)))).values[0, 0, 0] == 30.0
    v = np.zeros((days, 2, 2))
    v[1] = 5.0
    out = aggregate_daily_to_monthly(daily_field(v))
    assert out.time_axis == ((2001, 4),) and np.all(out.values == 5.0)
    v[7, 0, 1] = np.nan
    out = aggregate_daily_to_monthly(daily_field(v)).values[0]
    assert np.isnan(out[0, 1]) and np.count_nonzero(np.isnan(out)) == 1
    partial = aggregate_daily_to_monthly(daily_field(np.ones((days - 1, 2, 2))))
    assert np.all(np.isnan(partial.values))
    with pytest.raises(ValueError):
        aggregate_daily_to_monthly(field(np.zeros((1, 2, 2))))


def test_aggregate_and_regrid_commute(rng):
    days = 28
    lats, lons = np.array([0.0, 0.25, 0.5]), np.array([5.0, 5.25, 5.5, 5.75])
    g = daily_field(rng.gamma(0.7, 4.0, (days, 3, 4)), 2001, 2, lats, lons)
    tl, to = np.array([0.1, 0.3, 0.45]), np.array([5.05, 5.4])
    a = regrid_bilinear(aggregate_daily_to_monthly(g), tl, to).values
    b = aggregate_daily_to_monthly(regrid_bilinear(g, tl, to)).values
    assert np.allclose(a, b, rtol=1e-9, atol=0)


def gauges(stations, months, precip=1.0):
    recs = []
    for s, (la, lo, el) in stations.items():
        for y, m in months:
            recs.append(GaugeRecord(s, GeoPoint(la, lo), el, y, m, precip))
    return recs


def grid_pair(times, nan_at=None):
    lats, lons = np.array([40.0, 40.25, 40.5]), np.array([-105.0, -104.75, -104.5])
    va = np.arange(len(times) * 9, dtype=float).reshape(len(times), 3, 3)
    vb = va * 2 + 1
    if nan_at is not None:
        vb[nan_at] = np.nan
    return (GridField("A", lats, lons, va, tuple(times)),
            GridField("B", lats, lons, vb, tuple(times)))


def test_build_samples_counts_and_order():
    times = [(2001, 1), (2001, 2), (2001, 3)]
    st_ = {"north": (40.4, -104.6, 1500.0), "south": (40.1, -104.9, 1600.0)}
    ds = build_samples(gauges(st_, times[::-1]), *grid_pair(times))
    assert len(ds) == 6
    assert {k: len(v) for k, v in ds.station_index.items()} == {"north": 3, "south": 3}
    assert ds.station_ids == ("north",) * 3 + ("south",) * 3
    assert ds.times[:3] == tuple(times)
    assert ds.X.shape == (6, 17) and ds.X[0, 0] == 1500.0
    for row in ds.X:
        assert np.all(np.diff(row[1:5]) >= 0) and np.all(np.diff(row[5:9]) >= 0)
        assert np.all(row[1:9] >= 0)


def test_build_samples_predictor_values():
    times = [(2001, 1)]
    fa, fb = grid_pair(times)
    ds = build_samples(gauges({"s": (40.25, -104.75, 10.0)}, times, precip=3.5), fa, fb)
    row = ds.X[0]
    assert ds.y.tolist() == [3.5]
    assert row[1] == 0.0 and row[13] == 2 * row[9] + 1
    nn = nearest_grid_points(GeoPoint(40.25, -104.75), fa)
    assert row[9:13].tolist() == [fa.values[0, i, j] for i, j, _ in nn]
    assert dict(zip(PREDICTOR_NAMES, row))["elevation_m"] == 10.0


def test_build_samples_skips_incomplete_months():
    times = [(2001, 1), (2001, 2)]
    fa, fb = grid_pair(times, nan_at=(1, 1, 1))
    recs = gauges({"s": (40.25, -104.75, 10.0)}, times + [(2001, 3)])
    recs.append(GaugeRecord("t", GeoPoint(40.25, -104.75), 10.0, 2001, 1, None))
    ds = build_samples(recs, fa, fb)
    assert len(ds) == 1
    reasons = sorted(s["reason"] for s in ds.skips)
    assert reasons == ["A: month absent", "B: missing at node", "missing target"]


def test_build_samples_errors():
    times = [(2001, 1)]
    with pytest.raises(ValueError, match="elevation"):
        build_samples(gauges({"s": (40.25, -104.75, None)}, times), *grid_pair(times))
    with pytest.raises(NoSamples):
        build_samples(gauges({"s": (40.25, -104.75, 1.0)}, [(1999, 1)]), *grid_pair(times))


def test_build_samples_is_deterministic(tmp_path):
    times = [(2001, 1), (2001, 2)]
    st_ = {"a": (40.3, -104.7, 1.0), "b": (40.2, -104.8, 2.0)}
    paths = []
    for k in range(2):
        p = tmp_path / f"ds{k}.jsonl"
        build_samples(gauges(st_, times), *grid_pair(times)).save(p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    back = Dataset.load(paths[0])
    assert np.array_equal(back.X, build_samples(gauges(st_, times), *grid_pair(times)).X)
    assert back.station_index == {"a": (0, 1), "b": (2, 3)}


def test_read_gauge_csv(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("station_id,lat,lon,elevation_m,year,month,precip_mm\n"
                 "s1,40.1,-104.9,1500,2001,1,12.5\n"
                 "s1,40.1,-104.9,1500,2001,2,\n")
    recs = read_gauge_csv(p)
    assert [r.precip_mm for r in recs] == [12.5, None]
    p.write_text("station_id,lat,lon,elevation_m,year,month,precip_mm\n"
                 "s1,40.1,-104.9,1500,2001,1,12.5\n"
                 "s1,40.1,-104.9,1500,2001,2,-3\n")
    with pytest.raises(IngestError) as err:
        read_gauge_csv(p)
    assert err.value.line == 3


def test_read_grid_csv(tmp_path):
    p = tmp_path / "grid.csv"
    rows = ["lat,lon,year,month,value"]
    for la, lo in itertools.product((1.0, 0.0), (0.0, 1.0)):
        rows.append(f"{la},{lo},2001,1,{la * 10 + lo}")
    p.write_text("\n".join(rows) + "\n")
    g = read_grid_csv(p, "A")
    assert g.values[0].tolist() == [[0.0, 1.0], [10.0, 11.0]]
    p.write_text("lat,lon,year,month,day,value\n0,0,2001,1,1,1.0\n0,0,2001,1,1,2.0\n")
    with pytest.raises(IngestError, match="duplicate") as err:
        read_grid_csv(p)
    assert err.value.line == 3
