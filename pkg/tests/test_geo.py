import json
import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanbounds.geo import (PASSTHROUGH, CellId, Fishnet, Projection, bbox_fishnet, cell_centroid,
                             cell_of, cells_of, distance, fishnet_geojson, load_boundary,
                             masked_fishnet, project, unproject)

ORIGIN0 = Projection("local_equirectangular", (0.0, 0.0))
NET = Fishnet((0.0, 0.0), 10_000.0, 10, 10)


def test_origin_maps_to_origin():
    assert project(0.0, 0.0, ORIGIN0) == (0.0, 0.0)


def test_one_degree_north():
    # R * pi / 180 evaluated by hand: 6371000 * 0.017453292519943295
    x, y = project(1.0, 0.0, ORIGIN0)
    assert x == 0.0
    assert y == pytest.approx(111194.9, abs=0.1)


def test_passthrough_identity():
    # a record with lat=y, lon=x comes back as (x, y)
    assert project(5678.0, 1234.0, PASSTHROUGH) == (1234.0, 5678.0)


def test_longitude_scaled_by_cos_lat0():
    proj = Projection("local_equirectangular", (60.0, 10.0))
    x, _ = project(60.0, 11.0, proj)
    assert x == pytest.approx(6_371_000 * math.pi / 180 * 0.5, rel=1e-12)


def test_projection_validation():
    with pytest.raises(ValueError):
        Projection("local_equirectangular", (89.5, 0.0))
    with pytest.raises(ValueError):
        Projection("mercator")


@given(st.floats(-60, 60), st.floats(-170, 170))
def test_unproject_inverts_project(lat, lon):
    proj = Projection("local_equirectangular", (45.0, 5.0))
    x, y = project(lat, lon, proj)
    la, lo = unproject(x, y, proj)
    assert la == pytest.approx(lat, abs=1e-9)
    assert lo == pytest.approx(lon, abs=1e-9)


def test_project_arrays():
    x, y = project(np.array([0.0, 1.0]), np.array([0.0, 0.0]), ORIGIN0)
    assert x.shape == (2,) and y[1] == pytest.approx(111194.93, abs=0.01)


def test_cell_of_floor():
    assert cell_of((25_300.0, 7_800.0), NET) == CellId(2, 0)


def test_cell_boundary_is_half_open():
    assert cell_of((10_000.0, 0.0), NET) == CellId(1, 0)
    assert cell_of((9_999.999, 0.0), NET) == CellId(0, 0)


def test_outside_grid():
    assert cell_of((-1.0, 5.0), NET) is None
    assert cell_of((100_000.0, 5.0), NET) is None


def test_outside_mask():
    net = Fishnet((0.0, 0.0), 10.0, 3, 3, frozenset({CellId(1, 1)}))
    assert cell_of((15.0, 15.0), net) == CellId(1, 1)
    assert cell_of((5.0, 5.0), net) is None
    col, row, inside = cells_of(np.array([15.0, 5.0]), np.array([15.0, 5.0]), net)
    assert inside.tolist() == [True, False]


def test_cell_centroid_examples():
    assert cell_centroid(CellId(0, 0), NET) == (5_000.0, 5_000.0)
    assert cell_centroid(CellId(2, 1), NET) == (25_000.0, 15_000.0)
    assert cell_centroid(CellId(0, 0), Fishnet((0.0, 0.0), 1_000.0, 1, 1)) == (500.0, 500.0)
    with pytest.raises(ValueError):
        cell_centroid(CellId(10, 0), NET)


def test_masked_square_25km():
    net = masked_fishnet(shapely.box(0, 0, 25_000, 25_000), 10_000)
    assert net.n_active() == 9


def test_masked_inside_one_cell():
    net = masked_fishnet(shapely.box(0, 0, 3_000, 2_000), 10_000)
    assert net.n_active() == 1


def test_masked_uses_square_overlap_not_centroid():
    # a thin sliver crossing the corner of a cell still activates it
    tri = shapely.Polygon([(0, 0), (25_000, 0), (0, 25_000)])
    net = masked_fishnet(tri, 10_000)
    assert CellId(1, 1) in net.active_cells()  # centroid (15k, 15k) is outside the triangle
    assert CellId(2, 2) not in net.active_cells()


def test_masked_degenerate():
    with pytest.raises(ValueError):
        masked_fishnet(shapely.Polygon([(0, 0), (1, 1), (2, 2)]), 10)


def test_masked_multipolygon():
    mp = shapely.MultiPolygon([shapely.box(0, 0, 5, 5), shapely.box(25, 25, 29, 29)])
    net = masked_fishnet(mp, 10)
    assert net.active_cells() == [CellId(0, 0), CellId(2, 2)]


def test_bbox_fishnet_covers_points():
    x = np.array([12.0, 57.0, 33.0])
    y = np.array([-8.0, 4.0, 19.0])
    net = bbox_fishnet(x, y, 10.0)
    assert net.origin == (10.0, -10.0)
    assert cells_of(x, y, net)[2].all()


@given(st.integers(0, 9), st.integers(0, 9))
def test_centroid_roundtrip(col, row):
    c = CellId(col, row)
    assert cell_of(cell_centroid(c, NET), NET) == c


@given(st.floats(0, 99_999.99), st.floats(0, 99_999.99))
def test_points_fall_in_exactly_their_square(x, y):
    c = cell_of((x, y), NET)
    assert c is not None
    x0 = c.col * 10_000.0
    y0 = c.row * 10_000.0
    assert x0 <= x < x0 + 10_000 and y0 <= y < y0 + 10_000
    # no neighbouring square claims it
    for dc in (-1, 0, 1):
        for dr in (-1, 0, 1):
            if (dc, dr) != (0, 0):
                xs, ys = (c.col + dc) * 10_000.0, (c.row + dr) * 10_000.0
                assert not (xs <= x < xs + 10_000 and ys <= y < ys + 10_000)


pts = st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))


@given(pts, pts, pts)
def test_distance_metric(a, b, c):
    assert distance(a, b) == distance(b, a) >= 0
    assert (distance(a, b) == 0) == (a == b)
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-6


def test_fishnet_dict_roundtrip():
    net = Fishnet((1.0, 2.0), 5.0, 4, 3, frozenset({CellId(0, 0), CellId(3, 2)}))
    assert Fishnet.from_dict(json.loads(json.dumps(net.to_dict()))) == net


def test_fishnet_geojson():
    net = Fishnet((0.0, 0.0), 10.0, 2, 1)
    doc = fishnet_geojson(net)
    assert doc["type"] == "FeatureCollection"
    ids = [f["properties"]["cell_id"] for f in doc["features"]]
    assert ids == ["0_0", "1_0"]
    ring = doc["features"][1]["geometry"]["coordinates"][0]
    assert shapely.Polygon(ring).equals(shapely.box(10, 0, 20, 10))


def test_load_boundary_variants(tmp_path):
    geom = {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]}
    for i, doc in enumerate([geom, {"type": "Feature", "geometry": geom, "properties": {}},
                             {"type": "FeatureCollection",
                              "features": [{"type": "Feature", "geometry": geom, "properties": {}}]}]):
        p = tmp_path / f"b{i}.geojson"
        p.write_text(json.dumps(doc))
        assert load_boundary(p).area == 1.0
    proj = Projection("local_equirectangular", (0.0, 0.0))
    g = load_boundary(tmp_path / "b0.geojson", proj)
    assert g.bounds[2] == pytest.approx(111194.93, abs=0.01)
    p = tmp_path / "line.geojson"
    p.write_text(json.dumps({"type": "LineString", "coordinates": [[0, 0], [1, 1]]}))
    with pytest.raises(ValueError):
        load_boundary(p)
