"""Planar projection, distances and fishnet tessellation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import shapely
from shapely.geometry import box, shape

EARTH_RADIUS = 6_371_000.0
OUTSIDE = None


class CellId(NamedTuple):
    col: int
    row: int


@dataclass(frozen=True)
class Projection:
    """``passthrough`` treats lat/lon as already projected (y, x) meters."""

    kind: str = "local_equirectangular"
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("passthrough", "local_equirectangular"):
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind == "local_equirectangular" and not abs(self.origin[0]) < 89:
            raise ValueError("local_equirectangular needs |lat0| < 89")


PASSTHROUGH = Projection("passthrough")


def project(lat, lon, proj: Projection):
    """Map (lat, lon) to planar (x, y) meters. Works on scalars and arrays.

    For ``passthrough`` the inputs are returned as ``(lon, lat)`` so that a
    record carrying ``lat=y, lon=x`` comes back as ``(x, y)``.
    """
    if proj.kind == "passthrough":
        return lon, lat
    lat0, lon0 = proj.origin
    k = math.pi / 180.0
    x = EARTH_RADIUS * (np.asarray(lon, dtype=float) - lon0) * k * math.cos(lat0 * k)
    y = EARTH_RADIUS * (np.asarray(lat, dtype=float) - lat0) * k
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def unproject(x, y, proj: Projection):
    """Inverse of :func:`project`; returns ``(lat, lon)``."""
    if proj.kind == "passthrough":
        return y, x
    lat0, lon0 = proj.origin
    k = math.pi / 180.0
    lon = lon0 + np.asarray(x, dtype=float) / (EARTH_RADIUS * math.cos(lat0 * k) * k)
    lat = lat0 + np.asarray(y, dtype=float) / (EARTH_RADIUS * k)
    return lat, lon


def distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class Fishnet:
    """Regular square grid. Cells are half-open ``[x0+k*s, x0+(k+1)*s)``.

    ``mask`` holds the active cells as a frozenset of :class:`CellId`; ``None``
    means every grid cell is active.
    """

    origin: tuple[float, float]
    cell_size: float
    n_cols: int
    n_rows: int
    mask: Optional[frozenset] = None

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("fishnet needs at least one row and column")
        if self.mask is not None:
            for c in self.mask:
                if not (0 <= c.col < self.n_cols and 0 <= c.row < self.n_rows):
                    raise ValueError(f"mask cell {c} outside grid")

    @property
    def key(self) -> tuple:
        return (self.origin, self.cell_size, self.n_cols, self.n_rows)

    def is_active(self, cell: CellId) -> bool:
        if not (0 <= cell.col < self.n_cols and 0 <= cell.row < self.n_rows):
            return False
        return self.mask is None or cell in self.mask

    def active_cells(self) -> list[CellId]:
        if self.mask is not None:
            return sorted(self.mask)
        return [CellId(c, r) for c in range(self.n_cols) for r in range(self.n_rows)]

    def n_active(self) -> int:
        return len(self.mask) if self.mask is not None else self.n_cols * self.n_rows

    def active_array(self) -> np.ndarray:
        """Boolean (n_cols, n_rows) array of active cells."""
        if self.mask is None:
            return np.ones((self.n_cols, self.n_rows), dtype=bool)
        arr = np.zeros((self.n_cols, self.n_rows), dtype=bool)
        for c in self.mask:
            arr[c.col, c.row] = True
        return arr

    def to_dict(self) -> dict:
        d = {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
            "mask": None if self.mask is None else [list(c) for c in sorted(self.mask)],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Fishnet":
        mask = d.get("mask")
        return cls(
            origin=(float(d["origin"][0]), float(d["origin"][1])),
            cell_size=float(d["cell_size"]),
            n_cols=int(d["n_cols"]),
            n_rows=int(d["n_rows"]),
            mask=None if mask is None else frozenset(CellId(int(c), int(r)) for c, r in mask),
        )


def cell_of(point, net: Fishnet) -> Optional[CellId]:
    """Cell containing ``point``, or ``OUTSIDE`` (None)."""
    col = math.floor((point[0] - net.origin[0]) / net.cell_size)
    row = math.floor((point[1] - net.origin[1]) / net.cell_size)
    cell = CellId(col, row)
    return cell if net.is_active(cell) else OUTSIDE


def cells_of(x: np.ndarray, y: np.ndarray, net: Fishnet):
    """Vectorised :func:`cell_of`: returns (col, row, inside) arrays."""
    col = np.floor((np.asarray(x, dtype=float) - net.origin[0]) / net.cell_size)
    row = np.floor((np.asarray(y, dtype=float) - net.origin[1]) / net.cell_size)
    inside = (col >= 0) & (col < net.n_cols) & (row >= 0) & (row < net.n_rows)
    col = np.where(inside, col, 0).astype(np.int64)
    row = np.where(inside, row, 0).astype(np.int64)
    if net.mask is not None:
        inside &= net.active_array()[col, row]
    return col, row, inside


def cell_centroid(cell: CellId, net: Fishnet) -> tuple[float, float]:
    if not (0 <= cell.col < net.n_cols and 0 <= cell.row < net.n_rows):
        raise ValueError(f"cell {tuple(cell)} outside the {net.n_cols}x{net.n_rows} grid")
    s = net.cell_size
    return (net.origin[0] + (cell.col + 0.5) * s, net.origin[1] + (cell.row + 0.5) * s)


def cell_square(cell: CellId, net: Fishnet):
    s = net.cell_size
    x0 = net.origin[0] + cell.col * s
    y0 = net.origin[1] + cell.row * s
    return box(x0, y0, x0 + s, y0 + s)


def bbox_fishnet(x: np.ndarray, y: np.ndarray, cell_size: float) -> Fishnet:
    """Unmasked grid covering the points, origin snapped to multiples of cell_size."""
    if len(x) == 0:
        raise ValueError("cannot build a fishnet over zero points")
    x0 = math.floor(float(np.min(x)) / cell_size) * cell_size
    y0 = math.floor(float(np.min(y)) / cell_size) * cell_size
    n_cols = int(math.floor((float(np.max(x)) - x0) / cell_size)) + 1
    n_rows = int(math.floor((float(np.max(y)) - y0) / cell_size)) + 1
    return Fishnet((x0, y0), float(cell_size), n_cols, n_rows)


def masked_fishnet(boundary, cell_size: float) -> Fishnet:
    """Grid over the boundary's bounding box keeping cells whose square
    overlaps the polygon interior (coastal cells with partial land count)."""
    if boundary.is_empty or boundary.area <= 0:
        raise ValueError("degenerate boundary polygon (zero area)")
    minx, miny, maxx, maxy = boundary.bounds
    n_cols = max(1, math.ceil((maxx - minx) / cell_size))
    n_rows = max(1, math.ceil((maxy - miny) / cell_size))
    cols, rows = np.meshgrid(np.arange(n_cols), np.arange(n_rows), indexing="ij")
    cols, rows = cols.ravel(), rows.ravel()
    x0 = minx + cols * cell_size
    y0 = miny + rows * cell_size
    squares = shapely.box(x0, y0, x0 + cell_size, y0 + cell_size)
    shapely.prepare(boundary)
    hit = shapely.intersects(boundary, squares) & ~shapely.touches(boundary, squares)
    mask = frozenset(CellId(int(c), int(r)) for c, r in zip(cols[hit], rows[hit]))
    return Fishnet((minx, miny), float(cell_size), n_cols, n_rows, mask)


def load_boundary(path, proj: Optional[Projection] = None):
    """Read a GeoJSON Polygon/MultiPolygon (bare geometry, Feature or
    FeatureCollection). With ``proj`` the coordinates are lon/lat and get
    projected; otherwise they are taken as planar meters."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") == "FeatureCollection":
        geoms = [shape(f["geometry"]) for f in doc["features"]]
        geom = shapely.union_all(geoms)
    elif doc.get("type") == "Feature":
        geom = shape(doc["geometry"])
    else:
        geom = shape(doc)
    if geom.geom_type not in ("Polygon", "MultiPolygon"):
        raise ValueError(f"boundary must be a Polygon or MultiPolygon, got {geom.geom_type}")
    if proj is not None and proj.kind != "passthrough":
        geom = shapely.transform(geom, lambda c: np.column_stack(project(c[:, 1], c[:, 0], proj)))
    return geom


def fishnet_geojson(net: Fishnet, properties: Optional[dict] = None) -> dict:
    """FeatureCollection of active cell squares. ``properties`` maps CellId to
    extra feature properties; when given only those cells are emitted."""
    cells = sorted(properties) if properties is not None else net.active_cells()
    feats = []
    for c in cells:
        sq = cell_square(c, net)
        props = {"cell_id": f"{c.col}_{c.row}", "col": c.col, "row": c.row}
        if properties is not None:
            props.update(properties[c])
        feats.append({
            "type": "Feature",
            "properties": props,
            "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in sq.exterior.coords]]},
        })
    return {"type": "FeatureCollection", "features": feats}
