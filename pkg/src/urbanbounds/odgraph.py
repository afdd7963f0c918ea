"""Origin-destination graphs over fishnet cells."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .geo import CellId, Fishnet, cell_centroid, cells_of
from .mobility import DisplacementArrays


@dataclass(frozen=True)
class RangeFilter:
    """``min_d`` inclusive, ``max_d`` exclusive; either may be None."""

    min_d: Optional[float] = None
    max_d: Optional[float] = None

    def __post_init__(self):
        if self.min_d is not None and self.max_d is not None and not self.min_d < self.max_d:
            raise ValueError("RangeFilter needs min_d < max_d")

    def mask(self, d: np.ndarray) -> np.ndarray:
        keep = np.ones(len(d), dtype=bool)
        if self.min_d is not None:
            keep &= d >= self.min_d
        if self.max_d is not None:
            keep &= d < self.max_d
        return keep

    @property
    def tag(self) -> str:
        fmt = lambda v: f"{v:g}"
        if self.min_d is None and self.max_d is None:
            return "all"
        if self.min_d is None:
            return f"lt{fmt(self.max_d)}"
        if self.max_d is None:
            return f"ge{fmt(self.min_d)}"
        return f"{fmt(self.min_d)}-{fmt(self.max_d)}"

    @classmethod
    def parse(cls, text: str) -> "RangeFilter":
        """Accepts ``all``, ``<4000``, ``>4000``, ``>=4000``, ``4000-10000``,
        and the tags produced by :attr:`tag`. ``k``/``km`` suffixes mean km."""
        s = text.strip().lower().replace(" ", "")

        def num(v):
            if v.endswith("km"):
                return float(v[:-2]) * 1000.0
            if v.endswith("k"):
                return float(v[:-1]) * 1000.0
            return float(v)

        if s in ("all", "none", ""):
            return cls()
        for p in (">=", ">", "ge"):
            if s.startswith(p):
                return cls(min_d=num(s[len(p):]))
        for p in ("<", "lt"):
            if s.startswith(p):
                return cls(max_d=num(s[len(p):]))
        if "-" in s:
            a, b = s.split("-", 1)
            return cls(num(a), num(b))
        raise ValueError(f"cannot parse range filter {text!r}")


@dataclass(frozen=True, eq=False)
class OdGraph:
    """Weighted graph over cells.

    ``nodes`` is sorted; ``src``/``dst`` index into it and are sorted by
    (src, dst). Undirected graphs store each pair once with ``src <= dst``.
    ``grid`` is the owning fishnet's key (or None when unknown).
    """

    nodes: tuple
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    directed: bool = True
    grid: Optional[tuple] = None

    @classmethod
    def from_edges(cls, edges: dict, directed: bool = True, grid=None) -> "OdGraph":
        """Build from ``{(from_cell, to_cell): weight}``; zero weights dropped."""
        acc: dict = {}
        for (a, b), w in edges.items():
            if w == 0:
                continue
            a, b = CellId(*a), CellId(*b)
            if not directed and b < a:
                a, b = b, a
            acc[(a, b)] = acc.get((a, b), 0) + w
        nodes = tuple(sorted({c for k in acc for c in k}))
        pos = {c: i for i, c in enumerate(nodes)}
        items = sorted((pos[a], pos[b], w) for (a, b), w in acc.items())
        src = np.array([i for i, _, _ in items], dtype=np.int64)
        dst = np.array([j for _, j, _ in items], dtype=np.int64)
        wt = np.array([w for _, _, w in items], dtype=float)
        return cls(nodes, src, dst, wt, directed, grid)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> dict:
        return {(self.nodes[a], self.nodes[b]): _num(w)
                for a, b, w in zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist())}

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def scaled(self, c: float) -> "OdGraph":
        return OdGraph(self.nodes, self.src, self.dst, self.weight * c, self.directed, self.grid)

    def directed_arrays(self):
        """(src, dst, weight) with undirected pairs expanded both ways
        (self-loops once)."""
        if self.directed:
            return self.src, self.dst, self.weight
        off = self.src != self.dst
        return (np.concatenate((self.src, self.dst[off])),
                np.concatenate((self.dst, self.src[off])),
                np.concatenate((self.weight, self.weight[off])))

    def __eq__(self, other):
        return (isinstance(other, OdGraph) and self.nodes == other.nodes
                and self.directed == other.directed and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst) and np.array_equal(self.weight, other.weight))


def _num(w):
    return int(w) if float(w).is_integer() else w


@dataclass
class BuildReport:
    input: int = 0
    dropped_range: int = 0
    dropped_outside: int = 0
    kept: int = 0

    def to_dict(self) -> dict:
        return {"input": self.input, "dropped_range": self.dropped_range,
                "dropped_outside": self.dropped_outside, "kept": self.kept}


def build_od(disp, net: Fishnet, filt: RangeFilter = RangeFilter(), directed: bool = True):
    """Count displacements per (origin cell, destination cell).

    ``disp`` is a :class:`DisplacementArrays` or a sequence of
    :class:`Displacement`. Returns ``(OdGraph, BuildReport)``.
    """
    if not isinstance(disp, DisplacementArrays):
        disp = list(disp)
        arr = lambda f: np.array([f(v) for v in disp], dtype=float)
        disp = DisplacementArrays(np.zeros(len(disp), dtype=np.int64),
                                  arr(lambda v: v.src[0]), arr(lambda v: v.src[1]),
                                  arr(lambda v: v.dst[0]), arr(lambda v: v.dst[1]),
                                  arr(lambda v: v.d))
    rep = BuildReport(input=len(disp))
    inr = filt.mask(disp.d)
    rep.dropped_range = int((~inr).sum())
    c0, r0, in0 = cells_of(disp.x0, disp.y0, net)
    c1, r1, in1 = cells_of(disp.x1, disp.y1, net)
    ok = inr & in0 & in1
    rep.dropped_outside = int((inr & ~(in0 & in1)).sum())
    rep.kept = int(ok.sum())
    return _tally(c0[ok], r0[ok], c1[ok], r1[ok], net, directed), rep


def _tally(c0, r0, c1, r1, net, directed):
    # flat key sorted by (col, row) matches CellId ordering
    a = c0 * net.n_rows + r0
    b = c1 * net.n_rows + r1
    if not directed:
        a, b = np.minimum(a, b), np.maximum(a, b)
    if len(a) == 0:
        return OdGraph((), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), directed, net.key)
    pair = a * (net.n_cols * net.n_rows) + b
    upair, counts = np.unique(pair, return_counts=True)
    ua, ub = upair // (net.n_cols * net.n_rows), upair % (net.n_cols * net.n_rows)
    nodes_flat = np.unique(np.concatenate((ua, ub)))
    nodes = tuple(CellId(int(f // net.n_rows), int(f % net.n_rows)) for f in nodes_flat)
    src = np.searchsorted(nodes_flat, ua)
    dst = np.searchsorted(nodes_flat, ub)
    return OdGraph(nodes, src.astype(np.int64), dst.astype(np.int64), counts.astype(float),
                   directed, net.key)


def merge(graphs: Iterable[OdGraph]) -> OdGraph:
    graphs = list(graphs)
    if not graphs:
        raise ValueError("merge needs at least one graph")
    directed = graphs[0].directed
    grids = {g.grid for g in graphs if g.grid is not None}
    if any(g.directed != directed for g in graphs) or len(grids) > 1:
        raise ValueError("cannot merge graphs with different fishnets or directedness")
    acc: dict = {}
    for g in graphs:
        for k, w in g.edges.items():
            acc[k] = acc.get(k, 0) + w
    return OdGraph.from_edges(acc, directed, grids.pop() if grids else None)


def flow_export(graph: OdGraph, net: Fishnet) -> list[tuple]:
    """Rows ``(from_x, from_y, to_x, to_y, weight)`` ordered by (from, to)."""
    rows = []
    for a, b, w in zip(graph.src.tolist(), graph.dst.tolist(), graph.weight.tolist()):
        fx, fy = cell_centroid(graph.nodes[a], net)
        tx, ty = cell_centroid(graph.nodes[b], net)
        rows.append((fx, fy, tx, ty, _num(w)))
    return rows


def flows_csv(graph: OdGraph, net: Fishnet) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["from_col", "from_row", "to_col", "to_row", "from_x", "from_y", "to_x", "to_y", "weight"])
    for (a, b), row in zip(zip(graph.src.tolist(), graph.dst.tolist()), flow_export(graph, net)):
        fa, fb = graph.nodes[a], graph.nodes[b]
        w.writerow([fa.col, fa.row, fb.col, fb.row, *(repr(v) for v in row[:4]), row[4]])
    return out.getvalue()


def edges_csv(graph: OdGraph) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["from_col", "from_row", "to_col", "to_row", "weight"])
    for a, b, wt in zip(graph.src.tolist(), graph.dst.tolist(), graph.weight.tolist()):
        fa, fb = graph.nodes[a], graph.nodes[b]
        w.writerow([fa.col, fa.row, fb.col, fb.row, _num(wt)])
    return out.getvalue()


def read_edges_csv(fh, directed: bool = True, grid=None) -> OdGraph:
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, newline="") as f:
            return read_edges_csv(f, directed, grid)
    rd = csv.DictReader(fh)
    edges: dict = {}
    for row in rd:
        a = CellId(int(row["from_col"]), int(row["from_row"]))
        b = CellId(int(row["to_col"]), int(row["to_row"]))
        edges[(a, b)] = edges.get((a, b), 0) + float(row["weight"])
    return OdGraph.from_edges(edges, directed, grid)
