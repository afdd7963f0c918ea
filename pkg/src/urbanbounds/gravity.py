"""Gravity-model check of delineated regions: T_ij = k P_i P_j / d_ij^beta."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .geo import Fishnet, cell_centroid
from .mapeq import Partition
from .odgraph import OdGraph

log = logging.getLogger(__name__)


class GravityError(ValueError):
    pass


@dataclass
class RegionSummary:
    region: int
    mass: float
    centroid: tuple


@dataclass
class GravityFit:
    beta: float
    k: float
    r_squared: float
    p_value: float
    n_pairs: int
    excluded_pairs: list = field(default_factory=list)
    free_slope: float = math.nan
    pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "k": self.k, "r_squared": self.r_squared,
                "p_value": self.p_value, "n_pairs": self.n_pairs,
                "excluded_pairs": [list(p) for p in self.excluded_pairs],
                "free_slope": self.free_slope}


def _labels_for(graph: OdGraph, partition: Partition) -> np.ndarray:
    if partition.nodes == graph.nodes:
        return partition.labels
    amap = partition.assignment
    try:
        return np.array([amap[v] for v in graph.nodes], dtype=np.int64)
    except KeyError as e:
        raise GravityError(f"partition does not cover node {e.args[0]}") from None


def summarize_regions(graph: OdGraph, partition: Partition, net: Fishnet) -> list[RegionSummary]:
    """Mass = in + out flow of member cells (self-loops once); centroid is
    the mass-weighted mean of member cell centroids."""
    labels = _labels_for(graph, partition)
    n = graph.n
    loop = graph.src == graph.dst
    strength = (np.bincount(graph.src, graph.weight, n) + np.bincount(graph.dst, graph.weight, n)
                - np.bincount(graph.src[loop], graph.weight[loop], n))
    cx = np.array([cell_centroid(c, net)[0] for c in graph.nodes])
    cy = np.array([cell_centroid(c, net)[1] for c in graph.nodes])
    m = int(labels.max()) + 1 if n else 0
    mass = np.bincount(labels, strength, m)
    sx = np.bincount(labels, strength * cx, m)
    sy = np.bincount(labels, strength * cy, m)
    out = []
    for i in range(m):
        if mass[i] > 0:
            out.append(RegionSummary(i, float(mass[i]), (float(sx[i] / mass[i]), float(sy[i] / mass[i]))))
    return out


def observed_interactions(graph: OdGraph, partition: Partition) -> dict:
    """Symmetrised inter-region flow ``{(i, j): T}`` with i < j and T > 0."""
    labels = _labels_for(graph, partition)
    if len(set(labels.tolist())) < 2:
        raise GravityError("need at least two regions")
    a, b = labels[graph.src], labels[graph.dst]
    cross = a != b
    lo, hi = np.minimum(a, b)[cross], np.maximum(a, b)[cross]
    acc: dict = {}
    for i, j, w in zip(lo.tolist(), hi.tolist(), graph.weight[cross].tolist()):
        acc[(i, j)] = acc.get((i, j), 0.0) + w
    return {k: v for k, v in sorted(acc.items()) if v > 0}


def fit_gravity(summaries, observations: dict, beta: float = 0.8) -> GravityFit:
    """Intercept-only least squares of ln T on ln(P_i P_j / d^beta)."""
    reg = {s.region: s for s in summaries}
    rows, excluded = [], []
    for (i, j), T in sorted(observations.items()):
        if i not in reg or j not in reg or T <= 0:
            excluded.append((i, j))
            continue
        si, sj = reg[i], reg[j]
        d = math.hypot(si.centroid[0] - sj.centroid[0], si.centroid[1] - sj.centroid[1])
        if d == 0 or si.mass <= 0 or sj.mass <= 0:
            log.warning("gravity: excluding pair %s (zero distance or mass)", (i, j))
            excluded.append((i, j))
            continue
        rows.append((i, j, d, si.mass, sj.mass, T))
    if len(rows) < 3:
        raise GravityError(f"need at least 3 usable region pairs, have {len(rows)}")
    arr = np.array([r[2:] for r in rows])
    d, pi, pj, T = arr.T
    x = np.log(pi) + np.log(pj) - beta * np.log(d)
    y = np.log(T)
    lnk = float(np.mean(y - x))
    est = lnk + x
    if np.ptp(est) == 0 or np.ptp(y) == 0:
        r, p = (1.0, 0.0) if np.allclose(y, est) else (0.0, 1.0)
    else:
        r, p = stats.pearsonr(y, est)
    slope = float(np.polyfit(x, y, 1)[0]) if np.ptp(x) > 0 else math.nan
    pairs = [(i, j, dd, a, b, t, math.exp(e)) for (i, j, dd, a, b, t), e in zip(rows, est.tolist())]
    return GravityFit(beta, math.exp(lnk), min(1.0, float(r) ** 2), float(p), len(rows),
                      excluded, slope, pairs)


def beta_sweep(summaries, observations, betas) -> list[tuple[float, float]]:
    return [(float(b), fit_gravity(summaries, observations, b).r_squared) for b in betas]


def pairs_csv(fit: GravityFit) -> str:
    out = io.StringIO()
    out.write("i,j,d,P_i,P_j,T_obs,T_est\n")
    for i, j, d, a, b, t, e in fit.pairs:
        out.write(f"{i},{j},{d!r},{a!r},{b!r},{t!r},{e!r}\n")
    return out.getvalue()
