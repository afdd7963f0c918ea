"""Two-level map equation: random-walker rates, codelength and a greedy
Infomap-style search for the minimum-codelength partition.

Codelength bookkeeping (all logs base 2, 0 log 0 = 0)::

    exit_i  = flow on links leaving module i
              (+ teleport mass leaving i when teleportation is recorded)
    q       = sum_i exit_i
    L       = q H(exit_i / q) + sum_i rate_i H({exit_i, p_v : v in i} / rate_i)
    rate_i  = exit_i + sum_{v in i} p_v

Link flow is ``p_u (1 - tau) w_uv / out_u``; dangling nodes only teleport.
"""
from __future__ import annotations

import heapq
import logging
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from .odgraph import OdGraph

log = logging.getLogger(__name__)

MOVE_EPS = 1e-10
TIE_EPS = 1e-12
ZERO_FLOW = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class WalkerRates:
    nodes: tuple
    visit: np.ndarray
    teleport_prob: float
    teleport_weights: np.ndarray
    recorded: bool = False
    self_links: bool = False
    iterations: int = 0

    @property
    def visit_map(self) -> dict:
        return dict(zip(self.nodes, self.visit.tolist()))


@dataclass(frozen=True, eq=False)
class Partition:
    """Dense module labels aligned with ``nodes``."""

    nodes: tuple
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.nodes):
            raise ValueError("partition must label every node exactly once")

    @classmethod
    def from_labels(cls, nodes, labels) -> "Partition":
        """Relabel to 0..m-1 in order of first appearance."""
        seen: dict = {}
        dense = np.array([seen.setdefault(int(v), len(seen)) for v in labels], dtype=np.int64)
        return cls(tuple(nodes), dense)

    @classmethod
    def from_assignment(cls, nodes, assignment: dict) -> "Partition":
        missing = [v for v in nodes if v not in assignment]
        if missing:
            raise ValueError(f"partition does not cover node {missing[0]}")
        return cls.from_labels(nodes, [assignment[v] for v in nodes])

    @property
    def assignment(self) -> dict:
        return dict(zip(self.nodes, self.labels.tolist()))

    @property
    def m(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def modules(self) -> list[list]:
        out = [[] for _ in range(self.m)]
        for v, k in zip(self.nodes, self.labels.tolist()):
            out[k].append(v)
        return out

    def __eq__(self, other):
        return (isinstance(other, Partition) and self.nodes == other.nodes
                and np.array_equal(self.labels, other.labels))


@dataclass
class CodelengthBreakdown:
    total_bits: float
    index_bits: float
    module_bits: float
    module_terms: list
    exit_rates: list
    q: float

    def to_dict(self) -> dict:
        return {"total_bits": self.total_bits, "index_bits": self.index_bits,
                "module_bits": self.module_bits, "q": self.q,
                "modules": [{"module": i, "exit": e, "bits": b}
                            for i, (e, b) in enumerate(zip(self.exit_rates, self.module_terms))]}


def walker_rates(graph: OdGraph, tau: float = 0.15, teleport: str = "in_strength",
                 recorded: bool = False, self_links: bool = False, tol: float = 1e-12,
                 max_iter: int = 100_000) -> WalkerRates:
    """Stationary visit rates of the teleporting random walker.

    Iterates ``p' = tau w + (1 - tau)(p T + d(p) w)`` where ``d(p)`` is the
    mass on dangling nodes. With ``tau == 0`` the lazy chain ``(p + p')/2`` is
    iterated instead: same fixed point, but it also converges on periodic
    graphs.
    """
    n = graph.n
    if n == 0:
        raise ValueError("walker_rates needs a non-empty graph")
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    src, dst, w = _links(graph, self_links)
    out = np.bincount(src, w, n)
    if teleport == "uniform":
        tw = np.full(n, 1.0 / n)
    elif teleport == "in_strength":
        ins = np.bincount(dst, w, n)
        tw = ins / ins.sum() if ins.sum() > 0 else np.full(n, 1.0 / n)
    else:
        raise ValueError(f"unknown teleport mode {teleport!r}")
    dangling = out == 0
    share = w / out[src]
    T = sparse.csr_matrix((share, (dst, src)), shape=(n, n))  # transposed: p' = T @ p
    p = np.full(n, 1.0 / n)
    lazy = tau == 0
    res = math.inf
    for it in range(1, max_iter + 1):
        nxt = tau * tw + (1 - tau) * (T @ p + p[dangling].sum() * tw)
        if lazy:
            nxt = 0.5 * (p + nxt)
        nxt /= nxt.sum()
        res = float(np.abs(nxt - p).sum())
        p = nxt
        if res < tol:
            break
    else:
        raise ConvergenceError(f"walker rates did not converge in {max_iter} iterations "
                               f"(residual {res:.3g})", res)
    if tau == 1:
        p = tw.copy()
    return WalkerRates(graph.nodes, p, float(tau), tw, recorded, self_links, it)


def _links(graph: OdGraph, self_links: bool):
    src, dst, w = graph.directed_arrays()
    if not self_links:
        keep = src != dst
        src, dst, w = src[keep], dst[keep], w[keep]
    return src, dst, w


# -- flow network ------------------------------------------------------------

@dataclass
class _Flow:
    """Flow view of a graph (or of an aggregated level)."""

    p: np.ndarray         # node visit rates
    src: np.ndarray       # links incl. self-loops
    dst: np.ndarray
    f: np.ndarray         # link flow
    tmass: np.ndarray     # teleport mass leaving each node
    tw: np.ndarray        # teleport target weight
    recorded: bool

    @property
    def n(self):
        return len(self.p)


def _flow(graph: OdGraph, rates: WalkerRates) -> _Flow:
    src, dst, w = _links(graph, rates.self_links)
    n = graph.n
    out = np.bincount(src, w, n)
    p = rates.visit
    f = p[src] * (1.0 - rates.teleport_prob) * w / out[src]
    tau_node = np.where(out > 0, rates.teleport_prob, 1.0)
    return _Flow(p, src, dst, f, p * tau_node, rates.teleport_weights, rates.recorded)


def _exits(fl: _Flow, labels: np.ndarray, m: int) -> np.ndarray:
    cross = labels[fl.src] != labels[fl.dst]
    ex = np.bincount(labels[fl.src[cross]], fl.f[cross], m)
    if fl.recorded:
        ex = ex + np.bincount(labels, fl.tmass, m) * (1.0 - np.bincount(labels, fl.tw, m))
    return np.maximum(ex, 0.0)


def _h_terms(x: np.ndarray, total: float) -> float:
    """-sum x log2(x / total) over positive x."""
    x = x[x > 0]
    if total <= 0 or len(x) == 0:
        return 0.0
    return float(-np.sum(x * np.log2(x / total)))


def codelength(graph: OdGraph, partition: Partition, rates: WalkerRates) -> CodelengthBreakdown:
    if partition.nodes != graph.nodes:
        pos = {v: i for i, v in enumerate(partition.nodes)}
        missing = [v for v in graph.nodes if v not in pos]
        if missing:
            raise ValueError(f"partition does not cover node {missing[0]}")
        labels = Partition.from_labels(graph.nodes, [partition.labels[pos[v]] for v in graph.nodes]).labels
    else:
        labels = partition.labels
    fl = _flow(graph, rates)
    m = int(labels.max()) + 1
    ex = _exits(fl, labels, m)
    q = float(ex.sum())
    index = _h_terms(ex, q)
    terms = []
    for i in range(m):
        pv = fl.p[labels == i]
        rate = ex[i] + float(pv.sum())
        terms.append(_h_terms(np.concatenate(([ex[i]], pv)), rate))
    module = float(sum(terms))
    return CodelengthBreakdown(index + module, index, module, terms, ex.tolist(), q)


def _plogp(x: float) -> float:
    return x * math.log2(x) if x > 0 else 0.0


# -- optimisation ------------------------------------------------------------

class _Level:
    """Adjacency-list form of a flow network for the local-move loop."""

    def __init__(self, fl: _Flow):
        n = fl.n
        self.n = n
        self.p = fl.p.tolist()
        self.tm = fl.tmass.tolist()
        self.tw = fl.tw.tolist()
        self.recorded = fl.recorded
        self.out_f = np.bincount(fl.src, fl.f, n).tolist()
        loop = fl.src == fl.dst
        self.self_f = np.bincount(fl.src[loop], fl.f[loop], n).tolist()
        self.out_adj = [[] for _ in range(n)]
        self.in_adj = [[] for _ in range(n)]
        for a, b, f in zip(fl.src[~loop].tolist(), fl.dst[~loop].tolist(), fl.f[~loop].tolist()):
            self.out_adj[a].append((b, f))
            self.in_adj[b].append((a, f))
        self.fl = fl


def _aggregate(fl: _Flow, labels: np.ndarray) -> _Flow:
    m = int(labels.max()) + 1
    a, b = labels[fl.src], labels[fl.dst]
    key = a * m + b
    uk, inv = np.unique(key, return_inverse=True)
    f = np.bincount(inv, fl.f, len(uk))
    return _Flow(np.bincount(labels, fl.p, m), uk // m, uk % m, f,
                 np.bincount(labels, fl.tmass, m), np.bincount(labels, fl.tw, m), fl.recorded)


def _local_moves(lv: _Level, init: Optional[np.ndarray], rng: random.Random) -> np.ndarray:
    n = lv.n
    p, tm, tw, out_f, self_f = lv.p, lv.tm, lv.tw, lv.out_f, lv.self_f
    rec = lv.recorded
    mod = list(range(n)) if init is None else [int(v) for v in init]
    size = [0] * n
    m_flow, m_out, m_int, m_tm, m_tw = [0.0] * n, [0.0] * n, [0.0] * n, [0.0] * n, [0.0] * n
    for v in range(n):
        k = mod[v]
        size[k] += 1
        m_flow[k] += p[v]
        m_out[k] += out_f[v]
        m_tm[k] += tm[v]
        m_tw[k] += tw[v]
        m_int[k] += self_f[v]
        for u, f in lv.out_adj[v]:
            if mod[u] == k:
                m_int[k] += f

    def exit_of(out, internal, tmass, tweight):
        e = out - internal
        if rec:
            e += tmass * (1.0 - tweight)
        return e if e > 0 else 0.0

    ex = [exit_of(m_out[k], m_int[k], m_tm[k], m_tw[k]) if size[k] else 0.0 for k in range(n)]
    sum_exit = sum(ex)
    empty = [k for k in range(n) if size[k] == 0]
    heapq.heapify(empty)

    order = list(range(n))
    for _sweep in range(1000):
        rng.shuffle(order)
        moved = 0
        for v in order:
            a = mod[v]
            to_m: dict = {}
            from_m: dict = {}
            for u, f in lv.out_adj[v]:
                k = mod[u]
                to_m[k] = to_m.get(k, 0.0) + f
            for u, f in lv.in_adj[v]:
                k = mod[u]
                from_m[k] = from_m.get(k, 0.0) + f
            cands = set(to_m) | set(from_m)
            cands.discard(a)
            while empty and size[empty[0]] != 0:
                heapq.heappop(empty)
            if size[a] > 1 and empty:
                cands.add(empty[0])
            if not cands:
                continue
            pv, ov, sv, tmv, twv = p[v], out_f[v], self_f[v], tm[v], tw[v]
            # module a without v
            if size[a] == 1:
                fa, ea = 0.0, 0.0
                oa = ia = tma = twa = 0.0
            else:
                fa = m_flow[a] - pv
                oa = m_out[a] - ov
                ia = m_int[a] - (to_m.get(a, 0.0) + from_m.get(a, 0.0) + sv)
                tma = m_tm[a] - tmv
                twa = m_tw[a] - twv
                ea = exit_of(oa, ia, tma, twa)
            ea_old = ex[a]
            base_a = (-2.0 * (_plogp(ea) - _plogp(ea_old))
                      + _plogp(ea + fa) - _plogp(ea_old + m_flow[a]))
            best_d, best_k, best_state = -MOVE_EPS, -1, None
            for b in sorted(cands):
                eb_old = ex[b]
                fb = m_flow[b] + pv
                ob = m_out[b] + ov
                ib = m_int[b] + to_m.get(b, 0.0) + from_m.get(b, 0.0) + sv
                tmb = m_tm[b] + tmv
                twb = m_tw[b] + twv
                eb = exit_of(ob, ib, tmb, twb)
                s_new = sum_exit - ea_old - eb_old + ea + eb
                d = (_plogp(s_new) - _plogp(sum_exit) + base_a
                     - 2.0 * (_plogp(eb) - _plogp(eb_old))
                     + _plogp(eb + fb) - _plogp(eb_old + m_flow[b]))
                if d < best_d - TIE_EPS or (best_k < 0 and d < best_d):
                    best_d, best_k, best_state = d, b, (fb, ob, ib, tmb, twb, eb, s_new)
            if best_k < 0:
                continue
            b = best_k
            fb, ob, ib, tmb, twb, eb, s_new = best_state
            m_flow[a], m_out[a], m_int[a], m_tm[a], m_tw[a], ex[a] = fa, oa, ia, tma, twa, ea
            m_flow[b], m_out[b], m_int[b], m_tm[b], m_tw[b], ex[b] = fb, ob, ib, tmb, twb, eb
            size[a] -= 1
            size[b] += 1
            if size[a] == 0:
                heapq.heappush(empty, a)
            mod[v] = b
            sum_exit = s_new
            moved += 1
        if moved == 0:
            break
    return Partition.from_labels(range(n), mod).labels


def _eval(fl: _Flow, labels: np.ndarray, node_term: float) -> float:
    m = int(labels.max()) + 1
    ex = _exits(fl, labels, m)
    flow = np.bincount(labels, fl.p, m)
    return (_plogp(float(ex.sum())) - 2.0 * sum(_plogp(e) for e in ex.tolist())
            - node_term + sum(_plogp(e + f) for e, f in zip(ex.tolist(), flow.tolist())))


def _coarsen(base: _Flow, labels: np.ndarray, rng: random.Random) -> np.ndarray:
    while True:
        sup = _aggregate(base, labels)
        if sup.n == 1:
            return labels
        sl = _local_moves(_Level(sup), None, rng)
        if int(sl.max()) + 1 == sup.n:
            return labels
        labels = sl[labels]


def _one_run(base: _Flow, lv: _Level, node_term: float, seed_key: str):
    rng = random.Random(seed_key)
    labels = _local_moves(lv, None, rng)
    labels = _coarsen(base, labels, rng)
    L = _eval(base, labels, node_term)
    for _ in range(100):  # fine-tune from the current modules until no gain
        new = _local_moves(lv, labels, rng)
        new = _coarsen(base, new, rng)
        Ln = _eval(base, new, node_term)
        if not Ln < L - MOVE_EPS:
            break
        labels, L = new, Ln
    return L, labels


def _run_restart(args):
    graph, rates, seed_key = args
    base = _flow(graph, rates)
    node_term = sum(_plogp(x) for x in base.p.tolist())
    return _one_run(base, _Level(base), node_term, seed_key)


def optimize(graph: OdGraph, rates: WalkerRates, seed: int = 0, restarts: int = 10,
             threads: int = 1):
    """Greedy map-equation minimisation, best of ``restarts`` seeded runs.

    Each run does shuffled sweeps of single-node moves to the neighbouring
    module with the largest codelength decrease (ties: lowest module id),
    aggregates modules into super-nodes and repeats, then fine-tunes from the
    resulting modules until no improvement is left. Returns
    ``(Partition, CodelengthBreakdown)``.
    """
    n = graph.n
    if n == 0:
        raise ValueError("optimize needs a non-empty graph")
    base = _flow(graph, rates)
    node_term = sum(_plogp(x) for x in base.p.tolist())
    keys = [f"{seed}:{r}" for r in range(max(1, restarts))]
    if threads > 1 and len(keys) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(_run_restart, [(graph, rates, k) for k in keys]))
    else:
        lv = _Level(base)
        runs = [_one_run(base, lv, node_term, k) for k in keys]
    best_L, best = runs[0]
    for L, labels in runs[1:]:
        if L < best_L - TIE_EPS:
            best_L, best = L, labels
    one = np.zeros(n, dtype=np.int64)
    if _eval(base, one, node_term) < best_L - TIE_EPS:
        best = one
    best = _attach_zero_flow(graph, base, best)
    part = Partition.from_labels(graph.nodes, best)
    return part, codelength(graph, part, rates)


def _attach_zero_flow(graph: OdGraph, base: _Flow, labels: np.ndarray) -> np.ndarray:
    """Nodes with zero visit rate cannot change the codelength and would stay
    as singletons; put each in the module it shares most link weight with.
    Rates at the walker's convergence tolerance count as zero."""
    zero = base.p <= ZERO_FLOW
    if not zero.any():
        return labels
    labels = labels.copy()
    src, dst, w = graph.directed_arrays()
    for _ in range(graph.n):
        changed = False
        for v in np.flatnonzero(zero).tolist():
            acc: dict = {}
            for u, wt in zip(np.concatenate((dst[src == v], src[dst == v])).tolist(),
                             np.concatenate((w[src == v], w[dst == v])).tolist()):
                if u != v and not zero[u]:
                    acc[int(labels[u])] = acc.get(int(labels[u]), 0.0) + wt
            if acc:
                k = min(acc, key=lambda k: (-acc[k], k))
                labels[v] = k
                zero[v] = False
                changed = True
        if not changed:
            break
    return labels


# -- exhaustive oracle -------------------------------------------------------

def set_partitions(n: int) -> np.ndarray:
    """All set partitions of n items as restricted growth strings (Bell(n) rows)."""
    rows = np.zeros((1, 1), dtype=np.int8)
    for _ in range(1, n):
        mx = rows.max(axis=1)
        reps = (mx + 2).astype(np.int64)
        base = np.repeat(rows, reps, axis=0)
        last = np.concatenate([np.arange(r) for r in reps]).astype(np.int8)
        rows = np.column_stack((base, last))
    return rows if n > 0 else np.zeros((1, 0), dtype=np.int8)


def brute_force_optimum(graph: OdGraph, rates: WalkerRates, max_nodes: int = 12,
                        chunk: int = 20_000):
    """Exhaustive minimum of the codelength over every set partition."""
    n = graph.n
    if n > max_nodes:
        raise ValueError(f"brute force limited to {max_nodes} nodes, graph has {n}")
    if n == 0:
        raise ValueError("empty graph")
    fl = _flow(graph, rates)
    F = np.zeros((n, n))
    np.add.at(F, (fl.src, fl.dst), fl.f)
    outf = F.sum(axis=1)
    allp = set_partitions(n)
    best_L, best_row = math.inf, None
    for s in range(0, len(allp), chunk):
        lab = allp[s:s + chunk].astype(np.int64)
        M = np.zeros((len(lab), n, n))
        M[np.arange(len(lab))[:, None], np.arange(n)[None, :], lab] = 1.0
        flow = np.einsum("bvk,v->bk", M, fl.p)
        out = np.einsum("bvk,v->bk", M, outf)
        internal = np.einsum("bvk,vu,buk->bk", M, F, M)
        ex = out - internal
        if fl.recorded:
            ex += np.einsum("bvk,v->bk", M, fl.tmass) * (1.0 - np.einsum("bvk,v->bk", M, fl.tw))
        ex = np.maximum(ex, 0.0)
        q = ex.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            index = -np.where(ex > 0, ex * np.log2(ex / q), 0.0).sum(axis=1)
            rate = ex + flow
            mod_exit = -np.where(ex > 0, ex * np.log2(ex / rate), 0.0).sum(axis=1)
            r_node = np.take_along_axis(rate, lab, axis=1)
            pv = fl.p[None, :]
            mod_node = -np.where(pv > 0, pv * np.log2(pv / r_node), 0.0).sum(axis=1)
        L = index + mod_exit + mod_node
        i = int(np.argmin(L))
        if L[i] < best_L - TIE_EPS:
            best_L, best_row = float(L[i]), lab[i]
    part = Partition.from_labels(graph.nodes, best_row)
    return part, codelength(graph, part, rates)


# -- comparison and export ---------------------------------------------------

def partition_nmi(a: Partition, b) -> float:
    """Normalised mutual information over the nodes of ``a``. ``b`` may be a
    Partition or a node -> label mapping."""
    from sklearn.metrics import normalized_mutual_info_score

    bmap = b.assignment if isinstance(b, Partition) else b
    return float(normalized_mutual_info_score([int(x) for x in a.labels],
                                              [bmap[v] for v in a.nodes]))


def partition_csv(part: Partition) -> str:
    lines = ["col,row,module"] + [f"{c.col},{c.row},{k}" for c, k in
                                  zip(part.nodes, part.labels.tolist())]
    return "\n".join(lines) + "\n"


def read_partition_csv(path) -> Partition:
    from .geo import CellId

    import csv
    with open(path, newline="") as fh:
        rows = [(CellId(int(r["col"]), int(r["row"])), int(r["module"])) for r in csv.DictReader(fh)]
    return Partition.from_labels([c for c, _ in rows], [k for _, k in rows])
