"""Synthetic corpora: bounded power-law walkers anchored to planted cities.

Each agent starts near a home city. Every step is either an intra-city jump
(length from a power law on [d_min, d_max], isotropic direction, redrawn
until it stays inside the anchor city's catchment disc) or, with probability
``inter_city_prob``, a relocation to a Gaussian point around another city,
which then becomes the anchor. Agents are generated in blocks; block ``b``
draws from ``numpy.random.default_rng([seed, 1, b])`` so blocks can be
produced independently and concatenated.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .geo import Fishnet, Projection, cell_centroid, unproject
from .mapeq import Partition

DAY = 86400.0
BLOCK = 1024
MAX_SPEED = 100.0  # m/s ceiling for clean agents, well under the 240 m/s rule


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_cities: int = 6
    city_centers: Optional[tuple] = None
    city_spacing: float = 80_000.0
    city_sigma: float = 8_000.0
    catchment_radius: Optional[float] = None
    n_agents: int = 1000
    steps_per_agent: int = 50
    alpha_intra: float = 1.6
    d_min: float = 100.0
    d_max: float = 20_000.0
    inter_city_prob: float = 0.03
    residency_days: tuple = (45.0, 180.0)
    short_stay_days: tuple = (2.0, 20.0)
    speed_violator_rate: float = 0.0
    short_stay_rate: float = 0.0
    duplicate_rate: float = 0.0
    geocoded_rate: float = 0.0
    t0: float = 1_401_580_800.0
    origin: tuple = (54.0, -2.0)

    def __post_init__(self):
        for name in ("inter_city_prob", "speed_violator_rate", "short_stay_rate",
                     "duplicate_rate", "geocoded_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.speed_violator_rate + self.short_stay_rate > 1:
            raise ValueError("corruption rates exceed 1")
        if not self.alpha_intra > 1:
            raise ValueError("alpha_intra must exceed 1")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.n_cities < 1 or self.n_agents < 0 or self.steps_per_agent < 1:
            raise ValueError("need n_cities >= 1, n_agents >= 0, steps_per_agent >= 1")
        if self.d_max > self.radius:
            raise ValueError("d_max must not exceed the catchment radius")
        c = self.centers
        if len(c) != self.n_cities:
            raise ValueError("city_centers length must equal n_cities")
        for i in range(len(c)):
            for j in range(i):
                if math.dist(c[i], c[j]) < 2 * self.radius:
                    raise ValueError("city catchment discs overlap; increase spacing")

    @property
    def radius(self) -> float:
        return self.catchment_radius if self.catchment_radius is not None else 3.0 * self.city_sigma

    @property
    def centers(self) -> np.ndarray:
        if self.city_centers is not None:
            return np.asarray(self.city_centers, dtype=float).reshape(-1, 2)
        cols = math.ceil(math.sqrt(self.n_cities))
        return np.array([((i % cols) * self.city_spacing, (i // cols) * self.city_spacing)
                         for i in range(self.n_cities)], dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["city_centers"] = self.centers.tolist()
        return d


@dataclass
class GroundTruth:
    home: dict
    speed_violators: list
    short_stay: list
    n_duplicates: int
    n_geocoded: int
    n_steps: int
    n_inter_city: int
    records_per_agent: int
    params: dict
    # clean-agent displacement endpoints (x0, y0, x1, y1, inter flag); not serialised
    clean_moves: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("clean_moves")
        return d

    def od_tally(self, net: Fishnet, min_d: Optional[float] = None,
                 max_d: Optional[float] = None) -> dict:
        """Planted ``{(from_cell, to_cell): count}`` over clean agents' moves."""
        mv = self.clean_moves
        d = np.hypot(mv[:, 2] - mv[:, 0], mv[:, 3] - mv[:, 1])
        keep = np.ones(len(mv), dtype=bool)
        if min_d is not None:
            keep &= d >= min_d
        if max_d is not None:
            keep &= d < max_d
        s = net.cell_size
        out: dict = {}
        for x0, y0, x1, y1 in mv[keep, :4].tolist():
            a = (math.floor((x0 - net.origin[0]) / s), math.floor((y0 - net.origin[1]) / s))
            b = (math.floor((x1 - net.origin[0]) / s), math.floor((y1 - net.origin[1]) / s))
            out[(a, b)] = out.get((a, b), 0) + 1
        return out


def _disc_gauss(rng, centers, sigma, radius):
    """Gaussian points around each center, redrawn until inside the disc."""
    pts = centers + rng.normal(0.0, sigma, centers.shape)
    bad = np.hypot(*(pts - centers).T) > radius
    while bad.any():
        pts[bad] = centers[bad] + rng.normal(0.0, sigma, (int(bad.sum()), 2))
        bad = np.hypot(*(pts - centers).T) > radius
    return pts


def _power_lengths(rng, n, alpha, lo, hi):
    u = rng.random(n)
    a = 1.0 - alpha
    return (lo ** a + u * (hi ** a - lo ** a)) ** (1.0 / a)


def _walk_block(rng, k, cfg: SynthConfig, centers):
    """Positions (k, S+1, 2), inter-city flags (k, S) and home cities (k,)."""
    S = cfg.steps_per_agent
    R = cfg.radius
    nc = len(centers)
    home = rng.integers(0, nc, k)
    anchor = home.copy()
    pos = np.empty((k, S + 1, 2))
    inter = np.zeros((k, S), dtype=bool)
    cur = _disc_gauss(rng, centers[anchor], cfg.city_sigma, R)
    pos[:, 0] = cur
    for s in range(S):
        jump = (rng.random(k) < cfg.inter_city_prob) if nc > 1 else np.zeros(k, dtype=bool)
        lengths = _power_lengths(rng, k, cfg.alpha_intra, cfg.d_min, cfg.d_max)
        theta = rng.uniform(0.0, 2 * math.pi, k)
        nxt = cur + lengths[:, None] * np.column_stack((np.cos(theta), np.sin(theta)))
        c = centers[anchor]
        bad = (np.hypot(*(nxt - c).T) > R) & ~jump
        for _ in range(32):
            if not bad.any():
                break
            th = rng.uniform(0.0, 2 * math.pi, int(bad.sum()))
            nxt[bad] = cur[bad] + lengths[bad, None] * np.column_stack((np.cos(th), np.sin(th)))
            bad = (np.hypot(*(nxt - c).T) > R) & ~jump
        if bad.any():
            # head straight for the centre; |r - L| <= R since r, L <= R
            v = c[bad] - cur[bad]
            nv = np.hypot(*v.T)
            nv[nv == 0] = 1.0
            nxt[bad] = cur[bad] + lengths[bad, None] * v / nv[:, None]
        if jump.any():
            shift = rng.integers(1, max(nc, 2), int(jump.sum()))
            anchor[jump] = (anchor[jump] + shift) % nc
            nxt[jump] = _disc_gauss(rng, centers[anchor[jump]], cfg.city_sigma, R)
        inter[:, s] = jump
        pos[:, s + 1] = nxt
        cur = nxt
    return pos, inter, home


def _times(rng, pos, spans_days, violate, t0):
    """Integer timestamps: each interval is at least d / MAX_SPEED + 2 s, the
    total span is fixed per agent; ``violate`` agents get one zero interval."""
    k, S1, _ = pos.shape
    d = np.hypot(*(np.diff(pos, axis=1)).transpose(2, 0, 1))
    min_dt = d / MAX_SPEED + 2.0
    base = rng.exponential(1.0, d.shape)
    room = np.maximum(spans_days * DAY - min_dt.sum(axis=1), 0.0)
    dt = min_dt + base / base.sum(axis=1, keepdims=True) * room[:, None]
    if violate.any():
        j = rng.integers(0, S1 - 1, k)
        rows = np.flatnonzero(violate)
        dt[rows, j[rows]] = 0.0
    start = t0 + rng.uniform(0.0, 30 * DAY, k)
    t = np.concatenate((start[:, None], start[:, None] + np.cumsum(dt, axis=1)), axis=1)
    return np.floor(t)


def generate(cfg: SynthConfig, coords: str = "wgs84"):
    """Return ``(csv_text, GroundTruth)``. ``coords='projected'`` writes
    ``x``/``y`` columns in meters instead of lat/lon."""
    centers = cfg.centers
    top = np.random.default_rng([cfg.seed, 0])
    n = cfg.n_agents
    perm = top.permutation(n)
    n_speed = int(round(cfg.speed_violator_rate * n))
    n_short = int(round(cfg.short_stay_rate * n))
    speed_set = set(perm[:n_speed].tolist())
    short_set = set(perm[n_speed:n_speed + n_short].tolist())
    ids = [f"a{i:07d}" for i in range(n)]
    proj = Projection("local_equirectangular", tuple(cfg.origin))

    cols = {"uid": [], "x": [], "y": [], "t": [], "src": []}
    moves = []
    home_map = {}
    n_steps = n_inter = n_dup = n_geo = 0
    for b0 in range(0, n, BLOCK):
        k = min(BLOCK, n - b0)
        rng = np.random.default_rng([cfg.seed, 1, b0 // BLOCK])
        pos, inter, home = _walk_block(rng, k, cfg, centers)
        idx = np.arange(b0, b0 + k)
        is_speed = np.array([i in speed_set for i in idx.tolist()], dtype=bool)
        is_short = np.array([i in short_set for i in idx.tolist()], dtype=bool)
        spans = np.where(is_short, rng.uniform(*cfg.short_stay_days, k),
                         rng.uniform(*cfg.residency_days, k))
        t = _times(rng, pos, spans, is_speed, cfg.t0)
        n_steps += inter.size
        n_inter += int(inter.sum())
        clean = ~(is_speed | is_short)
        for i in range(k):
            home_map[ids[idx[i]]] = int(home[i])
        cp = pos[clean]
        moves.append(np.concatenate((cp[:, :-1], cp[:, 1:], inter[clean][..., None]), axis=2).reshape(-1, 5))

        S1 = pos.shape[1]
        uid = np.repeat(idx, S1)
        x, y, tt = pos[..., 0].ravel(), pos[..., 1].ravel(), t.ravel()
        src = np.zeros(len(x), dtype=np.int8)
        dup = rng.random(len(x)) < cfg.duplicate_rate
        geo = rng.random(len(x)) < cfg.geocoded_rate
        n_dup += int(dup.sum())
        n_geo += int(geo.sum())
        # duplicates repeat the record; geocoded extras sit 500 m off
        rep = 1 + dup.astype(np.int64)
        uid_r, x_r, y_r, t_r = (np.repeat(a, rep) for a in (uid, x, y, tt))
        src_r = np.zeros(len(x_r), dtype=np.int8)
        gx = x[geo] + 500.0
        cols["uid"] += [uid_r, uid[geo]]
        cols["x"] += [x_r, gx]
        cols["y"] += [y_r, y[geo]]
        cols["t"] += [t_r, tt[geo]]
        cols["src"] += [src_r, np.ones(int(geo.sum()), dtype=np.int8)]

    truth = GroundTruth(
        home=home_map,
        speed_violators=sorted(ids[i] for i in speed_set),
        short_stay=sorted(ids[i] for i in short_set),
        n_duplicates=n_dup, n_geocoded=n_geo, n_steps=n_steps, n_inter_city=n_inter,
        records_per_agent=cfg.steps_per_agent + 1,
        params={"alpha_intra": cfg.alpha_intra, "d_min": cfg.d_min, "d_max": cfg.d_max,
                "inter_city_prob": cfg.inter_city_prob, "city_centers": centers.tolist()},
        clean_moves=np.concatenate(moves) if moves else np.zeros((0, 5)),
    )
    if n == 0:
        header = "user_id,x,y,t,source\n" if coords == "projected" else "user_id,lat,lon,t,source\n"
        return header, truth

    cat = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((np.arange(len(cat["t"])), cat["t"]))
    uid, x, y, tt, src = (cat[k][order] for k in ("uid", "x", "y", "t", "src"))
    buf = io.StringIO()
    names = ("gps", "geocoded")
    if coords == "projected":
        buf.write("user_id,x,y,t,source\n")
        a, b = x, y
    else:
        buf.write("user_id,lat,lon,t,source\n")
        a, b = unproject(x, y, proj)
    buf.writelines(f"{ids[u]},{p!r},{q!r},{int(s)},{names[c]}\n"
                   for u, p, q, s, c in zip(uid.tolist(), a.tolist(), b.tolist(),
                                            tt.tolist(), src.tolist()))
    return buf.getvalue(), truth


def planted_partition(cfg: SynthConfig, net: Fishnet, nodes=None) -> Partition:
    """Label cells (all active cells, or ``nodes``) by nearest city centre."""
    cells = list(nodes) if nodes is not None else net.active_cells()
    centers = cfg.centers
    labels = []
    for c in cells:
        cx, cy = cell_centroid(c, net)
        d = np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)
        labels.append(int(np.argmin(d)))
    return Partition.from_labels(cells, labels)


def write_truth(truth: GroundTruth, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
