"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import io
import json
import math
import os
import time

import numpy as np
import pytest

from conftest import make_graph, random_strong_graph
from test_mapeq import oracle_codelength
from test_mobility import rg_bruteforce, sample_bounded_power, sample_tpl, traj
from urbanbounds import gravity, synth
from urbanbounds.geo import Fishnet, Projection, load_boundary, masked_fishnet
from urbanbounds.ingest import FilterConfig, filter_records, filter_residency, filter_speed, parse_records
from urbanbounds.mapeq import (Partition, brute_force_optimum, codelength, optimize, partition_nmi,
                               read_partition_csv, walker_rates)
from urbanbounds.mobility import INF, fit_distribution, radius_of_gyration
from urbanbounds.odgraph import read_edges_csv
from urbanbounds.pipeline import PipelineConfig, run_pipeline

DAY = 86400.0
RANGES = ("all", "<4000", ">=4000", ">=10000")


def _corpus(path, **kw):
    cfg = synth.SynthConfig(**kw)
    text, truth = synth.generate(cfg)
    path.write_text(text)
    return cfg, truth


def _pipeline(tmp, src, name, **kw):
    cfg = PipelineConfig(input=(str(src),), origin_lat=54.0, origin_lon=-2.0, ranges=RANGES,
                         out=str(tmp / name), **kw)
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg)
    return manifest, time.perf_counter() - t0


@pytest.fixture(scope="module")
def six_cities(tmp_path_factory):
    """Six planted cities, 10^4 agents, 3% inter-city moves, through the full pipeline."""
    tmp = tmp_path_factory.mktemp("six")
    cfg, _ = _corpus(tmp / "rec.csv", seed=0, n_cities=6, n_agents=10_000, inter_city_prob=0.03)
    manifest, secs = _pipeline(tmp, tmp / "rec.csv", "run")
    return cfg, tmp / "run", manifest, secs


def test_1_map_equation_correctness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    hits = oracle_ok = 0
    for _ in range(100):
        g = random_strong_graph(rng, int(rng.integers(2, 9)))
        r = walker_rates(g, tau=0)
        L = optimize(g, r, seed=0, restarts=20)[1].total_bits
        bpart, bbr = brute_force_optimum(g, r)
        hits += abs(L - bbr.total_bits) <= 1e-9
        oracle_ok += abs(oracle_codelength(g, bpart.labels.tolist(), r) - bbr.total_bits) <= 1e-9
    g = make_graph({(0, 1): 1, (1, 0): 1})
    r = walker_rates(g, tau=0)
    one = codelength(g, Partition.from_labels(g.nodes, [0, 0]), r).total_bits
    two = codelength(g, Partition.from_labels(g.nodes, [0, 1]), r).total_bits
    secs = time.perf_counter() - t0
    ok = hits >= 95 and oracle_ok == 100 and abs(one - 1) < 1e-12 and abs(two - 3) < 1e-12 and secs < 60
    acceptance(1, ok, f"{hits}/100 match brute force, oracle {oracle_ok}/100, "
                      f"2-cycle {one:.12g}/{two:.12g} bits, {secs:.1f} s")
    assert ok


def test_2_planted_recovery(six_cities, acceptance):
    cfg, run, manifest, secs = six_cities
    net = Fishnet.from_dict(json.loads((run / "fishnet.json").read_text()))
    part = read_partition_csv(run / "range_all" / "partition.csv")
    nmi = partition_nmi(part, synth.planted_partition(cfg, net, part.nodes))
    ok = nmi >= 0.9 and secs < 120
    acceptance(2, ok, f"NMI {nmi:.4f} with {part.m} modules, pipeline {secs:.1f} s (4 ranges)")
    assert ok


def test_3_gyration_oracle(acceptance):
    rng = np.random.default_rng(3)
    worst = worst_inv = 0.0
    for _ in range(1000):
        xy = rng.normal(0, rng.uniform(10, 1e5), (int(rng.integers(1, 60)), 2)) + rng.uniform(-1e6, 1e6, 2)
        want = rg_bruteforce(xy.tolist())
        got = radius_of_gyration(traj(xy))
        worst = max(worst, abs(got - want) / want if want else abs(got))
        th = rng.uniform(0, 2 * math.pi)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        moved = xy @ rot.T + rng.uniform(-1e5, 1e5, 2)
        got2 = radius_of_gyration(traj(moved))
        worst_inv = max(worst_inv, abs(got2 - got) / got if got else abs(got2))
    ok = worst < 1e-9 and worst_inv < 1e-9
    acceptance(3, ok, f"max rel err {worst:.2e} vs brute force, {worst_inv:.2e} under rigid motion")
    assert ok


def test_4_fit_recovery(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    lam = fit_distribution(rng.exponential(100.0, 100_000), "exponential", (0, INF)).params["lambda"]
    a_pl = fit_distribution(sample_bounded_power(rng, 100_000, 3.2, 70_000), "power_law",
                            (70_000, INF)).params["alpha"]
    tpl = fit_distribution(sample_tpl(rng, 100_000, 1.24, 0.00132, 1.0), "truncated_power_law",
                           (1.0, INF)).params
    secs = time.perf_counter() - t0
    ok = (0.0098 <= lam <= 0.0102 and 3.1 <= a_pl <= 3.3 and 1.19 <= tpl["alpha"] <= 1.29
          and 0.0012 <= tpl["lambda"] <= 0.0015 and secs < 30)
    acceptance(4, ok, f"lambda {lam:.5f}, alpha {a_pl:.3f}, tpl alpha {tpl['alpha']:.3f} "
                      f"lambda {tpl['lambda']:.5f}, {secs:.1f} s")
    assert ok


def test_5_filter_conformance(acceptance):
    cfg = synth.SynthConfig(seed=5, n_agents=3000, steps_per_agent=20, speed_violator_rate=0.04,
                            short_stay_rate=0.06, duplicate_rate=0.01, geocoded_rate=0.02)
    text, truth = synth.generate(cfg)
    table, errs = parse_records(io.StringIO(text))
    trajs, rep = filter_records(table, FilterConfig(), Projection("local_equirectangular", cfg.origin))
    got = (rep.dropped_geocoded, rep.dropped_duplicate, rep.dropped_speed, rep.dropped_residency)
    want = (truth.n_geocoded, truth.n_duplicates, len(truth.speed_violators), len(truth.short_stay))
    kept_240 = filter_speed(_timed([(0, 0, 0), (240_000, 0, 1000)]))[0]
    drop_30 = not filter_residency(_timed([(0, 0, 0), (0, 0, 30 * DAY)]), 30.0)
    ok = errs == 0 and got == want and kept_240 and drop_30 and len(trajs) == rep.retained_users
    acceptance(5, ok, f"drops geo/dup/speed/residency {got} vs planted {want}; "
                      f"240 m/s kept {kept_240}, 30.0 d dropped {drop_30}")
    assert ok


def _timed(rows):
    from urbanbounds.ingest import Trajectory
    a = np.asarray(rows, dtype=float)
    return Trajectory("u", a[:, 2], a[:, 0], a[:, 1])


def _forward(summ, k, beta, noise, rng):
    obs = {}
    for a in summ:
        for b in summ:
            if a.region < b.region:
                t = k * a.mass * b.mass / math.dist(a.centroid, b.centroid) ** beta
                obs[(a.region, b.region)] = t * (math.exp(rng.normal(0, noise)) if noise else 1.0)
    return obs


def test_6_gravity_closed_loop(acceptance):
    rng = np.random.default_rng(6)
    summ = [gravity.RegionSummary(i, float(rng.uniform(100, 10_000)),
                                  tuple(rng.uniform(0, 500_000, 2).tolist())) for i in range(18)]
    obs = _forward(summ, 2.5, 0.8, 0.1, rng)
    noisy = gravity.fit_gravity(summ, obs, 0.8)
    clean = gravity.fit_gravity(summ, _forward(summ, 2.5, 0.8, 0.0, rng), 0.8)
    # independent route: with unit slope, log k is the mean log ratio of observed to model
    logs = [math.log(t * math.dist(summ[i].centroid, summ[j].centroid) ** 0.8 / (summ[i].mass * summ[j].mass))
            for (i, j), t in obs.items()]
    k_oracle = math.exp(sum(logs) / len(logs))
    ok = (abs(noisy.k - 2.5) <= 0.25 and noisy.r_squared >= 0.95 and clean.r_squared >= 1 - 1e-9
          and abs(noisy.k - k_oracle) <= 1e-9 * k_oracle)
    acceptance(6, ok, f"18 regions: k {noisy.k:.4f} (oracle {k_oracle:.4f}), r2 {noisy.r_squared:.4f}; "
                      f"noise-free r2 {clean.r_squared:.12f}")
    assert ok


def test_7_coarsening(tmp_path, acceptance):
    # compact cities keep intra-city steps short; relocations supply the long regime
    rows, ok = [], True
    for seed in (0, 1, 2):
        src = tmp_path / f"rec{seed}.csv"
        _corpus(src, seed=seed, n_cities=6, n_agents=10_000, inter_city_prob=0.03,
                city_sigma=4_000.0, d_max=12_000.0)
        manifest, _ = _pipeline(tmp_path, src, f"run{seed}")
        s = {row["range"]: row for row in manifest["summary"]}
        m = [s[t]["n_modules"] for t in ("ge10000", "ge4000", "lt4000")]
        L = [s[t]["codelength_bits"] for t in ("lt4000", "ge4000", "ge10000")]
        ok &= m[0] <= m[1] <= m[2] and L[0] < L[1] < L[2]
        rows.append(f"seed {seed}: modules {m[0]}<={m[1]}<={m[2]}, "
                    f"L {L[0]:.3f}<{L[1]:.3f}<{L[2]:.3f}")
    acceptance(7, ok, "; ".join(rows))
    assert ok


def test_8_determinism_and_scale(tmp_path, acceptance):
    _corpus(tmp_path / "rec.csv", seed=8, n_agents=1500, steps_per_agent=30)
    _pipeline(tmp_path, tmp_path / "rec.csv", "a", seed=3)
    _pipeline(tmp_path, tmp_path / "rec.csv", "b", seed=3)
    same = (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    g = read_edges_csv(tmp_path / "a" / "range_all" / "edges.csv")
    p1, b1 = optimize(g, walker_rates(g), seed=3, restarts=10)
    g7 = g.scaled(7)
    p7, b7 = optimize(g7, walker_rates(g7), seed=3, restarts=10)
    dL = abs(b1.total_bits - b7.total_bits)
    ok = same and p1 == p7 and dL <= 1e-9
    acceptance(8, ok, f"manifests identical {same}; x7 weights: same partition {p1 == p7}, |dL| {dL:.1e}")
    assert ok


@pytest.mark.slow
def test_9_throughput(tmp_path, acceptance):
    _, truth = _corpus(tmp_path / "rec.csv", seed=9, n_agents=10_000, steps_per_agent=99,
                       duplicate_rate=0.005)
    n_rec = sum(1 for _ in open(tmp_path / "rec.csv")) - 1
    manifest, secs = _pipeline(tmp_path, tmp_path / "rec.csv", "run")
    single = sorted(p.name for p in tmp_path.iterdir() if p.name != "rec.csv") == ["run"]
    ok = n_rec >= 1_000_000 and secs < 60 and single and (tmp_path / "run" / "manifest.json").exists()
    acceptance(9, ok, f"{n_rec} records in {secs:.1f} s on {os.cpu_count()} cores, "
                      f"{len(manifest['artifacts'])} artifacts in one manifest")
    assert ok


def test_10_gb_fishnet(acceptance):
    path = os.environ.get("URBANBOUNDS_GB_BOUNDARY")
    if not path or not os.path.exists(path):
        acceptance(10, None, "no boundary file (set URBANBOUNDS_GB_BOUNDARY)")
        pytest.skip("GB boundary polygon not available")
    net = masked_fishnet(load_boundary(path, Projection("local_equirectangular", (54.0, -2.0))), 10_000.0)
    n = net.n_active()
    ok = abs(n - 2784) <= 0.02 * 2784
    acceptance(10, ok, f"{n} active 10 km cells (target 2784 +/- 2%)")
    assert ok
