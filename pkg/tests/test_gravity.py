import io
import logging
import math

import numpy as np
import pytest

from conftest import make_graph
from urbanbounds import synth
from urbanbounds.geo import CellId, Fishnet, bbox_fishnet
from urbanbounds.gravity import (GravityError, RegionSummary, beta_sweep, fit_gravity,
                                 observed_interactions, pairs_csv, summarize_regions)
from urbanbounds.ingest import filter_records, parse_records
from urbanbounds.mapeq import Partition
from urbanbounds.mobility import displacement_arrays
from urbanbounds.odgraph import build_od

NET = Fishnet((0.0, 0.0), 10.0, 10, 1)


def regions(rng, n=16, spread=100_000.0):
    return [RegionSummary(i, float(rng.uniform(50, 5000)), tuple(rng.uniform(0, spread, 2).tolist()))
            for i in range(n)]


def forward(summ, k, beta, noise=0.0, rng=None):
    obs = {}
    for a in summ:
        for b in summ:
            if a.region < b.region:
                d = math.dist(a.centroid, b.centroid)
                t = k * a.mass * b.mass / d ** beta
                if noise:
                    t *= math.exp(rng.normal(0, noise))
                obs[(a.region, b.region)] = t
    return obs


def test_mass_whole_graph_hand_count():
    g = make_graph({(0, 1): 3, (1, 2): 2, (2, 2): 4})
    summ = summarize_regions(g, Partition.from_labels(g.nodes, [0, 0, 0]), NET)
    assert summ[0].mass == 2 * 9 - 4 == 14


def test_mass_single_self_loop():
    g = make_graph({(0, 0): 5})
    assert summarize_regions(g, Partition.from_labels(g.nodes, [0]), NET)[0].mass == 5


def test_symmetric_regions():
    g = make_graph({(0, 1): 2, (1, 0): 2, (1, 2): 1, (2, 1): 1, (2, 3): 2, (3, 2): 2})
    a, b = summarize_regions(g, Partition.from_labels(g.nodes, [0, 0, 1, 1]), NET)
    assert a.mass == b.mass
    mid = 20.0
    assert a.centroid[0] - mid == pytest.approx(mid - b.centroid[0])
    assert a.centroid[1] == b.centroid[1] == 5.0


def test_centroid_is_flow_weighted():
    g = make_graph({(0, 1): 3, (1, 1): 1})
    (s,) = summarize_regions(g, Partition.from_labels(g.nodes, [0, 0]), NET)
    # strengths: cell0 = 3, cell1 = 3 + 1
    assert s.centroid[0] == pytest.approx((3 * 5 + 4 * 15) / 7)


def test_observed_symmetrised():
    g = make_graph({(0, 1): 3, (1, 0): 2, (0, 0): 9})
    assert observed_interactions(g, Partition.from_labels(g.nodes, [0, 1])) == {(0, 1): 5}


def test_observed_errors():
    g = make_graph({(0, 1): 3})
    with pytest.raises(GravityError):
        observed_interactions(g, Partition.from_labels(g.nodes, [0, 0]))
    g = make_graph({(0, 0): 1, (1, 1): 1})
    obs = observed_interactions(g, Partition.from_labels(g.nodes, [0, 1]))
    assert obs == {}
    with pytest.raises(GravityError):
        fit_gravity(summarize_regions(g, Partition.from_labels(g.nodes, [0, 1]), NET), obs)


def test_beta_zero_exact():
    summ = regions(np.random.default_rng(0))
    obs = {k: 0.37 * summ[k[0]].mass * summ[k[1]].mass for k in forward(summ, 1, 0)}
    fit = fit_gravity(summ, obs, beta=0.0)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.k == pytest.approx(0.37, rel=1e-12)


def test_noisy_recovery():
    rng = np.random.default_rng(1)
    summ = regions(rng)
    fit = fit_gravity(summ, forward(summ, 2.5, 0.8, 0.1, rng), 0.8)
    assert 2.25 <= fit.k <= 2.75 and fit.r_squared >= 0.95 and fit.p_value < 1e-10
    assert fit.n_pairs == 120 and fit.free_slope == pytest.approx(1.0, abs=0.05)


def test_noise_free_is_perfect():
    summ = regions(np.random.default_rng(2))
    fit = fit_gravity(summ, forward(summ, 2.5, 0.8), 0.8)
    assert fit.r_squared >= 1 - 1e-9 and fit.k == pytest.approx(2.5, rel=1e-9)


def test_unit_and_mass_invariance():
    rng = np.random.default_rng(3)
    summ = regions(rng)
    obs = forward(summ, 2.5, 0.8, 0.2, rng)
    base = fit_gravity(summ, obs, 0.8)
    c = 1000.0
    far = [RegionSummary(s.region, s.mass, (s.centroid[0] * c, s.centroid[1] * c)) for s in summ]
    f1 = fit_gravity(far, obs, 0.8)
    assert f1.k == pytest.approx(base.k * c ** 0.8, rel=1e-9)
    assert f1.r_squared == pytest.approx(base.r_squared, rel=1e-9)
    assert f1.p_value == pytest.approx(base.p_value, rel=1e-9)
    heavy = [RegionSummary(s.region, s.mass * c, s.centroid) for s in summ]
    f2 = fit_gravity(heavy, obs, 0.8)
    assert f2.k == pytest.approx(base.k * c ** -2, rel=1e-9)
    assert f2.r_squared == pytest.approx(base.r_squared, rel=1e-9)


def test_zero_distance_pair_excluded(caplog):
    summ = regions(np.random.default_rng(4), n=5)
    summ.append(RegionSummary(5, 100.0, summ[0].centroid))
    obs = forward(summ[:5], 2.0, 0.8)
    obs[(0, 5)] = 10.0
    with caplog.at_level(logging.WARNING):
        fit = fit_gravity(summ, obs, 0.8)
    assert (0, 5) in fit.excluded_pairs and fit.n_pairs == 10
    assert "excluding" in caplog.text


def test_too_few_pairs():
    summ = regions(np.random.default_rng(5), n=2)
    with pytest.raises(GravityError):
        fit_gravity(summ, forward(summ, 1, 0.8), 0.8)


def test_planted_flows_match_tally():
    cfg = synth.SynthConfig(seed=3, n_cities=4, n_agents=800, steps_per_agent=20, inter_city_prob=0.1)
    text, truth = synth.generate(cfg, "projected")
    trajs, _ = filter_records(parse_records(io.StringIO(text))[0])
    net = bbox_fishnet(trajs.x, trajs.y, 10_000.0)
    g, _ = build_od(displacement_arrays(trajs), net)
    planted = synth.planted_partition(cfg, net, g.nodes)
    obs = observed_interactions(g, planted)
    # independent tally: label each planted move's end cells by nearest centre
    lab = dict(zip(planted.nodes, planted.labels.tolist()))
    expect = {}
    for (a, b), w in truth.od_tally(net).items():
        i, j = lab[CellId(*a)], lab[CellId(*b)]
        if i != j:
            key = (min(i, j), max(i, j))
            expect[key] = expect.get(key, 0) + w
    assert obs == expect


def test_report_and_pairs_csv():
    summ = regions(np.random.default_rng(6), n=4)
    fit = fit_gravity(summ, forward(summ, 1.0, 0.8), 0.8)
    d = fit.to_dict()
    assert set(d) >= {"beta", "k", "r_squared", "p_value", "n_pairs", "excluded_pairs"}
    lines = pairs_csv(fit).splitlines()
    assert lines[0] == "i,j,d,P_i,P_j,T_obs,T_est" and len(lines) == 7


def test_beta_sweep_peaks_at_truth():
    rng = np.random.default_rng(7)
    summ = regions(rng, n=20)
    obs = forward(summ, 1.0, 1.5, 0.05, rng)
    sweep = beta_sweep(summ, obs, np.arange(0.5, 2.51, 0.25))
    assert max(sweep, key=lambda t: t[1])[0] == 1.5
