"""File-based pipeline stages and the end-to-end run.

Every stage reads its inputs from files written by earlier stages, so a
sequence of single-stage runs produces the same bytes as one full run.

Layout of an output directory::

    trajectories.jsonl  filter_report.json
    mobility_stats.json ccdf_displacement.csv ccdf_gyration.csv ccdf_locations.csv
    fishnet.json        fishnet.geojson
    range_<tag>/edges.csv flows.csv graph_report.json
                partition.csv partition.geojson codelength.json
                gravity.json [gravity_pairs.csv]
    manifest.json
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import BUILD_ID, geo, gravity, ingest, mapeq, mobility, odgraph

log = logging.getLogger(__name__)

REFERENCE_VALUES = {
    "codelength_bits": {"all": 7.8, "ge10000": 8.5, "lt4000": 4.5, "ge4000": 8.1},
    "location_count_tpl": {"alpha": 1.24, "lambda": 0.00132},
    "displacement_tail_alpha": 3.2,
    "gravity_r_squared": 0.89,
    "gravity_beta": 0.8,
    "fishnet_cells_10km": 2784,
}

STAGES = ("ingest", "filter", "stats", "grid", "graph", "communities", "gravity", "manifest")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure gets the stage tag
        raise StageError(name, f"{type(e).__name__}: {e}") from e


@dataclass
class PipelineConfig:
    input: tuple = ()
    format: str = "csv"
    projection: str = "local_equirectangular"
    origin_lat: Optional[float] = None
    origin_lon: Optional[float] = None
    boundary: Optional[str] = None
    cell_size: float = 10_000.0
    max_speed: float = 240.0
    min_residency: float = 30.0
    keep_geocoded: bool = False
    keep_unknown: bool = True
    dedup_key: str = "user_time_loc"
    window_start: Optional[float] = None
    window_end: Optional[float] = None
    ranges: tuple = ("all", "<4000", ">=4000", ">=10000")
    directed: bool = True
    tau: float = 0.15
    teleport: str = "in_strength"
    recorded: bool = False
    self_links: bool = False
    seed: int = 0
    restarts: int = 10
    beta: float = 0.8
    threads: int = 1
    out: str = "run"

    def __post_init__(self):
        if isinstance(self.input, str):
            self.input = (self.input,)
        self.input = tuple(self.input)
        if isinstance(self.ranges, str):
            self.ranges = tuple(r for r in self.ranges.split(",") if r.strip())
        self.ranges = tuple(self.ranges)
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.format not in ("csv", "jsonl"):
            raise ValueError(f"unknown input format {self.format!r}")
        if self.restarts < 1 or self.threads < 1:
            raise ValueError("restarts and threads must be >= 1")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.teleport not in ("uniform", "in_strength"):
            raise ValueError(f"unknown teleport {self.teleport!r}")
        for r in self.ranges:
            odgraph.RangeFilter.parse(r)

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from string values (config file / flags), coercing by field type."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            k = k.strip().replace("-", "_")
            if k not in kinds:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = _coerce(kinds[k], v) if isinstance(v, str) else v
        return cls(**kw)

    @property
    def filter_config(self) -> ingest.FilterConfig:
        window = None
        if self.window_start is not None or self.window_end is not None:
            window = (-math.inf if self.window_start is None else self.window_start,
                      math.inf if self.window_end is None else self.window_end)
        return ingest.FilterConfig(self.max_speed, self.min_residency, self.keep_geocoded,
                                   self.keep_unknown, window, self.dedup_key)

    @property
    def range_filters(self) -> list[odgraph.RangeFilter]:
        return [odgraph.RangeFilter.parse(r) for r in self.ranges]

    def echo(self) -> dict:
        """Config as recorded in the manifest: paths reduced to base names
        so the manifest does not depend on where the run happened."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d["input"] = [os.path.basename(p) for p in self.input]
        d["boundary"] = os.path.basename(self.boundary) if self.boundary else None
        d["ranges"] = list(self.ranges)
        return d


def _coerce(kind, text: str):
    text = text.strip()
    kind = str(kind)
    if text.lower() in ("", "none", "null") and "Optional" in kind:
        return None
    if kind.startswith("tuple"):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if "bool" in kind:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# -- file helpers -------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


class Outputs:
    """Writes artifacts under one directory and remembers them, so a failed
    stage can take back what it wrote."""

    def __init__(self, root):
        self.root = Path(root)
        self.written: list[Path] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as fh:
            fh.write(text)
        self.written.append(p)
        return p

    def need(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise FileNotFoundError(f"missing upstream artifact {p}")
        return p

    def rollback(self):
        for p in self.written:
            if p.exists():
                p.unlink()
        self.written.clear()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def range_dir(filt: odgraph.RangeFilter) -> str:
    return f"range_{filt.tag}"


# -- stages -------------------------------------------------------------------

def _projection(cfg: PipelineConfig, table: ingest.RecordTable) -> geo.Projection:
    if cfg.projection == "passthrough" or table.projected:
        return geo.PASSTHROUGH
    lat0, lon0 = cfg.origin_lat, cfg.origin_lon
    if lat0 is None or lon0 is None:
        lat0 = round(float(np.mean(table.lat)), 6) if lat0 is None else lat0
        lon0 = round(float(np.mean(table.lon)), 6) if lon0 is None else lon0
    return geo.Projection(cfg.projection, (lat0, lon0))


def _region(cfg: PipelineConfig, proj: geo.Projection) -> Optional[geo.Fishnet]:
    if not cfg.boundary:
        return None
    return geo.masked_fishnet(geo.load_boundary(cfg.boundary, proj), cfg.cell_size)


def run_filter(cfg: PipelineConfig, out: Outputs):
    """Parse, project and filter the raw records; write the trajectory store."""
    with stage("ingest"):
        if not cfg.input:
            raise ValueError("no input files given")
        tables, errors = [], 0
        for path in cfg.input:
            t, e = ingest.parse_records(path, cfg.format)
            tables.append(t)
            errors += e
        table = tables[0] if len(tables) == 1 else ingest.RecordTable.concat(tables)
        if len(table) == 0:
            raise ValueError("input holds no parsable records")
    with stage("filter"):
        proj = _projection(cfg, table)
        region = _region(cfg, proj)
        trajs, report = ingest.filter_records(table, cfg.filter_config, proj, region, errors)
        if len(trajs) == 0:
            raise ValueError("no trajectories survive filtering")
        out.write("trajectories.jsonl", ingest.dumps_trajectories(trajs))
        rep = report.to_dict()
        rep["projection"] = {"kind": proj.kind, "origin": list(proj.origin)}
        out.write("filter_report.json", dumps_json(rep))
    return trajs, report


def _read_trajs(out: Outputs, path=None) -> ingest.TrajectorySet:
    return ingest.read_trajectories(path or out.need("trajectories.jsonl"))


def _read_projection(out: Outputs) -> geo.Projection:
    with open(out.need("filter_report.json")) as fh:
        p = json.load(fh)["projection"]
    return geo.Projection(p["kind"], tuple(p["origin"]))


def run_stats(cfg: PipelineConfig, out: Outputs, trajectories=None) -> dict:
    """Displacement, gyration and location-count fits plus their CCDFs."""
    with stage("stats"):
        trajs = _read_trajs(out, trajectories)
        d = mobility.displacement_arrays(trajs).d
        d = d[d > 0]
        rg = mobility.gyration_radii(trajs)
        rg = rg[rg > 0]
        counts = mobility.location_counts(trajs).astype(float)
        stats = {
            "n_users": len(trajs),
            "n_displacements": int(len(d)),
            "displacement": mobility.fit_or_error(d, mobility.DISPLACEMENT_SEGMENTS),
            "displacement_power_segments": mobility.fit_or_error(d, mobility.DISPLACEMENT_TWO_POWER),
            "gyration": mobility.fit_or_error(rg, mobility.GYRATION_SEGMENTS),
            "location_counts": mobility.fit_or_error(counts, mobility.LOCATION_COUNT_SEGMENTS),
        }
        out.write("mobility_stats.json", dumps_json(stats))
        out.write("ccdf_displacement.csv", mobility.ccdf_csv(d))
        out.write("ccdf_gyration.csv", mobility.ccdf_csv(rg))
        out.write("ccdf_locations.csv", mobility.ccdf_csv(counts))
    return stats


def run_grid(cfg: PipelineConfig, out: Outputs, trajectories=None) -> geo.Fishnet:
    with stage("grid"):
        net = _region(cfg, _read_projection(out)) if cfg.boundary else None
        if net is None:
            trajs = _read_trajs(out, trajectories)
            net = geo.bbox_fishnet(trajs.x, trajs.y, cfg.cell_size)
        out.write("fishnet.json", dumps_json(net.to_dict()))
        out.write("fishnet.geojson", dumps_json(geo.fishnet_geojson(net)))
    return net


def _read_net(out: Outputs) -> geo.Fishnet:
    with open(out.need("fishnet.json")) as fh:
        return geo.Fishnet.from_dict(json.load(fh))


def run_graph(cfg: PipelineConfig, out: Outputs, trajectories=None) -> dict:
    """One OD graph per range filter."""
    graphs = {}
    with stage("graph"):
        net = _read_net(out)
        disp = mobility.displacement_arrays(_read_trajs(out, trajectories))
        for filt in cfg.range_filters:
            g, rep = odgraph.build_od(disp, net, filt, cfg.directed)
            sub = range_dir(filt)
            out.write(f"{sub}/edges.csv", odgraph.edges_csv(g))
            out.write(f"{sub}/flows.csv", odgraph.flows_csv(g, net))
            info = rep.to_dict()
            info.update(range=filt.tag, nodes=g.n, edges=len(g.src), total_weight=g.total_weight)
            out.write(f"{sub}/graph_report.json", dumps_json(info))
            graphs[filt.tag] = g
    return graphs


def _read_graph(cfg: PipelineConfig, out: Outputs, sub: str, net=None) -> odgraph.OdGraph:
    return odgraph.read_edges_csv(out.need(f"{sub}/edges.csv"), cfg.directed,
                                  net.key if net is not None else None)


def communities(cfg: PipelineConfig, g: odgraph.OdGraph):
    if g.n == 0:
        raise ValueError("graph has no edges")
    rates = mapeq.walker_rates(g, cfg.tau, cfg.teleport, cfg.recorded, cfg.self_links)
    return mapeq.optimize(g, rates, cfg.seed, cfg.restarts, cfg.threads)


def run_communities(cfg: PipelineConfig, out: Outputs, edges=None) -> dict:
    """Map-equation partition per range filter (or for one edge list)."""
    results = {}
    with stage("communities"):
        if edges is not None:
            targets = [("", odgraph.read_edges_csv(edges, cfg.directed), None)]
        else:
            net = _read_net(out)
            targets = [(range_dir(f) + "/", _read_graph(cfg, out, range_dir(f), net), f.tag)
                       for f in cfg.range_filters]
        for prefix, g, tag in targets:
            part, br = communities(cfg, g)
            out.write(f"{prefix}partition.csv", mapeq.partition_csv(part))
            report = br.to_dict()
            report.update(n_modules=part.m, n_nodes=g.n, range=tag)
            out.write(f"{prefix}codelength.json", dumps_json(report))
            if tag is not None:
                props = {c: {"module": k} for c, k in part.assignment.items()}
                out.write(f"{prefix}partition.geojson", dumps_json(geo.fishnet_geojson(net, props)))
            results[tag] = (part, br)
    return results


def run_gravity(cfg: PipelineConfig, out: Outputs) -> dict:
    """Gravity fit per range; too few regions is recorded, not fatal."""
    fits = {}
    with stage("gravity"):
        net = _read_net(out)
        for filt in cfg.range_filters:
            sub = range_dir(filt)
            g = _read_graph(cfg, out, sub, net)
            part = mapeq.read_partition_csv(out.need(f"{sub}/partition.csv"))
            try:
                summ = gravity.summarize_regions(g, part, net)
                fit = gravity.fit_gravity(summ, gravity.observed_interactions(g, part), cfg.beta)
            except gravity.GravityError as e:
                out.write(f"{sub}/gravity.json", dumps_json({"skipped": str(e), "beta": cfg.beta}))
                fits[filt.tag] = None
                continue
            out.write(f"{sub}/gravity.json", dumps_json(fit.to_dict()))
            out.write(f"{sub}/gravity_pairs.csv", gravity.pairs_csv(fit))
            fits[filt.tag] = fit
    return fits


def artifact_hashes(root) -> dict:
    root = Path(root)
    return {p.relative_to(root).as_posix(): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def build_manifest(cfg: PipelineConfig, root) -> dict:
    root = Path(root)
    summary = []
    for filt in cfg.range_filters:
        with open(root / range_dir(filt) / "codelength.json") as fh:
            cl = json.load(fh)
        with open(root / range_dir(filt) / "gravity.json") as fh:
            gv = json.load(fh)
        summary.append({"range": filt.tag, "n_modules": cl["n_modules"],
                        "codelength_bits": cl["total_bits"], "gravity_r_squared": gv.get("r_squared")})
    return {
        "build": BUILD_ID,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "inputs": {os.path.basename(p): sha256_file(p) for p in cfg.input},
        "artifacts": artifact_hashes(root),
        "summary": summary,
        "reference_values": REFERENCE_VALUES,
    }


def run_pipeline(cfg: PipelineConfig) -> dict:
    """All stages into a scratch directory, then moved into ``cfg.out``.
    On failure the scratch directory is removed and ``cfg.out`` is untouched."""
    final = Path(cfg.out)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=final.parent))
    try:
        out = Outputs(tmp)
        run_filter(cfg, out)
        run_stats(cfg, out)
        run_grid(cfg, out)
        run_graph(cfg, out)
        run_communities(cfg, out)
        run_gravity(cfg, out)
        with stage("manifest"):
            manifest = build_manifest(cfg, tmp)
            out.write("manifest.json", dumps_json(manifest))
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def render_report(manifest: dict) -> str:
    """Human-readable summary of a run manifest."""
    ref = manifest.get("reference_values", {}).get("codelength_bits", {})
    lines = [f"build     {manifest['build']}", f"seed      {manifest['seed']}",
             f"inputs    {', '.join(manifest.get('inputs', {})) or '-'}", "",
             f"{'range':<12}{'modules':>8}{'L (bits)':>12}{'reference':>11}{'gravity R2':>12}"]
    for s in manifest.get("summary", []):
        tag = s["range"]
        r2 = s.get("gravity_r_squared")
        refv = ref.get(tag)
        lines.append(f"{tag:<12}{s['n_modules']:>8}{s['codelength_bits']:>12.4f}"
                     f"{'-' if refv is None else refv:>11}{'-' if r2 is None else f'{r2:.3f}':>12}")
    lines += ["", f"{len(manifest.get('artifacts', {}))} artifacts:"]
    lines += [f"  {h[:16]}  {p}" for p, h in manifest.get("artifacts", {}).items()]
    return "\n".join(lines) + "\n"
