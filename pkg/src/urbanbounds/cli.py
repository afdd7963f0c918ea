"""Command-line entry point: one subcommand per stage plus ``pipeline``."""
from __future__ import annotations

import functools
import json
import logging
import sys
import warnings
from pathlib import Path

import click

from . import BUILD_ID, pipeline, synth
from .pipeline import Outputs, PipelineConfig, StageError

_FLAGS = [
    ("--input", "input", "Raw record file(s), comma separated."),
    ("--format", "format", "csv or jsonl."),
    ("--boundary", "boundary", "GeoJSON study-region polygon (lon/lat)."),
    ("--cell-size", "cell_size", "Fishnet cell size in meters."),
    ("--origin-lat", "origin_lat", "Projection origin latitude."),
    ("--origin-lon", "origin_lon", "Projection origin longitude."),
    ("--ranges", "ranges", "Distance filters, e.g. 'all,<4000,>=4000'."),
    ("--tau", "tau", "Teleportation probability."),
    ("--restarts", "restarts", "Optimizer restarts."),
    ("--beta", "beta", "Gravity distance exponent."),
    ("--seed", "seed", "Top-level random seed."),
    ("--threads", "threads", "Worker cap for parallel stages."),
]


def _config_options(fn):
    """Shared ``--config``/``--set``/``--out`` and common overrides."""
    for flag, key, help_ in reversed(_FLAGS):
        fn = click.option(flag, key, default=None, help=help_)(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override any config key.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      help="Flat key = value config file.")(fn)
    fn = click.option("--out", "out", default=None, help="Output directory.")(fn)

    @functools.wraps(fn)
    def wrapper(config_path, overrides, out, **flags):
        values = pipeline.read_config_file(config_path) if config_path else {}
        for item in overrides:
            if "=" not in item:
                raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        known = {key for _, key, _ in _FLAGS}
        extra = {k: v for k, v in flags.items() if k not in known}
        values.update({k: v for k, v in flags.items() if k in known and v is not None})
        if out is not None:
            values["out"] = out
        try:
            cfg = PipelineConfig.from_mapping(values)
        except (TypeError, ValueError) as e:
            _fail(StageError("config", e))
        return fn(cfg, **extra)

    return wrapper


def _fail(err: StageError):
    click.echo(f"error [{err.stage}]: {err.cause}", err=True)
    sys.exit(2)


def _run_stage(fn, cfg, *args):
    out = Outputs(cfg.out)
    try:
        return fn(cfg, out, *args)
    except StageError as e:
        out.rollback()
        _fail(e)


@click.group()
@click.version_option(BUILD_ID, "--version", message="%(version)s")
@click.option("-v", "--verbose", count=True, help="More logging.")
def main(verbose: int) -> None:
    """Delineate regions from geotagged mobility records."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if verbose == 0:
        warnings.simplefilter("ignore")


@main.command("synth")
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False), help="Record CSV to write.")
@click.option("--truth", type=click.Path(dir_okay=False), help="Ground-truth JSON to write.")
@click.option("--seed", default=0, show_default=True)
@click.option("--n-cities", default=6, show_default=True)
@click.option("--n-agents", default=1000, show_default=True)
@click.option("--steps", "steps_per_agent", default=50, show_default=True)
@click.option("--inter-city-prob", default=0.03, show_default=True)
@click.option("--speed-violator-rate", default=0.0)
@click.option("--short-stay-rate", default=0.0)
@click.option("--duplicate-rate", default=0.0)
@click.option("--geocoded-rate", default=0.0)
@click.option("--coords", type=click.Choice(["wgs84", "projected"]), default="wgs84", show_default=True)
def synth_cmd(out, truth, coords, **params):
    """Write a synthetic record corpus with planted cities."""
    try:
        cfg = synth.SynthConfig(**params)
        text, gt = synth.generate(cfg, coords)
        Path(out).write_text(text)
        if truth:
            synth.write_truth(gt, truth)
    except (ValueError, OSError) as e:
        _fail(StageError("synth", e))
    click.echo(f"{out}: {cfg.n_agents} agents, {text.count(chr(10)) - 1} records")


@main.command("filter")
@_config_options
def filter_cmd(cfg):
    """Parse and filter raw records into trajectories.jsonl."""
    _, rep = _run_stage(pipeline.run_filter, cfg)
    click.echo(f"{rep.retained_users} users, {rep.retained_records} records kept of {rep.parsed}")


@main.command("stats")
@click.option("--trajectories", type=click.Path(exists=True, dir_okay=False),
              help="Trajectory store (default: <out>/trajectories.jsonl).")
@_config_options
def stats_cmd(cfg, trajectories=None):
    """Displacement, gyration and location-count fits."""
    _run_stage(pipeline.run_stats, cfg, trajectories)
    click.echo(str(Path(cfg.out) / "mobility_stats.json"))


@main.command("grid")
@_config_options
def grid_cmd(cfg):
    """Build the fishnet (masked by --boundary when given)."""
    net = _run_stage(pipeline.run_grid, cfg)
    click.echo(f"fishnet {net.n_cols}x{net.n_rows}, {net.n_active()} active cells")


@main.command("graph")
@_config_options
def graph_cmd(cfg):
    """OD graph per distance range."""
    graphs = _run_stage(pipeline.run_graph, cfg)
    for tag, g in graphs.items():
        click.echo(f"{tag}: {g.n} nodes, {len(g.src)} edges")


@main.command("communities")
@click.option("--edges", type=click.Path(exists=True, dir_okay=False),
              help="Partition one edge-list CSV instead of the per-range graphs.")
@_config_options
def communities_cmd(cfg, edges=None):
    """Minimum-codelength partition per distance range."""
    res = _run_stage(pipeline.run_communities, cfg, edges)
    for tag, (part, br) in res.items():
        click.echo(f"{tag or 'edges'}: {part.m} modules, L = {br.total_bits:.4f} bits")


@main.command("gravity")
@_config_options
def gravity_cmd(cfg):
    """Gravity-model fit between regions per distance range."""
    fits = _run_stage(pipeline.run_gravity, cfg)
    for tag, fit in fits.items():
        click.echo(f"{tag}: " + ("skipped" if fit is None else
                                 f"R2 = {fit.r_squared:.3f}, k = {fit.k:.4g}, {fit.n_pairs} pairs"))


@main.command("pipeline")
@_config_options
def pipeline_cmd(cfg):
    """Run every stage and write manifest.json."""
    try:
        manifest = pipeline.run_pipeline(cfg)
    except StageError as e:
        _fail(e)
    except OSError as e:
        _fail(StageError("output", e))
    click.echo(pipeline.render_report(manifest), nl=False)


@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def report_cmd(run_dir):
    """Print a run manifest as text."""
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        _fail(StageError("report", f"missing upstream artifact {path}"))
    click.echo(pipeline.render_report(json.loads(path.read_text())), nl=False)


if __name__ == "__main__":
    main()
