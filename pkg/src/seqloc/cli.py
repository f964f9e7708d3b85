"""Command-line interface for the sequential localization pipeline.

Four commands cover the full workflow: ``gen-world`` builds the synthetic
scene artifacts (world, prior map, query sequence), ``localize`` runs one
method over a sequence and writes a JSON-lines trace, ``eval`` turns traces
into a comparison report with figures, and ``sweep`` fans a parameter grid
out over parallel runs.

Traces are split into two files so reruns are byte-reproducible: the
``.jsonl`` trace holds every deterministic field, and a ``*.timing.json``
sidecar holds the per-frame wall times.
"""
from __future__ import annotations

import concurrent.futures
import csv
import json
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import click
import numpy as np
import yaml

from . import evaluation, mapstore, worldsim
from .evaluation import RunResult
from .geometry import Pose4
from .mcl import MclParams
from .monitor import METHODS, StatusThresholds, run_sequence
from .spectral import SpectralParams
from .worldsim import Rect, WorldConfig

TRACE_SCHEMA = "seqloc-trace"

SWEEP_PARAMS = {
    "lambda_thr": ("thresholds", float),
    "alpha": ("thresholds", float),
    "n_init": ("mcl", int),
    "n_conv": ("mcl", int),
}


class ConfigError(click.ClickException):
    exit_code = 2


def _load_yaml(path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except yaml.YAMLError as e:
        # the YAML mark carries line/column diagnostics
        raise ConfigError(f"config parse error in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing required field {key!r} in {where}")
    return cfg[key]


def _rect(spec) -> Rect:
    if len(spec) != 4:
        raise ConfigError(f"rectangle needs 4 numbers, got {spec!r}")
    return Rect(*map(float, spec))


def _world_config(d: dict, seed_override: int | None) -> WorldConfig:
    kwargs = {}
    simple = {
        "landmark_density", "descriptor_dim", "descriptor_noise_sigma",
        "z_noise", "seed",
    }
    for key, val in d.items():
        if key == "extent":
            kwargs["extent"] = tuple(map(float, val))
        elif key == "hole_regions":
            kwargs["hole_regions"] = tuple(_rect(r) for r in val)
        elif key == "scarce_regions":
            kwargs["scarce_regions"] = tuple(
                (_rect(r["rect"]), float(r["density"])) for r in val
            )
        elif key == "odometry_noise":
            kwargs["odometry_noise"] = tuple(map(float, val))
        elif key in simple:
            kwargs[key] = val
        else:
            raise ConfigError(f"unknown world field {key!r}")
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return WorldConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad world config: {e}")


def _params_from(cls, d: dict, what: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {sorted(unknown)}")
    kwargs = dict(d)
    for key in ("sigma_pe", "motion_noise"):
        if key in kwargs:
            kwargs[key] = tuple(map(float, kwargs[key]))
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {what} config: {e}")


def _mcl_params(d: dict) -> MclParams:
    d = dict(d)
    spectral_d = d.pop("spectral", {})
    spectral = _params_from(SpectralParams, spectral_d, "spectral")
    return _params_from(MclParams, d, "mcl", spectral=spectral)


def _thresholds(d: dict) -> StatusThresholds:
    return _params_from(StatusThresholds, d, "thresholds")


# --- trace I/O --------------------------------------------------------------


def write_trace(path: Path, meta: dict, records: list[dict]) -> None:
    """JSON-lines trace: one meta header line, then one record per step.

    Wall times go to a sidecar so the trace itself is byte-reproducible.
    """
    times = [r["wall_time_ms"] for r in records]
    with open(path, "w") as f:
        f.write(json.dumps({"schema": TRACE_SCHEMA, "version": 1, **meta},
                           sort_keys=True) + "\n")
        for r in records:
            slim = {k: v for k, v in r.items() if k != "wall_time_ms"}
            f.write(json.dumps(slim, sort_keys=True) + "\n")
    timing = {
        "wall_time_ms": times,
        "ms_per_frame": float(np.mean(times)) if times else math.nan,
    }
    path.with_suffix(".timing.json").write_text(json.dumps(timing))


def load_trace(path) -> tuple[dict, RunResult]:
    path = Path(path)
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("schema") != TRACE_SCHEMA:
        raise ConfigError(f"{path} is not a localization trace")
    meta, records = lines[0], lines[1:]
    timing_path = path.with_suffix(".timing.json")
    if timing_path.exists():
        times = json.loads(timing_path.read_text())["wall_time_ms"]
    else:
        times = [math.nan] * len(records)
    for r, t in zip(records, times):
        r["wall_time_ms"] = t
    return meta, RunResult(records=records)


# --- run plumbing -----------------------------------------------------------


def _run_from_config(cfg: dict, cfg_dir: Path, method: str | None,
                     seed: int | None,
                     overrides: dict | None = None) -> tuple[dict, list[dict]]:
    arts = _require(cfg, "artifacts", "run config")
    map_path = cfg_dir / _require(arts, "map", "artifacts")
    seq_path = cfg_dir / _require(arts, "sequence", "artifacts")
    try:
        idx = mapstore.load(map_path)
        seq = worldsim.sequence_from_json(Path(seq_path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load artifacts: {e}")

    method = method or cfg.get("method", "reliable")
    if method not in METHODS:
        raise ConfigError(
            f"unknown method {method!r} (choose from {sorted(METHODS)})")
    seed = seed if seed is not None else int(cfg.get("seed", 0))
    params = _mcl_params(cfg.get("mcl", {}))
    thr = _thresholds(cfg.get("thresholds", {}))
    if overrides:
        if "mcl" in overrides:
            params = replace(params, **overrides["mcl"])
        if "thresholds" in overrides:
            thr = replace(thr, **overrides["thresholds"])
    init_pose = None
    if "init_pose" in cfg:
        init_pose = Pose4(*map(float, cfg["init_pose"]))
    elif method == "reg":
        # default the dead-reckoning start to the first true pose
        init_pose = seq.frames[0].true_pose

    records = run_sequence(idx, seq, method=method, params=params, thr=thr,
                           seed=seed, init_pose=init_pose)
    meta = {
        "method": method,
        "scene": cfg.get("scene", "default"),
        "seed": seed,
        "n_frames": len(records),
    }
    return meta, records


def _sweep_worker(args):
    cfg_path, param, value, seed = args
    cfg = _load_yaml(cfg_path)
    section, cast = SWEEP_PARAMS[param]
    overrides = {section: {param: cast(value)}}
    meta, records = _run_from_config(cfg, Path(cfg_path).parent,
                                     method=None, seed=seed,
                                     overrides=overrides)
    return value, meta, records


# --- commands ---------------------------------------------------------------


@click.group()
def cli():
    """Sequential global localization on synthetic landmark worlds."""


@cli.command("gen-world")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None,
              help="Override the world and sequence seeds.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_gen_world(config_path, seed, out_dir):
    """Generate world, prior map, and query sequence artifacts."""
    cfg = _load_yaml(config_path)
    world_cfg = _world_config(_require(cfg, "world", "config"), seed)
    map_cfg = cfg.get("map", {})
    seq_cfg = _require(cfg, "sequence", "config")
    trajectory = _require(seq_cfg, "trajectory", "sequence")

    world = worldsim.generate_world(world_cfg)
    submaps = worldsim.build_prior_map(
        world,
        grid=float(map_cfg.get("grid", 5.0)),
        radius=map_cfg.get("radius"),
    )
    idx = mapstore.build(submaps, grid=float(map_cfg.get("grid", 5.0)))
    seq = worldsim.generate_query(
        world,
        np.asarray(trajectory, dtype=float),
        spacing=float(seq_cfg.get("spacing", 0.5)),
        sensing_radius=float(seq_cfg.get("sensing_radius", 20.0)),
        noise=seq_cfg.get("noise"),
        seed=seed if seed is not None else seq_cfg.get("seed"),
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.json").write_text(worldsim.world_to_json(world))
    mapstore.save(idx, out / "map.json")
    (out / "sequence.json").write_text(worldsim.sequence_to_json(seq))
    click.echo(f"world: {world.n_landmarks} landmarks")
    click.echo(f"map: {len(submaps)} submaps")
    click.echo(f"sequence: {len(seq)} frames")
    click.echo(f"wrote artifacts to {out}")


@cli.command("localize")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(sorted(METHODS)), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_localize(config_path, method, seed, out_dir):
    """Run one localization method over a sequence; write the trace."""
    cfg = _load_yaml(config_path)
    meta, records = _run_from_config(cfg, Path(config_path).parent, method, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"trace_{meta['method']}_seed{meta['seed']}.jsonl"
    write_trace(trace_path, meta, records)
    mean_ms = float(np.mean([r["wall_time_ms"] for r in records]))
    click.echo(f"trace: {trace_path}")
    click.echo(f"wall time per frame: {mean_ms:.2f} ms over {len(records)} frames")
    if not any(r["converged"] for r in records):
        click.echo("warning: run never converged", err=True)
        sys.exit(3)


@cli.command("eval")
@click.argument("traces", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_eval(traces, out_dir):
    """Aggregate one or more traces into report files (CSV, JSON, figures)."""
    runs = []
    for path in traces:
        meta, run = load_trace(path)
        runs.append((meta["method"], meta["scene"], run))
    written = evaluation.report(runs, out_dir)
    for p in written:
        click.echo(f"wrote {p}")


@cli.command("sweep")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--param", required=True, type=click.Choice(sorted(SWEEP_PARAMS)))
@click.option("--grid", required=True,
              help="Comma-separated parameter values, one run per value.")
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_sweep(config_path, param, grid, seed, jobs, out_dir):
    """Run a parameter grid and tabulate per-value aggregate metrics."""
    _, cast = SWEEP_PARAMS[param]
    try:
        values = [cast(float(v)) for v in grid.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid: {e}")
    if not values:
        raise ConfigError("empty grid")

    jobs = max(1, min(jobs, len(values)))
    tasks = [(config_path, param, v, seed) for v in values]
    if jobs == 1:
        results = [_sweep_worker(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_worker, tasks))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = [param, "converged_step", "pe_mean", "pe_rmse", "ye_mean",
               "ye_rmse", "r2m5d", "reg_ratio", "ms_per_frame"]
    rows = []
    for value, meta, records in results:
        run = RunResult(records=records)
        try:
            errs = evaluation.errors(run)
            pe_mean, pe_rmse, ye_mean, ye_rmse = evaluation.aggregate(errs)
            r2m5d = evaluation.success_rate(errs, 2, 5)
        except evaluation.NoConvergedSegmentError:
            pe_mean = pe_rmse = ye_mean = ye_rmse = r2m5d = math.nan
        rows.append({
            param: value,
            "converged_step": run.converged_step,
            "pe_mean": pe_mean,
            "pe_rmse": pe_rmse,
            "ye_mean": ye_mean,
            "ye_rmse": ye_rmse,
            "r2m5d": r2m5d,
            "reg_ratio": evaluation.mode_ratio(run),
            "ms_per_frame": evaluation.ms_per_frame(run),
        })

    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)

    header = "  ".join(f"{c:>12}" for c in columns)
    click.echo(header)
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            if v is None:
                cells.append(f"{'-':>12}")
            elif isinstance(v, float):
                cells.append(f"{v:>12.4g}")
            else:
                cells.append(f"{v:>12}")
        click.echo("  ".join(cells))
    click.echo(f"wrote {csv_path}")


main = cli


if __name__ == "__main__":
    main()
