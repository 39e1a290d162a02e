"""Command-line interface.

    lidarloop run   --config cfg.toml --frames DIR --trajectory odom.tum [--ground-truth gt.tum] --out DIR
    lidarloop synth --spec world.toml --seed 0 --out DIR
    lidarloop eval  --report DIR --ground-truth gt.tum

Exit status is 0 on success, 1 on unreadable or inconsistent input files
and 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import types
import typing
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core_math import InvalidInputError
from .pipeline import io, synthetic
from .pipeline.config import Config, ConfigError, load_config, from_mapping
from .pipeline.evaluate import evaluate_dir, evaluate_report
from .pipeline.runner import load_dataset, run, write_outputs

log = logging.getLogger("lidarloop")

EXIT_IO = 1
EXIT_CONFIG = 2

WORLDS = {
    "square_loop": synthetic.square_loop_spec,
    "straight_corridor": synthetic.straight_corridor_spec,
    "furnished_room": synthetic.furnished_room,
    "pitched_hall": synthetic.pitched_hall,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    hints = typing.get_type_hints(Config)
    for f in dataclasses.fields(Config):
        flag = "--" + f.name.replace("_", "-")
        tp = hints[f.name]
        if tp is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "cell_size":
            g.add_argument(flag, dest=f.name, type=float, nargs="+", metavar="M", default=None)
        else:
            args = typing.get_args(tp)
            base = next((a for a in args if a is not type(None)), tp) if isinstance(tp, types.UnionType) else tp
            g.add_argument(flag, dest=f.name, type=base, default=None)


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for f in dataclasses.fields(Config):
        v = getattr(ns, f.name, None)
        if v is None:
            continue
        if f.name == "cell_size":
            v = tuple(v) if len(v) != 1 else v[0]
        out[f.name] = v
    return out


def cmd_run(ns) -> int:
    over = _overrides(ns)
    cfg = load_config(ns.config, over) if ns.config else from_mapping(over)
    ds = load_dataset(ns.frames, ns.trajectory, ns.ground_truth)
    report = run(cfg, ds)
    out = write_outputs(report, ns.out, cfg.write_maps)
    accepted = sum(lp.accepted_by_alignment for lp in report.loops)
    print(f"{len(ds)} frames, {len(report.keyframes)} keyframes, {len(report.loops)} candidates, "
          f"{accepted} loops accepted -> {out}")
    if report.skipped_frames or report.skipped_points:
        print(f"skipped {report.skipped_frames} frames, {report.skipped_points} points")
    for stage, n, mean, p99 in report.timing_summary():
        if n:
            print(f"  {stage:<13} n={n:<5} mean {1e3 * mean:9.3f} ms  p99 {1e3 * p99:9.3f} ms")
    if ds.ground_truth is not None:
        m = evaluate_report(report, ds.ground_truth, cfg)
        (out / "metrics.json").write_text(m.to_json() + "\n")
        print(m.to_json())
    return 0


def load_synth_spec(path) -> tuple[synthetic.WorldSpec, synthetic.DriftSpec, dict]:
    """World, drift and output options from a synthesis TOML file.

    Keys: ``world`` (preset name), ``[world_params]`` (preset keyword
    arguments), ``waypoints`` / ``step`` (override the preset's path),
    ``[drift]`` and ``[sensor]`` (field names of DriftSpec / SensorSpec),
    ``frame_rate`` and ``format`` ("ply" or "xyz").
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise io.DatasetIOError(f"{path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    name = data.get("world", "square_loop")
    if name not in WORLDS:
        raise ConfigError(f"{path}: unknown world {name!r} (choose from {', '.join(WORLDS)})")
    try:
        world = WORLDS[name](**data.get("world_params", {}))
        if "waypoints" in data:
            world.waypoints = np.asarray(data["waypoints"], dtype=float).reshape(-1, 3)
        if "step" in data:
            world.step = float(data["step"])
        world.sensor = dataclasses.replace(world.sensor, **data.get("sensor", {}))
        drift = synthetic.DriftSpec(**data.get("drift", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if len(world.waypoints) < 2:
        raise ConfigError(f"{path}: world {name!r} needs at least two waypoints")
    opts = {"frame_rate": float(data.get("frame_rate", 10.0)), "format": data.get("format", "ply")}
    if opts["format"] not in ("ply", "xyz"):
        raise ConfigError(f"{path}: format must be 'ply' or 'xyz'")
    if not opts["frame_rate"] > 0:
        raise ConfigError(f"{path}: frame_rate must be positive")
    return world, drift, opts


def cmd_synth(ns) -> int:
    world, drift, opts = load_synth_spec(ns.spec)
    ds = synthetic.generate_synthetic(world, drift, ns.seed, opts["frame_rate"])
    out = io.ensure_dir(ns.out)
    fdir = io.ensure_dir(out / "frames")
    width = max(5, len(str(len(ds.frames))))
    for k, pts in enumerate(ds.frames):
        if opts["format"] == "ply":
            io.write_ply(fdir / f"{k:0{width}d}.ply", pts)
        else:
            io.write_xyz(fdir / f"{k:0{width}d}.xyz", pts)
    io.write_tum(out / "trajectory.tum", ds.timestamps, ds.odometry)
    io.write_tum(out / "ground_truth.tum", ds.timestamps, ds.true_poses)
    print(f"{len(ds.frames)} frames -> {out}")
    return 0


def cmd_eval(ns) -> int:
    m = evaluate_dir(ns.report, ns.ground_truth)
    text = m.to_json()
    print(text)
    if ns.out:
        Path(ns.out).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidarloop", description="Histogram-based loop closure for LiDAR maps.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="detect loops and correct a trajectory")
    r.add_argument("--config", type=Path, help="TOML file with Config keys (defaults if omitted)")
    r.add_argument("--frames", type=Path, required=True, help="directory of .ply/.xyz frames")
    r.add_argument("--trajectory", type=Path, required=True, help="TUM odometry, one line per frame")
    r.add_argument("--ground-truth", type=Path)
    r.add_argument("--out", type=Path, required=True)
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score a run directory against ground truth")
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--ground-truth", type=Path, required=True)
    e.add_argument("--out", type=Path, help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
