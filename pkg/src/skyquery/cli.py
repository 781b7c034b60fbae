"""Command-line front end: ``skyquery {align,analyze,simulate,route}``.

Every run writes its outputs plus ``manifest.json`` (inputs with content
digests, seed, tool version, outputs) into ``--out-dir``.  Exit codes are
0 on success, 2 for input or configuration errors and 3 when an internal
invariant is violated.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3


class InputError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    version: str = __version__
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # role -> {"path", "sha256"}
    outputs: dict = field(default_factory=dict)  # file name in the output directory -> sha256

    def add_input(self, role: str, path) -> None:
        self.inputs[role] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, path: Path) -> None:
        self.outputs[path.name] = sha256_file(path)

    def to_json(self) -> str:
        return json.dumps({"command": self.command, "version": self.version, "seed": self.seed,
                           "config": self.config, "inputs": self.inputs, "outputs": self.outputs},
                          indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(self.to_json())
        return path


# ---------------------------------------------------------------- align

def cmd_align(args) -> int:
    from .alignment import (AlignmentParams, CameraIntrinsics, read_keypoint_log, run_alignment,
                            synthetic_scene, write_keypoint_log)

    out = _out_dir(args)
    man = RunManifest("align", args.seed)
    cam = CameraIntrinsics(args.image_width, args.image_height, math.radians(args.fov_deg))
    params = AlignmentParams(T_f=args.t_f, T_d_px=args.t_d_px, T_d_m=args.t_d_m)
    truth_path = args.truth
    if args.synthetic:
        if args.keypoints:
            raise InputError("--synthetic and --keypoints are exclusive")
        if args.synthetic < 4:
            raise InputError("--synthetic needs at least 4 frames (one per flight)")
        scene = synthetic_scene(args.seed, frames_per_flight=args.synthetic // 4, cam=cam)
        kp_path = out / "keypoints.jsonl"
        write_keypoint_log(kp_path, scene.frames, scene.descriptors.shape[1])
        truth_path = out / "truth.csv"
        _write_poses(truth_path, [(fid, p, None, None) for fid, p in sorted(scene.true_poses.items())])
    elif args.keypoints:
        kp_path = Path(args.keypoints)
    else:
        raise InputError("one of --keypoints or --synthetic is required")
    dim, frames = read_keypoint_log(kp_path)
    if not args.synthetic:  # a generated log is recorded as an output instead
        man.add_input("keypoints", kp_path)
    region = None
    if args.region:
        from .core import load_region
        region = load_region(args.region)
        man.add_input("region", args.region)
    man.config = {"T_f": params.T_f, "T_d_px": params.T_d_px, "T_d_m": params.T_d_m,
                  "image": [cam.width_px, cam.height_px], "fov_deg": args.fov_deg,
                  "synthetic_frames": args.synthetic}

    res = run_alignment(frames, params, cam)
    groups_path = out / "groups.csv"
    with open(groups_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["group_id", "x_m", "y_m", "h_m", "n_stable"]
        w.writerow(header + (["lon", "lat"] if region else []))
        for gid, g in enumerate(res.globals):
            c = g.coord
            row = [gid, f"{c.x:.4f}", f"{c.y:.4f}", f"{c.h:.4f}", len(g.members)]
            if region:
                from .core import world_to_lonlat
                lon, lat = world_to_lonlat(c, region)
                row += [f"{lon:.8f}", f"{lat:.8f}"]
            w.writerow(row)
    poses_path = out / "poses.csv"
    _write_poses(poses_path, [(fid, e.pose, e.sensor_only, e.n_matches) for fid, e in sorted(res.poses.items())])
    for p in ([truth_path] if args.synthetic else []) + [groups_path, poses_path]:
        man.add_output(Path(p))
    if args.synthetic:
        man.add_output(kp_path)

    print(f"frames: {len(frames)}  stable groups: {len(res.stable)}  global groups: {len(res.globals)}")
    if truth_path:
        truth = _read_poses(truth_path)
        if not args.synthetic:
            man.add_input("truth", truth_path)
        common = [fid for fid in sorted(res.poses) if fid in truth]
        if not common:
            raise InputError("truth file shares no frame ids with the keypoint log")
        sensor = {fr.frame_id: fr.pose for fr in frames}
        est_rmse = _rmse([res.poses[f].pose for f in common], [truth[f] for f in common])
        sen_rmse = _rmse([sensor[f] for f in common], [truth[f] for f in common])
        print(f"pose RMSE: {est_rmse:.3f} m  sensor-only RMSE: {sen_rmse:.3f} m")
    man.write(out)
    return EXIT_OK


def _write_poses(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "x_m", "y_m", "h_m", "alpha_rad", "sensor_only", "n_matches"])
        for fid, p, sensor_only, n in rows:
            w.writerow([fid, f"{p.x:.4f}", f"{p.y:.4f}", f"{p.h:.4f}", f"{p.alpha:.6f}",
                        "" if sensor_only is None else int(sensor_only), "" if n is None else n])


def _read_poses(path) -> dict:
    from .alignment import SensorPose

    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                out[int(row["frame_id"])] = SensorPose(float(row["x_m"]), float(row["y_m"]),
                                                       float(row["h_m"]), float(row["alpha_rad"]))
            except (KeyError, TypeError, ValueError) as e:
                raise InputError(f"{path}:{lineno}: malformed pose row ({e})") from None
    return out


def _rmse(a, b) -> float:
    d = np.array([[p.x - q.x, p.y - q.y] for p, q in zip(a, b)])
    return float(np.sqrt((d ** 2).sum(axis=1).mean()))


# ---------------------------------------------------------------- analyze

def _parse_binds(binds: Sequence[str]) -> dict[str, Path]:
    out = {}
    for b in binds or ():
        if "=" not in b:
            raise InputError(f"--bind expects name=path, got {b!r}")
        name, path = b.split("=", 1)
        out[name.strip()] = Path(path)
    return out


def _program_file(spec: str) -> Path:
    from .samples import program_path

    p = Path(spec)
    if p.exists():
        return p
    shipped = program_path(spec)
    if shipped.exists():
        return shipped
    raise InputError(f"program not found: {spec}")


def cmd_analyze(args) -> int:
    from .analytics.io import read_coverage_log
    from .core import load_region
    from .dsl import ExecutionContext, parse_file, plan_and_execute, write_dataframe
    from .samples import SAMPLE_FILES, bundled_data_dir

    out = _out_dir(args)
    man = RunManifest("analyze", args.seed)
    binds = {}
    if args.sample_data:
        binds = {k: bundled_data_dir() / v for k, v in SAMPLE_FILES.items() if k != "region"}
    binds.update(_parse_binds(args.bind))
    region_path = args.region or (bundled_data_dir() / SAMPLE_FILES["region"] if args.sample_data else None)
    if region_path is None:
        raise InputError("--region is required (or use --sample-data)")
    if not args.program:
        raise InputError("--program is required")
    prog_path = _program_file(args.program)
    man.add_input("program", prog_path)
    man.add_input("region", region_path)
    for k in sorted(binds):
        if not binds[k].exists():
            raise InputError(f"binding {k!r}: no such file {binds[k]}")
        man.add_input(f"bind:{k}", binds[k])
    region = load_region(region_path)
    prog = parse_file(prog_path)
    coverage = read_coverage_log(binds["coverage"]) if "coverage" in binds else None
    ctx = ExecutionContext(region, binds, coverage)
    want = set(args.export) if args.export else None
    results = plan_and_execute(prog, ctx, want)
    for name in sorted(results):
        man.add_output(write_dataframe(out / name, results[name]))
        print(f"{name}: {len(results[name].rows)} rows")
    man.write(out)
    return EXIT_OK


# ---------------------------------------------------------------- simulate

def _parse_drones(spec: str) -> list[int]:
    out: list[int] = []
    try:
        for part in spec.split(","):
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise InputError(f"--drones expects e.g. 4, 1-4 or 1,2,4; got {spec!r}") from None
    if not out:
        raise InputError("--drones is empty")
    return out


def cmd_simulate(args) -> int:
    from .core import load_region
    from .dsl import parse_file
    from .simulator import (POLICIES, SimConfig, SimConfigError, generate_synthetic_trace, read_trace_csv,
                            run_sweep, two_regime_profile, write_metrics_csv, write_visits_csv)

    drones = _parse_drones(args.drones)
    policies = list(POLICIES) if args.policy in (None, "all") else [args.policy]
    configs = [SimConfig(n, policy=p, objective=args.objective, seed=args.seed, recharge_s=args.recharge_s)
               for n in drones for p in policies]  # validates every combination up front
    out = _out_dir(args)
    man = RunManifest("simulate", args.seed)
    prog_path = _program_file(args.program or "parking_eval")
    prog = parse_file(prog_path)
    man.add_input("program", prog_path)
    if args.objective not in prog.exports:
        raise SimConfigError(f"program does not export the {args.objective!r} objective")
    if args.trace:
        if not args.region:
            raise InputError("--trace needs --region for its lon/lat frame")
        region = load_region(args.region)
        trace = read_trace_csv(args.trace, region)
        man.add_input("trace", args.trace)
        man.add_input("region", args.region)
    else:
        profile = two_regime_profile(args.weeks)
        region = profile.region()
        trace = generate_synthetic_trace(args.seed, profile)
    man.config = {"drones": drones, "policies": policies, "objective": args.objective,
                  "recharge_s": args.recharge_s, "synthetic_weeks": None if args.trace else args.weeks,
                  "speed": configs[0].speed, "battery_s": configs[0].battery_s, "fov_m": configs[0].fov_m,
                  "cell_size_m": configs[0].cell_size_m}
    metrics = run_sweep(trace, region, configs[0], drones, policies, (args.objective,))
    metrics_path = out / "metrics.csv"
    visits_path = out / "visits.csv"
    write_metrics_csv(metrics_path, metrics)
    write_visits_csv(visits_path, metrics, region)
    for m in metrics:
        print(f"{m.policy:>13} drones={m.n_drones} mae={m.mae:.4f} flight_h={m.flight_hours:.1f}")
    man.add_output(metrics_path)
    man.add_output(visits_path)
    man.write(out)
    return EXIT_OK


# ---------------------------------------------------------------- route

def _parse_cell(spec: str):
    from .core import CellId

    try:
        cx, cy = (int(v) for v in spec.split(","))
        return CellId(cx, cy)
    except ValueError:
        raise InputError(f"--depot expects cx,cy; got {spec!r}") from None


def cmd_route(args) -> int:
    from .routing import RoutingInstance, best_insertion, read_priorities_csv, write_route_csv

    if not args.priorities:
        raise InputError("--priorities is required")
    if not (args.speed >= 0 and args.budget >= 0 and args.cell_size > 0):
        raise InputError("speed and budget must be non-negative and cell size positive")
    out = _out_dir(args)
    man = RunManifest("route", args.seed)
    cands = read_priorities_csv(args.priorities)
    man.add_input("priorities", args.priorities)
    depot = _parse_cell(args.depot)
    inst = RoutingInstance(depot, cands, args.speed, args.budget, args.cell_size)
    route = best_insertion(inst)
    if route.total_time > inst.budget:
        raise AssertionError(f"route time {route.total_time} exceeds budget {inst.budget}")
    path = out / "route.csv"
    write_route_csv(path, route)
    man.config = {"depot": [depot.cx, depot.cy], "speed": args.speed, "budget": args.budget,
                  "cell_size": args.cell_size}
    man.add_output(path)
    man.write(out)
    print(f"stops: {len(route.stops)}  time: {route.total_time:.1f} s  reward: {route.total_reward:g}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skyquery", description="Drone video analytics and fleet routing.")
    ap.add_argument("--version", action="version", version=f"skyquery {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        p.add_argument("--out-dir", default="out", help="output directory (default ./out)")

    p = sub.add_parser("align", help="geo-align frames from a keypoint log")
    p.add_argument("--keypoints", help="keypoint log (JSON lines)")
    p.add_argument("--synthetic", type=int, metavar="FRAMES",
                   help="generate a synthetic scene with this many frames instead of reading a log")
    p.add_argument("--truth", help="true poses CSV; prints pose RMSE against it")
    p.add_argument("--region", help="region config; adds lon/lat to groups.csv")
    p.add_argument("--image-width", type=int, default=1920)
    p.add_argument("--image-height", type=int, default=1080)
    p.add_argument("--fov-deg", type=float, default=90.0, help="horizontal field of view")
    p.add_argument("--t-f", type=float, default=0.25, help="descriptor distance threshold")
    p.add_argument("--t-d-px", type=float, default=20.0, help="pixel distance threshold")
    p.add_argument("--t-d-m", type=float, default=3.0, help="group merge distance in meters")
    common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("analyze", help="run an analytics program")
    p.add_argument("--program", help="program file or shipped name (parking, pedestrians, hazards, parking_eval)")
    p.add_argument("--region", help="region config")
    p.add_argument("--bind", action="append", metavar="NAME=PATH", help="bind a program source (repeatable)")
    p.add_argument("--sample-data", action="store_true", help="bind the bundled sample logs and rasters")
    p.add_argument("--export", action="append", help="only compute these names (repeatable)")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="closed-loop fleet simulation over a parking trace")
    p.add_argument("--trace", help="trace CSV (event_id,start_ms,end_ms,lon,lat); default: synthetic")
    p.add_argument("--region", help="region config for --trace")
    p.add_argument("--program", help="program exporting the objective (default parking_eval)")
    p.add_argument("--drones", default="1-4", help="fleet sizes, e.g. 4, 1-4 or 1,2,4 (default 1-4)")
    p.add_argument("--policy", default="all", choices=["all", "ConstFreq", "PredictOnly", "ForecastRates"])
    p.add_argument("--objective", default="counts", choices=["counts", "open", "total"])
    p.add_argument("--weeks", type=float, default=8.0, help="synthetic trace length")
    p.add_argument("--recharge-s", type=float, default=1800.0)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("route", help="one-shot best-insertion route from a priorities CSV")
    p.add_argument("--priorities", help="CSV with cell_x,cell_y,priority")
    p.add_argument("--depot", default="0,0", help="depot cell cx,cy (default 0,0)")
    p.add_argument("--speed", type=float, default=17.88, help="m/s")
    p.add_argument("--budget", type=float, default=3600.0, help="battery seconds")
    p.add_argument("--cell-size", type=float, default=512.0, help="meters")
    common(p)
    p.set_defaults(func=cmd_route)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .simulator import SimulationError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SimulationError, AssertionError) as e:
        print(f"skyquery: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ValueError, OSError) as e:
        print(f"skyquery: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
