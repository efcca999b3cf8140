"""Command-line entry point: ``clothtrack {gen,calibrate,track,eval,bench}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bench import EXTRA_METHODS, METHODS, run_bench, summarize, write_bench_csv
from .datagen import (
    POLICIES,
    ScenarioConfig,
    evaluate,
    generate_synthetic_trajectories,
    load_trajectories,
    read_dataset,
    save_trajectories,
    write_dataset,
)
from .dynamics import SimParams, SimulationError, simulate_segment
from .mesh import ClothState, write_obj
from .optimize import TtoConfig
from .tracker import (
    CalibrationGrid,
    TrackerConfig,
    TrackingError,
    calibrate,
    generate_pseudo_dataset,
)

log = logging.getLogger("clothtrack")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_TRACKING = 5

ABLATE_FLAGS = {
    "no-pseudo-act": "no_pseudo_action",
    "no-dyn-init": "no_dyn_init",
    "no-act-cond": "no_act_cond",
    "no-tto2": "no_tto2",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling


def _load_config(path: Optional[str]) -> dict:
    """JSON file with optional sections scenario / tracker / tto1 / tto2 / sim."""
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - {"scenario", "tracker", "tto1", "tto2", "sim"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _scenario(args, cfg: dict) -> ScenarioConfig:
    sc = ScenarioConfig.from_dict(cfg.get("scenario", {}))
    over = {}
    for flag, field in (
        ("seed", "rng_seed"),
        ("trajectories", "num_trajectories"),
        ("segments", "segments_per_trajectory"),
        ("policy", "policy"),
        ("substeps", "substeps_per_action"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            over[field] = v
    cam = {}
    if getattr(args, "noise", None) is not None:
        cam["depth_noise_sigma"] = args.noise
    if getattr(args, "dropout", None) is not None:
        cam["dropout_rate"] = args.dropout
    if cam:
        over["camera"] = replace(sc.camera, **cam)
    return replace(sc, **over)


def _tto(base: TtoConfig, section: dict, args) -> TtoConfig:
    unknown = set(section) - set(TtoConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown TTO keys: {sorted(unknown)}")
    t = replace(base, **section)
    over = {}
    for flag, field in (("tto_alpha", "alpha"), ("tto_beta", "beta"), ("tto_iters", "iterations"), ("tto_lr", "learning_rate")):
        v = getattr(args, flag, None)
        if v is not None:
            over[field] = v
    return replace(t, **over)


def _tracker(args, cfg: dict) -> TrackerConfig:
    section = dict(cfg.get("tracker", {}))
    unknown = set(section) - set(TrackerConfig.__dataclass_fields__) - {"tto1", "tto2"}
    if unknown:
        raise ValueError(f"unknown tracker keys: {sorted(unknown)}")
    section.pop("tto1", None), section.pop("tto2", None)
    tc = TrackerConfig(**section)
    tc = replace(
        tc,
        tto1=_tto(tc.tto1, cfg.get("tto1", {}), args),
        tto2=_tto(tc.tto2, cfg.get("tto2", {}), args),
    )
    if getattr(args, "ablate", None):
        tc = replace(tc, ablation=ABLATE_FLAGS[args.ablate])
    if getattr(args, "calibration", None):
        tc = replace(tc, calibration_mode=args.calibration)
    if getattr(args, "calibration_pick", None):
        tc = replace(tc, calibration_pick=args.calibration_pick)
    return tc


def _grid(args) -> CalibrationGrid:
    return CalibrationGrid.grid_125() if getattr(args, "grid_125", False) else CalibrationGrid()


def _sim(cfg: dict) -> SimParams:
    return SimParams.from_dict({**SimParams().to_dict(), **cfg.get("sim", {})})


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    scenario = _scenario(args, cfg)
    t0 = time.perf_counter()
    mesh, trajs = generate_synthetic_trajectories(scenario)
    save_trajectories(args.out, scenario, trajs)
    print(json.dumps({
        "out": str(args.out),
        "trajectories": len(trajs),
        "segments": sum(len(t.segments) for t in trajs),
        "vertices": mesh.num_vertices,
        "seconds": round(time.perf_counter() - t0, 3),
    }))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    scenario, mesh, trajs = load_trajectories(args.data)
    by_id = {t.trajectory_id: t for t in trajs}
    if args.trajectory not in by_id:
        raise ValueError(f"no trajectory {args.trajectory} in {args.data}")
    traj = by_id[args.trajectory]
    if not 0 <= args.segment < len(traj.segments):
        raise ValueError(f"trajectory {args.trajectory} has {len(traj.segments)} segments")
    grid = _grid(args)
    base = _sim(cfg)
    state = traj.initial_state
    t0 = time.perf_counter()
    # later segments start from the calibrated plain rollout of earlier ones
    for seg in traj.segments[: args.segment]:
        cal = calibrate(mesh, state, seg.actions, seg.observations[-1], grid, scenario.camera, base)
        last = simulate_segment(mesh, state, cal.params, seg.actions)[-1]
        state = ClothState(last.positions, np.zeros_like(last.velocities), last.time_index)
    seg = traj.segments[args.segment]
    cal = calibrate(mesh, state, seg.actions, seg.observations[-1], grid, scenario.camera, base)
    ranked = cal.ranked()
    out = {
        "trajectory": args.trajectory,
        "segment": args.segment,
        "combinations": len(cal.combos),
        "winner": {"stiffness": cal.combo[0], "dynamic_friction": cal.combo[1], "particle_friction": cal.combo[2]},
        "objective": cal.objectives[ranked[0]],
        "median_combo": list(cal.combos[ranked[len(ranked) // 2]]),
        "top5": [[list(cal.combos[k]), cal.objectives[k]] for k in ranked[:5]],
        "fallback": cal.fallback,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    text = json.dumps(out, indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


REPORT_FIELDS = (
    "method", "trajectory_id", "segment_index", "partial", "pre_tto2_chamfer", "final_chamfer",
    "line_search_retries", "calibration", "calibration_time", "wall_time",
)


def cmd_track(args) -> int:
    cfg = _load_config(args.config)
    tracker = _tracker(args, cfg)
    scenario, mesh, trajs = load_trajectories(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diag_path = Path(args.diagnostics) if args.diagnostics else out / "diagnostics.jsonl"
    frames = out / "frames" if args.dump_frames else None
    if frames is not None:
        frames.mkdir(exist_ok=True)

    with open(diag_path, "w") as diag:
        def on_event(ev):
            diag.write(json.dumps({"method": tracker.method_name, **ev}, default=_json_default) + "\n")
            diag.flush()

        def on_result(tid, seg, res):
            if frames is None:
                return
            for k, st in enumerate(res.states):
                write_obj(frames / f"traj{tid:04d}_seg{seg + 1:02d}_step{k:03d}.obj", st.positions, mesh.edges)
            write_obj(frames / f"traj{tid:04d}_seg{seg + 1:02d}_final.obj", res.final_state.positions, mesh.edges)

        dataset = generate_pseudo_dataset(
            mesh, trajs, tracker, scenario.camera, _grid(args), _sim(cfg), on_event, on_result
        )
    dataset.provenance["method"] = tracker.method_name
    dataset.provenance["scenario"] = scenario.to_dict()
    manifest = write_dataset(out, mesh, dataset, scenario.camera)

    report = Path(args.report) if args.report else out / "report.csv"
    with open(report, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in dataset.records:
            if r.segment_index < 0:
                continue
            d = r.diagnostics
            w.writerow({
                "method": tracker.method_name,
                "trajectory_id": r.trajectory_id,
                "segment_index": r.segment_index,
                "partial": int(r.partial),
                "pre_tto2_chamfer": d.get("pre_tto2_chamfer", ""),
                "final_chamfer": d.get("final_chamfer", ""),
                "line_search_retries": sum(d.get("line_search_retries", [])),
                "calibration": "/".join(f"{v:g}" for v in d.get("calibration") or []),
                "calibration_time": d.get("calibration_time", ""),
                "wall_time": d.get("wall_time", ""),
            })
    partial = sum(r.partial for r in dataset.records)
    print(json.dumps({
        "out": str(out),
        "method": tracker.method_name,
        "records": len(manifest["records"]),
        "partial": partial,
        "record_hash": manifest["record_hash"],
    }))
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh, dataset, manifest = read_dataset(args.dataset)
    trajs = None
    camera = None
    if args.data:
        scenario, _, trajs = load_trajectories(args.data)
        camera = scenario.camera
    if camera is None:
        sc = manifest.get("provenance", {}).get("scenario")
        camera = ScenarioConfig.from_dict(sc).camera if sc else ScenarioConfig().camera
    report = evaluate(mesh, dataset, trajs, camera, squared=not args.unsquared)
    method = manifest.get("provenance", {}).get("method", "unknown")
    agg = report["aggregate"]
    row = {
        "method": method,
        "visible_chamfer": agg["table_entry"],
        "visible_chamfer_median": agg["visible_chamfer"]["median"],
        "final_chamfer_median": agg["final_chamfer"]["median"],
        "mesh_error_median": agg.get("mesh_error", {}).get("median", float("nan")),
        "collisions_total": agg["collisions_total"],
        "records": agg["num_records"],
        "partial": agg["num_partial"],
    }
    report["method"] = method
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, default=_json_default) + "\n")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
    print(json.dumps(row, default=_json_default))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    scenario = _scenario(args, cfg)
    tracker = _tracker(args, cfg)
    if args.seed_list:
        seeds = [int(s) for s in args.seed_list.split(",")]
    else:
        seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    methods = list(METHODS) + (list(EXTRA_METHODS) if args.extras else [])
    t0 = time.perf_counter()
    rows = run_bench(seeds, methods, scenario, _grid(args), tracker, args.workers)
    write_bench_csv(args.out, rows)
    print(json.dumps({
        "out": str(args.out),
        "rows": len(rows),
        "median_visible_chamfer": summarize(rows),
        "seconds": round(time.perf_counter() - t0, 1),
    }, default=_json_default))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_tto_flags(p):
    p.add_argument("--tto-alpha", type=float, help="Chamfer weight")
    p.add_argument("--tto-beta", type=float, help="rigidity weight")
    p.add_argument("--tto-iters", type=int, help="optimizer iterations")
    p.add_argument("--tto-lr", type=float, help="optimizer learning rate (m/step)")


def _add_scenario_flags(p, segments_default=None, substeps_default=None):
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--segments", type=int, default=segments_default, help="pick-and-place segments per trajectory")
    p.add_argument("--substeps", type=int, default=substeps_default, help="low-level actions per segment motion")
    p.add_argument("--noise", type=float, help="depth noise sigma (m)")
    p.add_argument("--dropout", type=float, help="point dropout rate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clothtrack", description="Action-conditioned cloth tracking on synthetic pick-and-place data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate synthetic trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--config")
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="grid-search simulator parameters for one segment")
    p.add_argument("--data", required=True, help="trajectory directory written by gen")
    p.add_argument("--trajectory", type=int, default=0)
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--grid-125", action="store_true", help="use 5 friction values per axis (125 combos)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("track", help="track trajectories and write a pseudo-label dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=sorted(ABLATE_FLAGS))
    p.add_argument("--calibration", choices=("online", "offline"))
    p.add_argument("--calibration-pick", choices=("best", "median"))
    p.add_argument("--grid-125", action="store_true")
    p.add_argument("--dump-frames", action="store_true", help="write per-step OBJ meshes under OUT/frames")
    p.add_argument("--diagnostics", help="JSONL diagnostics path (default OUT/diagnostics.jsonl)")
    p.add_argument("--report", help="CSV report path (default OUT/report.csv)")
    p.add_argument("--config")
    _add_tto_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="metrics report for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--data", help="trajectory directory with ground truth")
    p.add_argument("--unsquared", action="store_true", help="Chamfer on plain instead of squared distances")
    p.add_argument("--out", help="full JSON report")
    p.add_argument("--csv", help="one-row CSV summary")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="ablation matrix over seeds, one CSV")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--seed-list", help="comma-separated seeds (overrides --seeds)")
    p.add_argument("--out", required=True)
    p.add_argument("--extras", action="store_true", help="also run median-calibration and beta=0 cells")
    p.add_argument("--workers", type=int, help="worker processes (default: CLOTHTRACK_WORKERS or 1)")
    p.add_argument("--grid-125", action="store_true")
    p.add_argument("--config")
    _add_scenario_flags(p, segments_default=1, substeps_default=20)
    _add_tto_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrackingError, SimulationError) as exc:
        return _fail(EXIT_TRACKING, exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError, json.JSONDecodeError) as exc:
        return _fail(EXIT_IO, exc)
    except (ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except Exception as exc:  # pragma: no cover - last-resort error record
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
