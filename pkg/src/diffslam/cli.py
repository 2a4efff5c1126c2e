"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (configuration, arguments, files),
2 failure while running (degenerate registration, divergence, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .config import PRESETS, ConfigError, ExperimentConfig, build_dataset, load_config, parse_value, to_dict
from .formats import (
    FormatError,
    list_scans,
    load_checkpoint,
    read_scan,
    read_trajectory,
    save_checkpoint,
    write_history,
    write_sequence,
    write_trajectory,
)
from .registration import DegenerateGeometryError, register_pair
from .tasks import HISTORY_COLUMNS, DisplacementModel, ElevationModel, TrainingDiverged, evaluate_model, train
from .trajectory import RegistrationFailure, TrajectoryError, aligned_ate, ate_value, chain_odometry, rpe

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _split_overrides(rest: Sequence[str]) -> dict:
    """``--a.b value`` pairs left over by argparse."""
    out = {}
    it = iter(rest)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"{tok}: expected --section.key value")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise ConfigError(f"{key}: missing value")
        out[key] = parse_value(val)
    return out


def _config(args, rest) -> ExperimentConfig:
    return load_config(args.config, args.preset, _split_overrides(rest))


def _out_dir(args, cfg: Optional[ExperimentConfig] = None) -> Path:
    d = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir if cfg else ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth(args, rest) -> int:
    cfg = _config(args, rest)
    ds = build_dataset(cfg)
    manifest = write_sequence(ds.sequence, _out_dir(args, cfg))
    print(f"wrote {len(ds)} frames, manifest {manifest}")
    return EXIT_OK


def cmd_register(args, rest) -> int:
    cfg = _config(args, rest)
    src, tgt = read_scan(args.source), read_scan(args.target)
    with dc.no_grad():
        res = register_pair(src, tgt, cfg.registration)
    pose = res.relative_pose.detach()
    m = np.hstack([pose.rotation, pose.translation[:, None]])
    print("pose " + " ".join("%.17g" % v for v in m.ravel()))
    print("residual %.17g" % float(res.final_residual.value))
    return EXIT_OK


def cmd_odometry(args, rest) -> int:
    cfg = _config(args, rest)
    paths = list_scans(args.scan_dir)
    if len(paths) < 2:
        raise ConfigError(f"{args.scan_dir}: need at least two .bin scans")
    scans = [read_scan(p, i) for i, p in enumerate(paths)]
    with dc.no_grad():
        traj = chain_odometry(scans, cfg.registration).detach()
    out = _out_dir(args, cfg)
    write_trajectory(traj, out / "trajectory_kitti.txt", "kitti")
    write_trajectory(traj, out / "trajectory_tum.txt", "tum")
    print(f"wrote {len(traj)} poses to {out}")
    return EXIT_OK


def cmd_eval_traj(args, rest) -> int:
    _split_overrides(rest)
    # ATE compares waypoints without alignment, so both trajectories are
    # first expressed relative to their own first pose.
    est = read_trajectory(args.estimate, args.format).reanchored()
    ref = read_trajectory(args.reference, args.format).reanchored()
    t, r = rpe(est, ref, args.delta)
    print(f"ate {ate_value(est, ref):.17g}")
    print(f"rpe_trans {t:.17g}")
    print(f"rpe_rot {r:.17g}")
    print(f"ate_aligned {aligned_ate(est, ref):.17g} (rigidly aligned, report only)")
    return EXIT_OK


def cmd_train(args, rest) -> int:
    cfg = _config(args, rest)
    ds = build_dataset(cfg)
    out = _out_dir(args, cfg)
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))

    def report(row):
        if not args.quiet:
            print(" ".join(f"{k}={'-' if row[k] is None else format(row[k], '.6g')}" for k in HISTORY_COLUMNS))

    model, hist = train(cfg.task, ds, cfg.schedule, cfg.loss, cfg.registration, progress=report)
    save_checkpoint(cfg.task, model.theta, out / "model.json", {"gamma": hist.gamma, "slam_failures": hist.slam_failures})
    write_history(hist.rows, out / "history.csv", HISTORY_COLUMNS)
    print(f"wrote {out / 'model.json'} and {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval_task(args, rest) -> int:
    cfg = _config(args, rest)
    task, theta, _ = load_checkpoint(args.checkpoint)
    if task != cfg.task:
        cfg.task = task
    ds = build_dataset(cfg)
    model = (ElevationModel if task == "elevation" else DisplacementModel)(theta)
    metrics = evaluate_model(task, ds, model, cfg.loss, cfg.registration)
    for k, v in metrics.items():
        if v is not None:
            print(f"{k} {v:.17g}")
    return EXIT_OK


def cmd_gradcheck(args, rest) -> int:
    from .gradcheck import run_suite

    _split_overrides(rest)
    results = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name} {err:.3e}")
        worst = max(worst, err)
    print(f"max {worst:.3e} ({'ok' if worst <= args.tol else 'FAIL'} at tolerance {args.tol:g})")
    return EXIT_OK if worst <= args.tol else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffslam", description="Differentiable odometry toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        return sp

    sp = with_config(sub.add_parser("synth", help="render a synthetic sequence"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("register", help="align SOURCE onto TARGET"))
    sp.add_argument("source")
    sp.add_argument("target")
    sp.set_defaults(func=cmd_register)

    sp = with_config(sub.add_parser("odometry", help="chain registrations over a scan directory"))
    sp.add_argument("scan_dir")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_odometry)

    sp = sub.add_parser("eval-traj", help="ATE and RPE of ESTIMATE against REFERENCE")
    sp.add_argument("estimate")
    sp.add_argument("reference")
    sp.add_argument("--format", choices=("kitti", "tum"), default="kitti")
    sp.add_argument("--delta", type=int, default=1)
    sp.set_defaults(func=cmd_eval_traj)

    sp = with_config(sub.add_parser("train", help="train a task model"))
    sp.add_argument("--out")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval-task", help="held-out metrics of a checkpoint"))
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_eval_task)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args, rest)
    except (RegistrationFailure, DegenerateGeometryError, TrainingDiverged, TrajectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
