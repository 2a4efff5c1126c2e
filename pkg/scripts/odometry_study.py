"""Registration and odometry studies behind the pose-recovery and drift checks.

Examples:
    python3 scripts/odometry_study.py recovery --iterations 30 60 100
    python3 scripts/odometry_study.py drift --seeds 0-9 --frames 50
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from diffslam import diffcore as dc
from diffslam.geometry import exp_se3, relative_angle
from diffslam.registration import SoftLMConfig, register_pair, voxel_downsample
from diffslam.synthworld import make_sequence, pole_world, street_world
from diffslam.tasks import POLE_SENSOR
from diffslam.trajectory import ate_value, chain_odometry


def parse_seeds(text: str) -> list[int]:
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi) + 1)) if hi else [int(lo)]


def random_motion(rng, max_t: float, max_deg: float):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_t) / np.linalg.norm(t)
    return exp_se3(np.concatenate([axis * np.deg2rad(rng.uniform(0, max_deg)), t]))


def clouds(kind: str) -> list[np.ndarray]:
    if kind == "random":
        return [np.random.default_rng(s).uniform(-3, 3, (500, 3)) for s in range(5)]
    out = []
    for seed in range(5):
        pts = make_sequence(street_world(seed=seed, length=40.0), "straight", 2).static_scans[0].points
        out.append(pts[voxel_downsample(pts, 0.3, 2048)])
    return out


def recovery(args) -> None:
    for kind in ("street", "random"):
        cs = clouds(kind)
        for it in args.iterations:
            ok = 0
            for k in range(args.pairs):
                rng = np.random.default_rng(1000 + k)
                p = cs[k % len(cs)]
                truth = random_motion(rng, args.max_t, args.max_deg)
                est = register_pair(p, truth.apply(p) + rng.normal(0, 0.005, p.shape),
                                    SoftLMConfig(iterations=it)).relative_pose.detach()
                dt = np.linalg.norm(est.translation - truth.translation)
                ok += dt <= 1e-2 and np.rad2deg(relative_angle(est.rotation, truth.rotation)) <= 0.5
            print(f"{kind:7s} iterations {it:4d}: {ok}/{args.pairs} recovered", flush=True)


def drift(args) -> None:
    half = args.frames // 2
    wins = 0
    for seed in parse_seeds(args.seeds):
        t0 = time.perf_counter()
        seq = make_sequence(pole_world(seed=seed, length=0.5 * args.frames + 10, sensor=POLE_SENSOR),
                            "straight", args.frames, speed=0.5)
        with dc.no_grad():
            est = chain_odometry(seq.static_scans).detach()
        first = ate_value(est.slice(0, half), seq.trajectory.slice(0, half))
        second = ate_value(est.slice(half, args.frames), seq.trajectory.slice(half, args.frames))
        wins += second > first
        print(f"seed {seed}: first-half ATE {first:.5f}, second-half {second:.5f} "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"second half larger in {wins} runs")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="study", required=True)
    rp = sub.add_parser("recovery", help="pose recovery rate vs unroll depth")
    rp.add_argument("--iterations", type=int, nargs="+", default=[30, 60])
    rp.add_argument("--pairs", type=int, default=50)
    rp.add_argument("--max-t", type=float, default=0.5)
    rp.add_argument("--max-deg", type=float, default=10.0)
    dp = sub.add_parser("drift", help="first- vs second-half ATE of chained odometry")
    dp.add_argument("--seeds", default="0-9")
    dp.add_argument("--frames", type=int, default=50)
    args = ap.parse_args()
    {"recovery": recovery, "drift": drift}[args.study](args)


if __name__ == "__main__":
    main()
