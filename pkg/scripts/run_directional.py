"""Baseline vs SLAM-loss run pairs over several seeds.

Examples:
    python3 scripts/run_directional.py --preset desk --seeds 0-9
    python3 scripts/run_directional.py --preset desk --task displacement --seeds 100-103 \
        --override schedule.learning_rate=0.02 --out runs/disp_dev.json
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from diffslam.config import load_config, parse_value
from diffslam.experiments import run_pair

METRICS = {"elevation": ("mse", "recall", "miou", "ate"), "displacement": ("chamfer", "ate")}


def parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--config")
    ap.add_argument("--task", choices=("elevation", "displacement"))
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()

    overrides = {}
    for item in args.override:
        key, _, value = item.partition("=")
        overrides[key] = parse_value(value)
    if args.task:
        overrides["task"] = args.task
    cfg = load_config(args.config, args.preset, overrides)

    results, wins = [], {m: 0 for m in METRICS[cfg.task]}
    for seed in parse_seeds(args.seeds):
        r = run_pair(cfg, seed)
        cells = []
        for m in METRICS[cfg.task]:
            better = r.not_worse(m, higher_is_better=(m in ("recall", "miou")))
            wins[m] += better
            cells.append(f"{m} {r.baseline[m]:.5g} -> {r.slam[m]:.5g}{'' if better else ' (worse)'}")
        print(f"seed {seed}: " + ", ".join(cells) + f", gamma {r.gamma:.3g}, {r.seconds:.0f}s", flush=True)
        results.append({"seed": seed, "baseline": r.baseline, "slam": r.slam, "gamma": r.gamma,
                        "slam_failures": r.slam_failures, "seconds": r.seconds})
    n = len(results)
    print("not worse with SLAM loss: " + ", ".join(f"{m} {k}/{n}" for m, k in wins.items()))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
