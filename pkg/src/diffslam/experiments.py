"""Paired baseline / SLAM-loss training runs used by the directional checks.

A *run pair* trains the same task twice on the same synthetic sequence, from
the same initial weights and window order: once with gamma = 0 (model loss
only) and once with the configured gamma (auto-balanced by default). Only the
final held-out metrics are compared.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Optional

from .config import ExperimentConfig, build_dataset


@dataclass
class PairResult:
    seed: int
    baseline: dict
    slam: dict
    gamma: Optional[float]
    slam_failures: int
    seconds: float

    def not_worse(self, metric: str, higher_is_better: bool = False) -> bool:
        b, s = self.baseline[metric], self.slam[metric]
        return s >= b if higher_is_better else s <= b


def run_pair(cfg: ExperimentConfig, seed: int, eval_ate: bool = True) -> PairResult:
    """Train baseline and SLAM-loss models for one seed (world and init share it)."""
    from .tasks import train

    t0 = time.perf_counter()
    cfg = dataclasses.replace(
        cfg,
        world=dataclasses.replace(cfg.world, seed=seed),
        schedule=dataclasses.replace(cfg.schedule, seed=seed),
    )
    ds = build_dataset(cfg)
    kw = dict(reg_cfg=cfg.registration, eval_ate=eval_ate, evaluate_every=cfg.schedule.epochs)
    _, base = train(cfg.task, ds, cfg.schedule, dataclasses.replace(cfg.loss, gamma=0.0), **kw)
    _, slam = train(cfg.task, ds, cfg.schedule, cfg.loss, **kw)
    return PairResult(seed, base.last(), slam.last(), slam.gamma, slam.slam_failures, time.perf_counter() - t0)
