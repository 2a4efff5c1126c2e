"""Training objectives: model loss, trajectory (SLAM) loss and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .registration import SoftLMConfig
from .trajectory import Trajectory, ate, chain_odometry

BASE_LOSSES = ("squared_error", "absolute_error")


@dataclass
class LossConfig:
    gamma: Optional[float] = None  # None: balanced automatically at the first SLAM epoch
    beta: float = 0.0
    base_loss: str = "squared_error"
    tau: float = 0.3
    mask_temperature: float = 0.05
    w_rot: float = 0.0
    auto_gamma_ratio: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.base_loss not in BASE_LOSSES:
            raise ValueError(f"base_loss must be one of {BASE_LOSSES}")
        if self.mask_temperature <= 0:
            raise ValueError("mask_temperature must be positive")
        if self.w_rot < 0 or self.auto_gamma_ratio <= 0:
            raise ValueError("w_rot must be >= 0 and auto_gamma_ratio > 0")


def _node(x) -> Node:
    return x if isinstance(x, Node) else dc.const(x)


def _abs(x: Node) -> Node:
    sign = np.sign(x.value)
    return dc.custom(np.abs(x.value), "abs", ((x, lambda g: g * sign),))


def model_loss(predictions, targets, theta: Sequence = (), cfg: Optional[LossConfig] = None) -> Node:
    """Mean per-sample loss plus beta * sum of squared parameters."""
    cfg = cfg or LossConfig()
    pred, tgt = _node(predictions), _node(targets)
    if pred.value.shape != tgt.value.shape:
        raise ValueError(f"prediction shape {pred.value.shape} does not match target shape {tgt.value.shape}")
    diff = pred - tgt
    per = dc.square(diff) if cfg.base_loss == "squared_error" else _abs(diff)
    if per.value.ndim == 2:
        per = dc.sum(per, axis=1)
    data = dc.mean(per) if per.value.ndim else per
    if cfg.beta > 0 and len(theta):
        reg = dc.stack([dc.sum(dc.square(_node(t))) for t in theta])
        return data + cfg.beta * dc.sum(reg)
    return data


def combined_loss(l_model, l_slam, gamma: float) -> Node:
    """L_model + gamma * L_slam."""
    l_model = _node(l_model)
    if l_slam is None or gamma == 0:
        return l_model
    return l_model + gamma * _node(l_slam)


def soft_above_ground_mask(point_z, cell_elevation, tau: float, temperature: float) -> Node:
    """sigmoid((z - (e + tau)) / temperature): ~1 above the ground band, ~0 on it."""
    if temperature <= 0:
        raise ValueError("mask temperature must be positive")
    return dc.sigmoid((_node(point_z) - _node(cell_elevation) - tau) / temperature)


def hard_above_ground(point_z, cell_elevation, tau: float) -> np.ndarray:
    return np.asarray(point_z) > np.asarray(cell_elevation) + tau


def reference_trajectory(reference_scans, reg_cfg: SoftLMConfig, weights=None, cache=None, key=None) -> Trajectory:
    if cache is not None and key is not None and key in cache:
        return cache[key]
    with dc.no_grad():
        ref_w = None if weights is None else [_detached(w) for w in weights]
        scans = [_FramedPoints(_detached(getattr(s, "points", s)), getattr(s, "frame_index", i))
                 for i, s in enumerate(reference_scans)]
        traj = chain_odometry(scans, reg_cfg, ref_w).detach()
    if cache is not None and key is not None:
        cache[key] = traj
    return traj


class _FramedPoints:
    __slots__ = ("points", "frame_index")

    def __init__(self, points, frame_index):
        self.points = points
        self.frame_index = frame_index


def _detached(x) -> Node:
    return dc.const(x.value if isinstance(x, Node) else x)


def slam_loss(
    predicted_scans,
    reference_scans,
    reg_cfg: Optional[SoftLMConfig] = None,
    per_scan_weights=None,
    reference_weights=None,
    matches: Optional[dict] = None,
    cache: Optional[dict] = None,
    cache_key=None,
    w_rot: float = 0.0,
) -> Node:
    """ATE between odometry on predicted scans and on (constant) reference scans.

    Predicted scans may hold graph nodes; the reference branch is evaluated
    without recording a graph so it never receives gradient.
    """
    reg_cfg = reg_cfg or SoftLMConfig()
    if len(predicted_scans) != len(reference_scans):
        raise ValueError("predicted and reference sequences differ in length")
    if len(predicted_scans) < 2:
        raise ValueError("slam_loss needs at least two scans")
    ref = reference_trajectory(reference_scans, reg_cfg, reference_weights, cache, cache_key)
    pred = chain_odometry(predicted_scans, reg_cfg, per_scan_weights, matches=matches)
    if list(pred.frame_indices) != list(ref.frame_indices):
        raise ValueError("predicted and reference scans cover different frames")
    return ate(pred, ref, w_rot=w_rot)
