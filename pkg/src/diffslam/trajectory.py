"""Odometry trajectories and the metrics computed on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import diffcore as dc
from .diffcore import Node
from .geometry import DiffPose, Pose, as_diff, compose, inverse, relative_angle, rotation_angle
from .registration import MatchLog, SoftLMConfig, register_pair, voxel_downsample


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    """World-from-sensor poses (``Pose`` or ``DiffPose``) with frame indices."""

    poses: list
    frame_indices: list[int]

    def __post_init__(self):
        self.frame_indices = [int(f) for f in self.frame_indices]
        if len(self.poses) != len(self.frame_indices):
            raise TrajectoryError("poses and frame_indices differ in length")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise TrajectoryError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def detach(self) -> "Trajectory":
        return Trajectory([p.detach() if isinstance(p, DiffPose) else p for p in self.poses], list(self.frame_indices))

    def positions(self) -> np.ndarray:
        return np.array([p.detach().translation if isinstance(p, DiffPose) else p.translation for p in self.poses])

    def reanchored(self) -> "Trajectory":
        """Express every pose relative to the first one."""
        t = self.detach()
        base = inverse(t.poses[0])
        return Trajectory([compose(base, p) for p in t.poses], list(t.frame_indices))

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.poses[start:stop], self.frame_indices[start:stop])


# -- odometry -----------------------------------------------------------------

class RegistrationFailure(RuntimeError):
    def __init__(self, pair: int, cause: Exception):
        super().__init__(f"registration of pair {pair} (scan {pair + 1} onto scan {pair}) failed: {cause}")
        self.pair = pair
        self.cause = cause


def _points_node(scan) -> Node:
    pts = getattr(scan, "points", scan)
    return pts if isinstance(pts, Node) else dc.const(pts)


def _frame_of(scan, default: int) -> int:
    return int(getattr(scan, "frame_index", default))


def chain_odometry(
    scans: Sequence,
    cfg: Optional[SoftLMConfig] = None,
    per_scan_weights: Optional[Sequence] = None,
    matches: Optional[dict] = None,
    downsample: bool = True,
) -> Trajectory:
    """pose_{i+1} = pose_i o register(scan_{i+1} -> scan_i).

    Scans may be LabeledScans, arrays or (N, 3) nodes; weights (one per scan,
    optional) multiply the correspondence weights of the matching points.
    ``matches`` maps a pair index to a ``MatchLog`` (recorded on first use,
    replayed afterwards); it also freezes the voxel selection.
    """
    cfg = cfg or SoftLMConfig()
    if len(scans) < 2:
        raise TrajectoryError("chain_odometry needs at least two scans")
    frames = [_frame_of(s, i) for i, s in enumerate(scans)]
    if any(b != a + 1 for a, b in zip(frames, frames[1:])):
        raise TrajectoryError(f"scan frames must be contiguous, got {frames}")

    pts, wts = [], []
    for i, s in enumerate(scans):
        p = _points_node(s)
        w = None if per_scan_weights is None else per_scan_weights[i]
        if downsample:
            key = ("select", i)
            if matches is not None and key in matches:
                sel = matches[key]
            else:
                sel = voxel_downsample(p.value, cfg.voxel_leaf, cfg.max_points)
                if matches is not None:
                    matches[key] = sel
            if len(sel) < len(p.value):
                p = dc.gather(p, sel)
                w = None if w is None else dc.gather(w if isinstance(w, Node) else dc.const(w), sel)
        pts.append(p)
        wts.append(w)

    poses = [DiffPose.identity()]
    for i in range(len(scans) - 1):
        log = None
        if matches is not None:
            log = matches.setdefault(i, MatchLog()).rewind()
        try:
            res = register_pair(pts[i + 1], pts[i], cfg, wts[i + 1], wts[i], matches=log)
        except ValueError as exc:
            raise RegistrationFailure(i, exc) from exc
        poses.append(poses[-1] @ res.relative_pose)
    return Trajectory(poses, frames)


# -- metrics ------------------------------------------------------------------

def _translation_node(p) -> Node:
    return p.translation if isinstance(p, DiffPose) else dc.const(p.translation)


def _check_pair(traj: Trajectory, ref: Trajectory) -> None:
    if len(traj) != len(ref):
        raise TrajectoryError(f"trajectory lengths differ: {len(traj)} vs {len(ref)}")
    if list(traj.frame_indices) != list(ref.frame_indices):
        raise TrajectoryError("trajectories cover different frames")


def ate(traj: Trajectory, ref: Trajectory, w_rot: float = 0.0) -> Node:
    """Mean squared waypoint distance (no alignment), differentiable.

    With ``w_rot > 0`` adds ``w_rot * mean(angle_i^2)`` of the per-waypoint
    rotation difference.
    """
    _check_pair(traj, ref)
    n = len(traj)
    terms = [dc.sum(dc.square(_translation_node(a) - _translation_node(b))) for a, b in zip(traj.poses, ref.poses)]
    loss = dc.stack(terms)
    out = dc.mean(loss)
    if w_rot > 0.0:
        ang = [_angle_sq(as_diff(a).rotation, as_diff(b).rotation) for a, b in zip(traj.poses, ref.poses)]
        out = out + w_rot * dc.mean(dc.stack(ang))
    return out


def _angle_sq(ra: Node, rb: Node) -> Node:
    """Squared geodesic angle between two rotation nodes."""
    c_node = (dc.sum(ra * rb) - 1.0) * 0.5  # trace(ra^T rb) = sum(ra * rb)
    c = float(np.clip(c_node.value, -1.0, 1.0))
    theta = float(np.arccos(c))
    if 1.0 - c < 1e-8:
        # theta^2 ~ 2(1 - c) + (1 - c)^2 / 3
        slope = -2.0 - 2.0 * (1.0 - c) / 3.0
    else:
        slope = -2.0 * theta / np.sqrt(1.0 - c * c)
    return dc.custom(theta * theta, "angle_sq", ((c_node, lambda g: g * slope),))


def ate_value(traj: Trajectory, ref: Trajectory) -> float:
    with dc.no_grad():
        return float(ate(traj.detach(), ref.detach()).value)


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid (no scale) least-squares transform mapping src positions onto dst."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return Pose(r, mu_d - r @ mu_s)


def aligned_ate(traj: Trajectory, ref: Trajectory) -> float:
    """ATE after rigid alignment; for evaluation reports only, not a loss."""
    _check_pair(traj, ref)
    a, b = traj.positions(), ref.positions()
    t = umeyama_alignment(a, b)
    return float(np.mean(np.sum((t.apply(a) - b) ** 2, axis=1)))


def rpe(traj: Trajectory, ref: Trajectory, delta: int = 1) -> tuple[float, float]:
    """Mean translational (m) and rotational (rad) relative pose error."""
    _check_pair(traj, ref)
    if len(traj) < delta + 1:
        raise TrajectoryError(f"need at least {delta + 1} poses for delta={delta}")
    t, r = traj.detach().poses, ref.detach().poses
    trans, rot = [], []
    for i in range(len(t) - delta):
        rel_ref = compose(inverse(r[i]), r[i + delta])
        rel_est = compose(inverse(t[i]), t[i + delta])
        e = compose(inverse(rel_ref), rel_est)
        trans.append(np.linalg.norm(e.translation))
        rot.append(rotation_angle(e.rotation))
    return float(np.mean(trans)), float(np.mean(rot))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of the two mean squared nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    ia = cKDTree(b).query(a, k=1)[1]
    ib = cKDTree(a).query(b, k=1)[1]
    # recompute distances from coordinates so the result matches brute force bit for bit
    da = np.sum((a - b[ia]) ** 2, axis=1)
    db = np.sum((b - a[ib]) ** 2, axis=1)
    return float(np.mean(da) + np.mean(db))


def chamfer_node(a, b) -> Node:
    """Differentiable Chamfer distance with nearest-neighbour indices frozen."""
    a = a if isinstance(a, Node) else dc.const(a)
    b = b if isinstance(b, Node) else dc.const(b)
    ia = cKDTree(b.value).query(a.value, k=1)[1]
    ib = cKDTree(a.value).query(b.value, k=1)[1]
    da = dc.sum(dc.square(a - dc.gather(b, ia)), axis=1)
    db = dc.sum(dc.square(b - dc.gather(a, ib)), axis=1)
    return dc.mean(da) + dc.mean(db)
