"""Finite-difference checks of the analytic gradients.

Every check freezes the discrete choices (correspondences, voxel selections,
nearest neighbours) on the unperturbed input, then compares reverse-mode
gradients with central differences evaluated on the same frozen choices.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import diffcore as dc
from .geometry import DiffPose, exp_se3
from .losses import LossConfig, model_loss, slam_loss
from .registration import MatchLog, SoftLMConfig, register_pair, voxel_downsample
from .synthworld import SensorSpec, make_sequence, street_world
from .tasks import DisplacementModel, ElevationModel, GridSpec, cell_truth, displacement_forward, elevation_forward, pillarize


def relative_error(analytic: float, numeric: float, eps: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), eps)


def _central(f: Callable[[np.ndarray], float], x: np.ndarray, index, h: float) -> float:
    xp, xm = x.copy(), x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def slam_pair(seed: int = 0, n_points: int = 200, noise: float = 0.02):
    """Two consecutive 200-point scans plus noisy "predicted" copies of them.

    The second scan is the first one under a small known motion with 1 cm
    jitter, so every point has a correspondence well inside the matching
    radius and carries a non-negligible gradient.
    """
    rng = np.random.default_rng(seed)
    world = street_world(seed=seed, length=20.0, sensor=SensorSpec(beams=16, azimuth_steps=90))
    scan = make_sequence(world, "straight", 2, speed=0.5).static_scans[0]
    a = scan.points[voxel_downsample(scan.points, 0.3, 10**9)]
    if len(a) < n_points:
        raise ValueError(f"rendered scan has only {len(a)} distinct voxels")
    a = a[np.sort(rng.choice(len(a), n_points, replace=False))]
    motion = exp_se3(np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.1, 3)]))
    b = motion.apply(a) + rng.normal(0, 0.01, a.shape)
    ref = [a, b]
    pred = [p + rng.normal(0.0, noise, p.shape) for p in ref]
    return pred, ref


def check_slam_loss(seed: int = 0, n_points: int = 200, n_probe: int = 10, h: float = 1e-5,
                    cfg: SoftLMConfig | None = None) -> float:
    """Max relative error of d slam_loss / d (predicted coordinates) over probed points."""
    cfg = cfg or SoftLMConfig()
    pred, ref = slam_pair(seed, n_points)
    rng = np.random.default_rng(seed + 1)
    matches: dict = {}
    cache: dict = {}

    def loss(arrays, lifted=False):
        nodes = [dc.lift(a) if lifted else dc.const(a) for a in arrays]
        return nodes, slam_loss(nodes, ref, cfg, matches=matches, cache=cache, cache_key="ref")

    nodes, out = loss(pred, lifted=True)
    dc.backward(out)
    worst = 0.0
    probes = [(int(s), int(i)) for s, i in zip(rng.integers(0, 2, n_probe), rng.integers(0, n_points, n_probe))]
    for s, i in probes:
        for k in range(3):
            def f(x, s=s):
                arrays = list(pred)
                arrays[s] = x
                with dc.no_grad():
                    return float(loss(arrays)[1].value)
            num = _central(f, pred[s], (i, k), h)
            worst = max(worst, relative_error(float(nodes[s].grad[i, k]), num))
    return worst


def check_registration(seed: int = 0, h: float = 1e-5) -> float:
    """Gradient of the final residual w.r.t. source coordinates."""
    pred, ref = slam_pair(seed, 120)
    src, tgt = pred[1], ref[0]
    log = MatchLog()
    cfg = SoftLMConfig()

    def f(x: np.ndarray) -> float:
        with dc.no_grad():
            return float(register_pair(x, tgt, cfg, matches=log.rewind()).final_residual.value)

    leaf = dc.lift(src)
    res = register_pair(leaf, tgt, cfg, matches=log.rewind())
    dc.backward(res.final_residual)
    rng = np.random.default_rng(seed)
    return max(relative_error(float(leaf.grad[i, k]), _central(f, src, (i, k), h))
               for i in rng.choice(len(src), 5, replace=False) for k in range(3))


def check_exp_map(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    xi = rng.normal(0, 0.5, 6)
    return dc.grad_check(lambda x: dc.sum(DiffPose.exp(x).rotation) + dc.sum(DiffPose.exp(x).translation), xi)


def check_elevation(seed: int = 0, h: float = 1e-5) -> float:
    """Gradient of the per-cell elevation MSE w.r.t. every model parameter."""
    world = street_world(seed=seed, length=20.0, sensor=SensorSpec(beams=16, azimuth_steps=90))
    scan = make_sequence(world, "straight", 2).dynamic_scans[0]
    table = pillarize(scan, GridSpec())
    cells, target = cell_truth(scan, table)
    model = ElevationModel.init(seed)
    rng = np.random.default_rng(seed)
    model.theta["w2"] = rng.normal(0, 0.3, model.theta["w2"].shape)  # random final layer: every parameter gets a live gradient

    def loss(theta):
        return model_loss(dc.gather(elevation_forward(model, table, theta), cells), target, list(theta.values()), LossConfig(beta=1e-3))

    return _check_params(model.theta, loss, h)


def check_displacement(seed: int = 0, h: float = 1e-5) -> float:
    """Gradient of the Chamfer loss (frozen neighbours) w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 5.0, (150, 3))
    target = pts + rng.normal(0, 0.3, pts.shape)
    model = DisplacementModel.init(seed)
    model.theta["w3"] = rng.normal(0, 0.3, model.theta["w3"].shape)
    a0 = displacement_forward(model, pts).value
    ia = cKDTree(target).query(a0)[1]
    ib = cKDTree(a0).query(target)[1]

    def loss(theta):
        out = displacement_forward(model, pts, theta)
        da = dc.sum(dc.square(out - dc.gather(dc.const(target), ia)), axis=1)
        db = dc.sum(dc.square(dc.const(target) - dc.gather(out, ib)), axis=1)
        return dc.mean(da) + dc.mean(db)

    return _check_params(model.theta, loss, h)


def _check_params(theta: dict, loss, h: float, per_param: int = 6) -> float:
    leaves = {k: dc.lift(v) for k, v in theta.items()}
    dc.backward(loss(leaves))
    rng = np.random.default_rng(0)
    worst = 0.0
    for k, v in theta.items():
        flat = v.reshape(-1)
        for j in rng.choice(flat.size, min(per_param, flat.size), replace=False):
            idx = np.unravel_index(j, v.shape)

            def f(x, k=k):
                with dc.no_grad():
                    return float(loss({**theta, k: x}).value)

            worst = max(worst, relative_error(float(leaves[k].grad[idx]), _central(f, v, idx, h)))
    return worst


def run_suite(seed: int = 0) -> dict[str, float]:
    return {
        "exp_map": check_exp_map(seed),
        "registration_residual": check_registration(seed),
        "slam_loss": check_slam_loss(seed),
        "elevation_mse": check_elevation(seed),
        "displacement_chamfer": check_displacement(seed),
    }
