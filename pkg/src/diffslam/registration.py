"""Differentiable point-to-point registration by unrolled, soft-gated LM.

Each iteration:

1. match every source point to its nearest target point (indices are
   constants of the step; weights stay differentiable through distances),
2. solve the damped normal equations for a tangent increment,
3. evaluate the weighted residual norm before (r0) and after (r1) the
   candidate increment,
4. update the damping with a generalized logistic in ``r1 - r0`` and apply
   the increment scaled by the gate ``sigmoid(r0 - r1)``.

Poses are updated on the manifold by left multiplication,
``x <- exp(gate * delta) o x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import diffcore as dc
from .diffcore import Node
from .geometry import DiffPose, Pose, as_diff, exp_se3, transform_points


class DegenerateGeometryError(ValueError):
    """The correspondences do not constrain all six degrees of freedom."""


@dataclass
class SoftLMConfig:
    lambda_min: float = 1e-4
    lambda_max: float = 1.0
    D: float = 1.0
    sigma: float = 10.0
    iterations: int = 30
    max_corr_dist: float = 1.0
    corr_temperature: float = 0.05
    init: Pose = field(default_factory=Pose.identity)
    voxel_leaf: float = 0.3
    max_points: int = 2048

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must satisfy 0 <= lambda_min < lambda_max")
        if self.D <= 0 or self.sigma <= 0:
            raise ValueError("D and sigma must be positive")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError("iterations must be an integer >= 1")
        if self.max_corr_dist <= 0 or self.corr_temperature <= 0:
            raise ValueError("max_corr_dist and corr_temperature must be positive")
        if self.voxel_leaf <= 0 or self.max_points < 4:
            raise ValueError("voxel_leaf must be positive and max_points >= 4")


@dataclass
class SolverState:
    iterate: DiffPose
    r0: Node
    r1: Node
    delta: Node
    lam: Node


@dataclass
class RegistrationResult:
    relative_pose: DiffPose
    final_residual: Node
    per_iteration_residuals: list[float]
    states: list[SolverState] = field(default_factory=list, repr=False)


class NNIndex:
    """Immutable nearest-neighbour index over a target cloud."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) < 4:
            raise ValueError("nearest-neighbour index needs at least 4 target points")
        self.points = points
        self._tree = cKDTree(points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return d, i.astype(np.intp)


class MatchLog(list):
    """Per-iteration correspondence indices.

    An empty log records the indices chosen during a run; a filled log is
    replayed instead of querying the index, which keeps the solver a smooth
    function of the inputs (used for finite-difference probes).
    """

    def __init__(self, *args):
        super().__init__(*args)
        self.cursor = 0

    def next(self, compute):
        if self.cursor < len(self):
            out = self[self.cursor]
        else:
            out = compute()
            self.append(out)
        self.cursor += 1
        return out

    def rewind(self) -> "MatchLog":
        self.cursor = 0
        return self


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else dc.const(x)


def find_correspondences(
    source_world,
    target,
    index: NNIndex,
    max_dist: float,
    temperature: float,
    point_weights=None,
    target_weights=None,
    frozen: Optional[np.ndarray] = None,
):
    """Nearest-neighbour pairs and soft weights.

    Returns ``(src_idx, tgt_idx, weights)``. ``weights[i] =
    sigmoid((max_dist - d_i) / temperature)``, multiplied by the optional
    per-point weights of the source and of the matched target point.
    """
    source_world = _as_node(source_world)
    target = _as_node(target)
    n = source_world.value.shape[0]
    if n == 0 or target.value.shape[0] == 0:
        raise ValueError("correspondence search needs non-empty source and target")
    if frozen is None:
        _, tgt_idx = index.query(source_world.value)
    else:
        tgt_idx = np.asarray(frozen, dtype=np.intp)
    src_idx = np.arange(n)
    matched = dc.gather(target, tgt_idx)
    d = dc.norm(source_world - matched, axis=1)
    w = dc.sigmoid((max_dist - d) / temperature)
    if point_weights is not None:
        w = w * _as_node(point_weights)
    if target_weights is not None:
        w = w * dc.gather(_as_node(target_weights), tgt_idx)
    return src_idx, tgt_idx, w


_I3 = np.eye(3)
_I6 = np.eye(6)


def normal_equations(p: Node, q: Node, w: Node) -> tuple[Node, Node, Node]:
    """Gauss-Newton system for residuals e_i = w_i (p_i - q_i).

    ``p`` are source points already moved by the current iterate, so the
    Jacobian with respect to a left tangent perturbation is
    ``w_i [-hat(p_i), I]``. Returns ``(J^T J, J^T e, sum ||e_i||^2)``.
    """
    w2 = w * w
    e = p - q
    pw = dc.scale_rows(p, w2)
    ew = dc.scale_rows(e, w2)
    s = dc.sum(pw * p)
    m = pw.T @ p
    c = dc.sum(pw, axis=0)
    s0 = dc.sum(w2)
    h_rr = s * _I3 - m
    h_rt = dc.hat(c)
    h_tt = s0 * _I3
    h = dc.block([[h_rr, h_rt], [h_rt.T, h_tt]])
    g_r = -dc.sum(dc.scale_rows(dc.cross_rows(p, q), w2), axis=0)
    g_t = dc.sum(ew, axis=0)
    g = dc.concat([g_r, g_t])
    cost = dc.sum(ew * e)
    return h, g, cost


def _check_conditioning(h: np.ndarray, w: np.ndarray) -> None:
    if int(np.count_nonzero(w > 0.01)) < 3:
        raise DegenerateGeometryError("degenerate geometry: fewer than 3 effective correspondences")
    eig = np.linalg.eigvalsh(0.5 * (h + h.T))
    if eig[-1] <= 0 or eig[0] <= 1e-12 * eig[-1]:
        raise DegenerateGeometryError(
            "degenerate geometry: normal equations are rank deficient (collinear or too few correspondences)"
        )


def gauss_newton_delta(source_world, matched_target, weights, lam) -> tuple[Node, Node]:
    """Damped step (J^T J + lam diag(J^T J)) delta = -J^T e and residual norm r."""
    p, q, w = _as_node(source_world), _as_node(matched_target), _as_node(weights)
    h, g, cost = normal_equations(p, q, w)
    _check_conditioning(h.value, w.value)
    a = h + _as_node(lam) * (h * _I6)
    delta = -dc.solve(a, g)
    return delta, dc.sqrt(cost)


def soft_damping(r0, r1, cfg: SoftLMConfig) -> Node:
    """lambda = lmin + (lmax - lmin) / (1 + D exp(-sigma (r1 - r0)))."""
    r0, r1 = _as_node(r0), _as_node(r1)
    span = cfg.lambda_max - cfg.lambda_min
    with np.errstate(over="ignore"):
        denom = 1.0 + cfg.D * np.exp(-cfg.sigma * (r1.value - r0.value))
    s = 1.0 / denom
    lam = cfg.lambda_min + span / denom
    slope = span * cfg.sigma * s * (1.0 - s)
    return dc.custom(lam, "soft_damping", ((r1, lambda g: g * slope), (r0, lambda g: -g * slope)))


def update_gate(r0, r1) -> Node:
    """Weight of the candidate step: sigmoid(r0 - r1), above 1/2 when r1 < r0."""
    return dc.sigmoid(_as_node(r0) - _as_node(r1))


def soft_update(x_t, delta, r0, r1) -> DiffPose:
    gate = update_gate(r0, r1)
    return DiffPose.exp(_as_node(delta) * gate) @ as_diff(x_t)


def _residual_norm(pose: DiffPose, source: Node, matched: Node, w: Node) -> Node:
    e = transform_points(pose, source) - matched
    return dc.sqrt(dc.sum(dc.scale_rows(e, w * w) * e))


def _points_of(scan) -> Node:
    pts = getattr(scan, "points", scan)
    return _as_node(pts)


def register_pair(
    source,
    target,
    cfg: Optional[SoftLMConfig] = None,
    source_point_weights=None,
    target_point_weights=None,
    matches: Optional[MatchLog] = None,
    keep_states: bool = False,
) -> RegistrationResult:
    """Align ``source`` onto ``target``; the pose maps source coords into the target frame.

    ``source`` / ``target`` are LabeledScans, arrays or (N, 3) nodes. Runs
    exactly ``cfg.iterations`` iterations; there is no convergence test.
    """
    cfg = cfg or SoftLMConfig()
    src = _points_of(source)
    tgt = _points_of(target)
    if src.value.shape[0] == 0 or tgt.value.shape[0] == 0:
        raise ValueError("register_pair needs non-empty scans")
    tw = None if target_point_weights is None else _as_node(target_point_weights)
    index = NNIndex(tgt.value)
    x = as_diff(cfg.init)
    lam = dc.const(cfg.lambda_min)
    residuals: list[float] = []
    states: list[SolverState] = []
    matched = w = None
    for _ in range(cfg.iterations):
        moved = transform_points(x, src)
        frozen = None
        if matches is not None:
            frozen = matches.next(lambda: index.query(moved.value)[1])
        _, tgt_idx, w = find_correspondences(
            moved, tgt, index, cfg.max_corr_dist, cfg.corr_temperature,
            source_point_weights, tw, frozen=frozen,
        )
        matched = dc.gather(tgt, tgt_idx)
        delta, r0 = gauss_newton_delta(moved, matched, w, lam)
        candidate = DiffPose.exp(delta) @ x
        r1 = _residual_norm(candidate, src, matched, w)
        new_lam = soft_damping(r0, r1, cfg)
        x = soft_update(x, delta, r0, r1)
        residuals.append(float(r0.value))
        if keep_states:
            states.append(SolverState(x, r0, r1, delta, lam))
        lam = new_lam
    final = _residual_norm(x, src, matched, w)
    return RegistrationResult(x, final, residuals, states)


def register_pair_hard(
    source: np.ndarray,
    target: np.ndarray,
    cfg: Optional[SoftLMConfig] = None,
    matches: Optional[MatchLog] = None,
    iterations: Optional[int] = None,
    lambda0: Optional[float] = None,
) -> Pose:
    """Classical LM with discrete switching, used as a reference.

    A step is accepted only if it lowers the residual; damping is halved on
    acceptance and doubled on rejection (clipped to the config bounds).
    Correspondences and weights are computed as in ``register_pair``.
    """
    cfg = cfg or SoftLMConfig()
    src = np.asarray(getattr(source, "points", source), dtype=np.float64)
    tgt = np.asarray(getattr(target, "points", target), dtype=np.float64)
    index = NNIndex(tgt)
    x = cfg.init
    lam = cfg.lambda_min if lambda0 is None else lambda0
    with dc.no_grad():
        for _ in range(iterations or cfg.iterations):
            moved = x.apply(src)
            frozen = None
            if matches is not None:
                frozen = matches.next(lambda: index.query(moved)[1])
            _, tgt_idx, w = find_correspondences(
                moved, tgt, index, cfg.max_corr_dist, cfg.corr_temperature, frozen=frozen
            )
            q = tgt[tgt_idx]
            delta, r0 = gauss_newton_delta(moved, q, w, lam)
            cand = exp_se3(delta.value) @ x
            e = cand.apply(src) - q
            r1 = float(np.sqrt(np.sum((w.value**2)[:, None] * e * e)))
            if r1 < float(r0.value):
                x = cand
                lam = max(cfg.lambda_min, lam / 2.0)
            else:
                lam = min(cfg.lambda_max, lam * 2.0)
    return x


def voxel_downsample(points: np.ndarray, leaf: float = 0.3, max_points: int = 2048) -> np.ndarray:
    """Indices of one representative point per voxel.

    The representative is the point nearest its voxel's centroid, so labels
    and per-point attributes survive. The leaf grows by 25% until at most
    ``max_points`` remain. Returned indices are sorted.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.intp)
    while True:
        keys = np.floor(pts / leaf).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        nvox = int(inv.max()) + 1
        if nvox <= max_points:
            break
        leaf *= 1.25
    counts = np.bincount(inv, minlength=nvox).astype(np.float64)
    centroid = np.stack([np.bincount(inv, weights=pts[:, k], minlength=nvox) for k in range(3)], axis=1)
    centroid /= counts[:, None]
    d = np.sum((pts - centroid[inv]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order[1:]] != inv[order[:-1]]
    return np.sort(order[first])
