"""Trainable perception models that can be coupled to the trajectory loss.

Two toy tasks share one training loop:

* ``elevation``: a per-pillar regressor predicts ground height on an x-y
  grid; points above ``height + tau`` are obstacles. Its trajectory loss
  weights every point by a soft above-ground mask so that odometry runs on
  the obstacle points the model believes in.
* ``displacement``: a per-point network moves each point of a scan with
  dynamic objects towards the all-static scene. Its trajectory loss runs
  odometry on the model output.

In both cases the reference odometry is computed from ground truth
(true elevations / static scans) and is a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .losses import LossConfig, combined_loss, hard_above_ground, model_loss, slam_loss, soft_above_ground_mask
from .registration import SoftLMConfig
from .synthworld import Label, LabeledScan, SensorSpec, Sequence_, make_sequence, pole_world, street_world
from .trajectory import RegistrationFailure, Trajectory, ate_value, chain_odometry, chamfer, chamfer_node

TASKS = ("elevation", "displacement")
OPTIMIZERS = ("sgd", "sgd_momentum")
HISTORY_COLUMNS = ("epoch", "l_model", "l_slam", "combined", "mse", "miou", "precision", "recall", "chamfer", "ate")


# -- pillars --------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    cell_size: float = 2.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            n = (hi - lo) / self.cell_size
            if n <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name} must span a positive multiple of cell_size")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        """Flat cell index per point (ix * ny + iy), -1 outside the grid."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        ix = np.floor((xy[:, 0] - self.x_range[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y_range[0]) / self.cell_size).astype(np.int64)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return np.where(inside, ix * self.ny + iy, -1)

    def neighbours(self) -> list[np.ndarray]:
        """8-connected neighbour cell indices of every cell."""
        out = []
        for c in range(self.n_cells):
            ix, iy = divmod(c, self.ny)
            nb = [
                (ix + dx) * self.ny + iy + dy
                for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                if (dx or dy) and 0 <= ix + dx < self.nx and 0 <= iy + dy < self.ny
            ]
            out.append(np.array(nb, dtype=np.int64))
        return out


FEATURE_NAMES = ("count", "mean_z", "min_z", "max_z", "mean_range")


@dataclass
class PillarTable:
    grid: GridSpec
    features: np.ndarray  # (n_cells, 5), zeros in empty cells
    occupied: np.ndarray  # (n_cells,) bool
    point_cell: np.ndarray  # (N,) flat cell index, -1 when dropped
    dropped: int


def pillarize(scan, grid: Optional[GridSpec] = None) -> PillarTable:
    """Bin points into x-y pillars (z is not binned) and summarise each pillar."""
    grid = grid or GridSpec()
    pts = np.asarray(getattr(scan, "points", scan), dtype=np.float64).reshape(-1, 3)
    cell = grid.cell_of(pts[:, :2])
    keep = cell >= 0
    c, z = cell[keep], pts[keep, 2]
    rng = np.linalg.norm(pts[keep], axis=1)
    n = grid.n_cells
    count = np.bincount(c, minlength=n).astype(np.float64)
    occupied = count > 0
    safe = np.maximum(count, 1.0)
    feats = np.zeros((n, 5))
    feats[:, 0] = count
    feats[:, 1] = np.bincount(c, weights=z, minlength=n) / safe
    zmin = np.full(n, np.inf)
    zmax = np.full(n, -np.inf)
    np.minimum.at(zmin, c, z)
    np.maximum.at(zmax, c, z)
    feats[:, 2] = np.where(occupied, zmin, 0.0)
    feats[:, 3] = np.where(occupied, zmax, 0.0)
    feats[:, 4] = np.bincount(c, weights=rng, minlength=n) / safe
    return PillarTable(grid, feats, occupied, cell, int(np.count_nonzero(~keep)))


# -- models -------------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


@dataclass
class ElevationModel:
    """5 pillar features -> 16 tanh units -> 1 elevation (meters)."""

    theta: dict = field(default_factory=dict)
    hidden: int = 16

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 16) -> "ElevationModel":
        rng = np.random.default_rng(seed)
        return cls({
            "w1": _glorot(rng, 5, hidden),
            "b1": np.zeros(hidden),
            "w2": np.zeros((hidden, 1)),
            "b2": np.zeros(1),
        }, hidden)

    task = "elevation"


@dataclass
class DisplacementModel:
    """Per-point 3 -> 32 -> 32 -> 3 tanh network; output = input + clamp(correction)."""

    theta: dict = field(default_factory=dict)
    hidden: int = 32
    clamp: float = 2.0
    input_scale: float = 10.0

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 32) -> "DisplacementModel":
        rng = np.random.default_rng(seed)
        return cls({
            "w1": _glorot(rng, 3, hidden),
            "b1": np.zeros(hidden),
            "w2": _glorot(rng, hidden, hidden),
            "b2": np.zeros(hidden),
            "w3": np.zeros((hidden, 3)),
            "b3": np.zeros(3),
        }, hidden)

    task = "displacement"


def _param(theta: dict, name: str) -> Node:
    p = theta[name]
    return p if isinstance(p, Node) else dc.const(p)


def _dense(x: Node, w: Node, b: Node) -> Node:
    return x @ w + dc.broadcast_rows(b, x.value.shape[0])


# Fixed feature normalisation so that every input is O(1).
_FEATURE_SHIFT = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
_FEATURE_SCALE = np.array([1.0, 2.0, 2.0, 2.0, 20.0])


def normalise_features(features: np.ndarray) -> np.ndarray:
    f = np.array(features, dtype=np.float64)
    f[:, 0] = np.log1p(f[:, 0])
    return (f - _FEATURE_SHIFT) / _FEATURE_SCALE


def fill_empty(values: np.ndarray, occupied: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Empty cells take the mean of their occupied 8-neighbours, else 0."""
    occ = np.pad(np.asarray(occupied, dtype=bool).reshape(grid.nx, grid.ny), 1)
    val = np.pad(np.where(occupied, values, 0.0).reshape(grid.nx, grid.ny), 1)
    total = np.zeros((grid.nx, grid.ny))
    count = np.zeros((grid.nx, grid.ny))
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx or dy:
                total += val[1 + dx:1 + dx + grid.nx, 1 + dy:1 + dy + grid.ny]
                count += occ[1 + dx:1 + dx + grid.nx, 1 + dy:1 + dy + grid.ny]
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0).reshape(-1)
    return np.where(occupied, values, mean)


def elevation_forward(model: ElevationModel, table: PillarTable, theta: Optional[dict] = None) -> Node:
    """Per-cell elevation (n_cells,); only occupied cells depend on theta."""
    theta = model.theta if theta is None else theta
    if not np.all(np.isfinite(table.features)):
        raise ValueError("pillar features must be finite")
    x = dc.const(normalise_features(table.features))
    h = dc.tanh(_dense(x, _param(theta, "w1"), _param(theta, "b1")))
    out = dc.reshape(_dense(h, _param(theta, "w2"), _param(theta, "b2")), (table.grid.n_cells,))
    filled = fill_empty(out.value, table.occupied, table.grid)
    return dc.where_const(table.occupied, out, filled)


def displacement_forward(model: DisplacementModel, points, theta: Optional[dict] = None) -> Node:
    """``points + clamp(net(points))`` for an (N, 3) array or node."""
    theta = model.theta if theta is None else theta
    pts = points if isinstance(points, Node) else dc.const(np.asarray(getattr(points, "points", points), dtype=np.float64))
    if pts.value.ndim != 2 or pts.value.shape[1] != 3 or len(pts.value) == 0:
        raise ValueError("displacement_forward needs a non-empty (N, 3) scan")
    x = pts * (1.0 / model.input_scale)
    h = dc.tanh(_dense(x, _param(theta, "w1"), _param(theta, "b1")))
    h = dc.tanh(_dense(h, _param(theta, "w2"), _param(theta, "b2")))
    corr = _dense(h, _param(theta, "w3"), _param(theta, "b3"))
    return pts + dc.clamp(corr, -model.clamp, model.clamp)


# -- segmentation metrics ----------------------------------------------------------

@dataclass
class SegmentationCounts:
    """Pooled counts from which every elevation metric is derived."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    sq_err: float = 0.0
    n_cells: int = 0

    def __add__(self, other: "SegmentationCounts") -> "SegmentationCounts":
        return SegmentationCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                                  self.tn + other.tn, self.sq_err + other.sq_err, self.n_cells + other.n_cells)

    def metrics(self) -> dict:
        def ratio(a, b):
            return a / b if b else float("nan")
        iou_ng = ratio(self.tp, self.tp + self.fp + self.fn)
        iou_g = ratio(self.tn, self.tn + self.fn + self.fp)
        return {
            "mse": ratio(self.sq_err, self.n_cells),
            "miou": 0.5 * (iou_ng + iou_g),
            "precision": ratio(self.tp, self.tp + self.fp),
            "recall": ratio(self.tp, self.tp + self.fn),
        }


def cell_truth(scan: LabeledScan, table: PillarTable) -> tuple[np.ndarray, np.ndarray]:
    """Cells holding ground points and the mean true elevation of those points."""
    ground = (scan.labels == Label.GROUND) & (table.point_cell >= 0)
    c = table.point_cell[ground]
    n = table.grid.n_cells
    cnt = np.bincount(c, minlength=n)
    mean = np.bincount(c, weights=scan.true_elevation[ground], minlength=n) / np.maximum(cnt, 1)
    cells = np.flatnonzero(cnt > 0)
    return cells, mean[cells]


def reference_cell_elevation(scan: LabeledScan, table: PillarTable) -> np.ndarray:
    """True per-cell elevation: mean over ground points, else over all points.

    The first case is exactly the regression target, so a model that hits
    its targets also reproduces the reference mask.
    """
    n = table.grid.n_cells
    inside = table.point_cell >= 0
    c = table.point_cell[inside]
    e = scan.true_elevation[inside]
    cnt = np.bincount(c, minlength=n)
    out = np.bincount(c, weights=e, minlength=n) / np.maximum(cnt, 1)
    cells, true_e = cell_truth(scan, table)
    out[cells] = true_e
    return out


def segmentation_counts(scan: LabeledScan, table: PillarTable, cell_elevation: np.ndarray, tau: float) -> SegmentationCounts:
    if scan.labels is None or scan.true_elevation is None:
        raise ValueError("scoring needs a labelled scan with true elevations")
    e = np.asarray(getattr(cell_elevation, "value", cell_elevation), dtype=np.float64)
    inside = table.point_cell >= 0
    pred = np.zeros(len(scan), dtype=bool)
    pred[inside] = hard_above_ground(scan.points[inside, 2], e[table.point_cell[inside]], tau)
    truth = scan.labels != Label.GROUND
    p, t = pred[inside], truth[inside]
    cells, true_e = cell_truth(scan, table)
    return SegmentationCounts(
        int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)),
        float(np.sum((e[cells] - true_e) ** 2)), len(cells),
    )


def segment_and_score(scan: LabeledScan, cell_elevation, tau: float = 0.3, grid: Optional[GridSpec] = None,
                      table: Optional[PillarTable] = None) -> tuple[np.ndarray, dict]:
    """Hard ground/obstacle labels (True = non-ground) and MSE, mIoU, precision, recall.

    Points outside the grid get label False and are left out of the metrics.
    """
    table = table or pillarize(scan, grid)
    e = np.asarray(getattr(cell_elevation, "value", cell_elevation), dtype=np.float64)
    inside = table.point_cell >= 0
    labels = np.zeros(len(scan), dtype=bool)
    labels[inside] = hard_above_ground(scan.points[inside, 2], e[table.point_cell[inside]], tau)
    return labels, segmentation_counts(scan, table, e, tau).metrics()


# -- data ------------------------------------------------------------------------

@dataclass
class TaskDataset:
    """A rendered sequence split into a training prefix and a held-out suffix."""

    sequence: Sequence_
    n_train: int
    grid: GridSpec = field(default_factory=GridSpec)
    _tables: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.sequence.dynamic_scans)
        if n < 2 or not 2 <= self.n_train <= n:
            raise ValueError(f"need 2 <= n_train <= {n} frames")
        frames = [s.frame_index for s in self.sequence.dynamic_scans]
        if any(b != a + 1 for a, b in zip(frames, frames[1:])):
            raise ValueError("dataset frames must be contiguous")

    def __len__(self) -> int:
        return len(self.sequence.dynamic_scans)

    @property
    def held_out(self) -> range:
        return range(self.n_train, len(self))

    def table(self, i: int) -> PillarTable:
        if i not in self._tables:
            self._tables[i] = pillarize(self.sequence.dynamic_scans[i], self.grid)
        return self._tables[i]


STREET_SENSOR = SensorSpec(beams=32, azimuth_steps=180, range_noise_sigma=0.01)
POLE_SENSOR = SensorSpec(azimuth_steps=360, vertical_fov=(0.0, 15.0), range_noise_sigma=0.01)
WORLD_KINDS = ("street", "pole")


def default_world_kind(task: str) -> str:
    return "street" if task == "elevation" else "pole"


def make_task_dataset(task: str, seed: int, n_frames: int = 60, n_train: int = 45, n_dynamic: int = 2,
                      sensor: Optional[SensorSpec] = None, grid: Optional[GridSpec] = None,
                      world_kind: Optional[str] = None) -> TaskDataset:
    """Straight 0.5 m/frame drive; the first ``n_train`` frames train, the rest are held out.

    By default elevation data come from a street with sloped, undulating
    ground seen by a downward-looking sensor, and displacement data from a
    post field with co-moving trucks seen by a level sensor (``pole_world``).
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    kind = world_kind or default_world_kind(task)
    if kind not in WORLD_KINDS:
        raise ValueError(f"world kind must be one of {WORLD_KINDS}")
    length = 0.5 * n_frames + 10.0
    if kind == "street":
        world = street_world(seed=seed, length=length, n_dynamic=n_dynamic, sensor=sensor or STREET_SENSOR)
    else:
        world = pole_world(seed=seed, length=length, n_dynamic=n_dynamic, sensor=sensor or POLE_SENSOR)
    seq = make_sequence(world, "straight", n_frames, speed=0.5)
    return TaskDataset(seq, n_train, grid or GridSpec())


# -- training ------------------------------------------------------------------------

@dataclass
class TrainSchedule:
    epochs: int = 40
    warmup: int = 5
    k: int = 2
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    mini_sequence_length: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup <= self.epochs:
            raise ValueError("warmup must lie in [0, epochs]")
        if self.k < 1:
            raise ValueError("k (slam period) must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mini_sequence_length < 2:
            raise ValueError("mini_sequence_length must be >= 2")

    def slam_active(self, epoch: int) -> bool:
        return epoch >= self.warmup and (epoch - self.warmup) % self.k == 0

    def slam_epochs(self) -> list[int]:
        return [e for e in range(self.epochs) if self.slam_active(e)]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"training diverged at epoch {epoch}: {what} is not finite")
        self.epoch = epoch


class SGD:
    """Plain or heavy-ball SGD over a dict of numpy parameters."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict = {}

    def step(self, theta: dict, grads: dict) -> None:
        for k, g in grads.items():
            if self.momentum:
                v = self.momentum * self._velocity.get(k, 0.0) + g
                self._velocity[k] = v
                g = v
            theta[k] = theta[k] - self.lr * g


@dataclass
class History:
    rows: list = field(default_factory=list)
    gamma: Optional[float] = None
    slam_failures: int = 0

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def last(self) -> dict:
        return self.rows[-1]


def windows(n_train: int, length: int) -> list[tuple[int, int]]:
    """Contiguous mini-sequences [a, b) sharing one frame with the next one.

    Every consecutive training pair appears in exactly one window.
    """
    step = length - 1
    out = []
    a = 0
    while a < n_train - 1:
        out.append((a, min(a + length, n_train)))
        a += step
    return out


class _Framed:
    __slots__ = ("points", "frame_index")

    def __init__(self, points, frame_index: int):
        self.points = points
        self.frame_index = frame_index


class _ElevationTask:
    def __init__(self, ds: TaskDataset, loss_cfg: LossConfig):
        self.ds, self.cfg = ds, loss_cfg
        self.truth = {}
        self.in_grid = {}
        self.ref_weights = {}

    def _prep(self, i):
        if i not in self.truth:
            scan, table = self.ds.sequence.dynamic_scans[i], self.ds.table(i)
            self.truth[i] = cell_truth(scan, table)
            keep = np.flatnonzero(table.point_cell >= 0)
            self.in_grid[i] = keep
            true_cell = reference_cell_elevation(scan, table)
            self.ref_weights[i] = soft_above_ground_mask(
                scan.points[keep, 2], true_cell[table.point_cell[keep]], self.cfg.tau, self.cfg.mask_temperature).value
        return self.truth[i]

    def model_terms(self, model, theta, frames):
        preds, targets, elev = [], [], {}
        for i in frames:
            cells, true_e = self._prep(i)
            e = elevation_forward(model, self.ds.table(i), theta)
            elev[i] = e
            if len(cells):
                preds.append(dc.gather(e, cells))
                targets.append(true_e)
        if not preds:
            return dc.const(0.0), elev
        return model_loss(dc.concat(preds), np.concatenate(targets), list(theta.values()), self.cfg), elev

    def slam_scans(self, elev, frames):
        pred, ref, pw, rw = [], [], [], []
        for i in frames:
            scan, table = self.ds.sequence.dynamic_scans[i], self.ds.table(i)
            keep = self.in_grid[i]
            pts = scan.points[keep]
            cell_e = dc.gather(elev[i], table.point_cell[keep])
            pw.append(soft_above_ground_mask(pts[:, 2], cell_e, self.cfg.tau, self.cfg.mask_temperature))
            rw.append(self.ref_weights[i])
            pred.append(_Framed(pts, scan.frame_index))
            ref.append(_Framed(pts, scan.frame_index))
        return pred, ref, pw, rw

    def evaluate(self, model, reg_cfg, with_ate=True):
        counts = SegmentationCounts()
        scans = []
        for i in self.ds.held_out:
            scan, table = self.ds.sequence.dynamic_scans[i], self.ds.table(i)
            with dc.no_grad():
                e = elevation_forward(model, table).value
            counts = counts + segmentation_counts(scan, table, e, self.cfg.tau)
            keep = table.point_cell >= 0
            obstacle = np.zeros(len(scan), dtype=bool)
            obstacle[keep] = hard_above_ground(scan.points[keep, 2], e[table.point_cell[keep]], self.cfg.tau)
            scans.append(_Framed(scan.points[obstacle], scan.frame_index))
        out = counts.metrics()
        out["chamfer"] = None
        out["ate"] = _held_out_ate(self.ds, scans, reg_cfg) if with_ate else None
        return out


class _DisplacementTask:
    def __init__(self, ds: TaskDataset, loss_cfg: LossConfig):
        self.ds, self.cfg = ds, loss_cfg

    def model_terms(self, model, theta, frames):
        outs, terms = {}, []
        for i in frames:
            out = displacement_forward(model, self.ds.sequence.dynamic_scans[i].points, theta)
            outs[i] = out
            terms.append(chamfer_node(out, self.ds.sequence.static_scans[i].points))
        data = dc.mean(dc.stack(terms))
        if self.cfg.beta > 0:
            data = data + self.cfg.beta * dc.sum(dc.stack([dc.sum(dc.square(t)) for t in theta.values()]))
        return data, outs

    def slam_scans(self, outs, frames):
        pred = [_Framed(outs[i], self.ds.sequence.dynamic_scans[i].frame_index) for i in frames]
        ref = [self.ds.sequence.static_scans[i] for i in frames]
        return pred, ref, None, None

    def evaluate(self, model, reg_cfg, with_ate=True):
        values, scans = [], []
        for i in self.ds.held_out:
            with dc.no_grad():
                out = displacement_forward(model, self.ds.sequence.dynamic_scans[i].points).value
            values.append(chamfer(out, self.ds.sequence.static_scans[i].points))
            scans.append(_Framed(out, self.ds.sequence.dynamic_scans[i].frame_index))
        return {"mse": None, "miou": None, "precision": None, "recall": None,
                "chamfer": float(np.mean(values)),
                "ate": _held_out_ate(self.ds, scans, reg_cfg) if with_ate else None}


def evaluate_model(task: str, dataset: TaskDataset, model, loss_cfg: Optional[LossConfig] = None,
                   reg_cfg: Optional[SoftLMConfig] = None, with_ate: bool = True) -> dict:
    """Held-out metrics of a trained model (keys as in HISTORY_COLUMNS[4:])."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    loss_cfg = loss_cfg or LossConfig()
    runner = _ElevationTask(dataset, loss_cfg) if task == "elevation" else _DisplacementTask(dataset, loss_cfg)
    return runner.evaluate(model, reg_cfg or SoftLMConfig(), with_ate)


def _held_out_ate(ds: TaskDataset, scans, reg_cfg) -> Optional[float]:
    """Odometry ATE of held-out scans against the re-anchored true trajectory."""
    if len(scans) < 2:
        return None
    truth = ds.sequence.trajectory.slice(ds.n_train, len(ds)).reanchored()
    try:
        with dc.no_grad():
            est = chain_odometry(scans, reg_cfg)
    except RegistrationFailure:
        return float("nan")
    return ate_value(est, truth)


def _finite(x) -> bool:
    return x is None or bool(np.isfinite(x))


def train(
    task: str,
    dataset: TaskDataset,
    schedule: Optional[TrainSchedule] = None,
    loss_cfg: Optional[LossConfig] = None,
    reg_cfg: Optional[SoftLMConfig] = None,
    model=None,
    eval_ate: bool = True,
    progress: Optional[Callable[[dict], None]] = None,
    evaluate_every: int = 1,
):
    """Minimise L_model, plus gamma * L_slam on SLAM-active epochs.

    Returns ``(model, history)``. With ``loss_cfg.gamma is None`` gamma is
    set once, at the first SLAM epoch, so that gamma * L_slam equals
    ``auto_gamma_ratio`` times L_model averaged over the training windows.
    Held-out metrics are computed every ``evaluate_every`` epochs and always
    after the last one; other rows leave them empty.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if evaluate_every < 1:
        raise ValueError("evaluate_every must be >= 1")
    schedule = schedule or TrainSchedule()
    loss_cfg = loss_cfg or LossConfig()
    reg_cfg = reg_cfg or SoftLMConfig()
    schedule.validate()
    loss_cfg.validate()
    reg_cfg.validate()
    if model is None:
        model = (ElevationModel if task == "elevation" else DisplacementModel).init(schedule.seed)
    runner = _ElevationTask(dataset, loss_cfg) if task == "elevation" else _DisplacementTask(dataset, loss_cfg)
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 1]))
    momentum = schedule.momentum if schedule.optimizer == "sgd_momentum" else 0.0
    opt = SGD(schedule.learning_rate, momentum)
    wins = windows(dataset.n_train, schedule.mini_sequence_length)
    history = History(gamma=loss_cfg.gamma)
    ref_cache: dict = {}
    use_slam = loss_cfg.gamma is None or loss_cfg.gamma > 0

    def window_loss(theta, win, with_slam):
        frames = list(range(*win))
        l_model, outputs = runner.model_terms(model, theta, frames)
        if not with_slam:
            return l_model, None
        pred, ref, pw, rw = runner.slam_scans(outputs, frames)
        try:
            l_slam = slam_loss(pred, ref, reg_cfg, pw, rw, cache=ref_cache, cache_key=win, w_rot=loss_cfg.w_rot)
        except RegistrationFailure:
            history.slam_failures += 1
            return l_model, None
        return l_model, l_slam

    for epoch in range(schedule.epochs):
        slam_now = use_slam and schedule.slam_active(epoch)
        if slam_now and history.gamma is None:
            history.gamma = _auto_gamma(window_loss, model.theta, wins, loss_cfg.auto_gamma_ratio)
        slam_now = slam_now and history.gamma > 0
        sums = {"l_model": 0.0, "l_slam": 0.0, "combined": 0.0}
        n_slam = 0
        for wi in rng.permutation(len(wins)):
            theta = {k: dc.lift(v) for k, v in model.theta.items()}
            l_model, l_slam = window_loss(theta, wins[wi], slam_now)
            total = combined_loss(l_model, l_slam, history.gamma if l_slam is not None else 0.0)
            if not np.isfinite(total.value):
                raise TrainingDiverged(epoch)
            grads = dc.backward(total)
            g = {k: grads.get(theta[k], np.zeros_like(v)) for k, v in model.theta.items()}
            if not all(np.all(np.isfinite(v)) for v in g.values()):
                raise TrainingDiverged(epoch, "gradient")
            opt.step(model.theta, g)
            sums["l_model"] += float(l_model.value)
            sums["combined"] += float(total.value)
            if l_slam is not None:
                sums["l_slam"] += float(l_slam.value)
                n_slam += 1
        row = {"epoch": epoch, "l_model": sums["l_model"] / len(wins),
               "l_slam": sums["l_slam"] / n_slam if n_slam else None,
               "combined": sums["combined"] / len(wins)}
        if (epoch + 1) % evaluate_every == 0 or epoch == schedule.epochs - 1:
            row.update(runner.evaluate(model, reg_cfg, eval_ate))
        else:
            row.update({k: None for k in HISTORY_COLUMNS[4:]})
        if not all(_finite(row[k]) for k in ("l_model", "combined")):
            raise TrainingDiverged(epoch)
        history.rows.append(row)
        if progress is not None:
            progress(row)
    return model, history


def _auto_gamma(window_loss, theta_values: dict, wins, ratio: float) -> float:
    """gamma = ratio * mean(L_model) / mean(L_slam), 0 when L_slam vanishes."""
    lm, ls = [], []
    with dc.no_grad():
        theta = {k: dc.const(v) for k, v in theta_values.items()}
        for win in wins:
            a, b = window_loss(theta, win, True)
            lm.append(float(a.value))
            if b is not None:
                ls.append(float(b.value))
    if not ls or np.mean(ls) <= 1e-12:
        return 0.0
    return float(ratio * np.mean(lm) / np.mean(ls))
