"""Synthetic labelled LiDAR sequences.

The world is a height field ``e(x, y) = a0 + a1 x + a2 y + a3 sin(a4 x)``
plus axis-aligned boxes, some of which move at a constant velocity. Scans
are produced by analytic ray casting from a spinning multi-beam sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose, compose, exp_se3

GROUND_BISECT_TOL = 1e-6
_GROUND_SCAN_STEP = 0.25


class Label(IntEnum):
    GROUND = 0
    STATIC = 1
    DYNAMIC = 2


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box extents must be positive, got {self.size}")

    def bounds(self, frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        return c - half, c + half


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 32
    azimuth_steps: int = 360
    vertical_fov: tuple[float, float] = (-25.0, 5.0)
    max_range: float = 60.0
    range_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    min_range: float = 0.5

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.beams < 1 or self.azimuth_steps < 1:
            raise ValueError("beams and azimuth_steps must be >= 1")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be non-negative")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, beam-major, (beams*azimuth, 3)."""
        lo, hi = np.deg2rad(self.vertical_fov)
        elev = np.linspace(lo, hi, self.beams) if self.beams > 1 else np.array([lo])
        az = np.arange(self.azimuth_steps) * (2.0 * np.pi / self.azimuth_steps)
        el, a = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class WorldSpec:
    ground: tuple[float, float, float, float, float] = (-1.8, 0.0, 0.0, 0.0, 0.0)
    static_boxes: tuple[Box, ...] = ()
    dynamic_boxes: tuple[Box, ...] = ()
    sensor: SensorSpec = field(default_factory=SensorSpec)
    seed: int = 0

    def __post_init__(self):
        if len(self.ground) != 5:
            raise ValueError("ground needs five coefficients a0..a4")
        object.__setattr__(self, "static_boxes", tuple(self.static_boxes))
        object.__setattr__(self, "dynamic_boxes", tuple(self.dynamic_boxes))

    def elevation(self, x, y):
        a0, a1, a2, a3, a4 = self.ground
        return a0 + a1 * np.asarray(x) + a2 * np.asarray(y) + a3 * np.sin(a4 * np.asarray(x))


@dataclass
class LabeledScan:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    true_elevation: Optional[np.ndarray] = None
    frame_index: int = 0
    ray_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "LabeledScan":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return LabeledScan(self.points[idx], pick(self.labels), pick(self.true_elevation), self.frame_index, pick(self.ray_index))


@dataclass
class Sequence_:
    dynamic_scans: list[LabeledScan]
    static_scans: list[LabeledScan]
    trajectory: "object"  # trajectory.Trajectory; typed loosely to avoid an import cycle


# -- ego motion ------------------------------------------------------------

def ego_trajectory(kind: str, n_frames: int, speed: float = 0.5, radius: float = 20.0):
    """Smooth planar ego path, first pose identity, heading tangent to the path."""
    from .trajectory import Trajectory

    if n_frames < 2:
        raise ValueError("ego_trajectory needs n_frames >= 2")
    if kind == "straight":
        curvature = lambda s: 0.0
    elif kind == "arc":
        curvature = lambda s: 1.0 / radius
    elif kind == "figure":
        total = speed * (n_frames - 1)
        curvature = lambda s: (2.0 / radius) * math.sin(2.0 * math.pi * s / max(total, 1e-9))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    poses = []
    x = y = heading = 0.0
    s = 0.0
    for _ in range(n_frames):
        c, sn = math.cos(heading), math.sin(heading)
        poses.append(Pose(np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]]), np.array([x, y, 0.0])))
        k = curvature(s + 0.5 * speed)
        dh = k * speed
        if abs(dh) < 1e-12:
            x += speed * c
            y += speed * sn
        else:
            x += (math.sin(heading + dh) - sn) / k
            y += (c - math.cos(heading + dh)) / k
        heading += dh
        s += speed
    return Trajectory(poses, list(range(n_frames)))


# -- ray casting -------------------------------------------------------------

def _ray_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Nearest entry distance and box index per ray (inf / -1 when missing)."""
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for k, (lo, hi) in enumerate(boxes):
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin > 0.0)
            closer = hit & (tmin < best)
            best[closer] = tmin[closer]
            which[closer] = k
    return best, which


def _ray_ground(world: WorldSpec, origin: np.ndarray, dirs: np.ndarray, t_max: float) -> np.ndarray:
    """First crossing of the height field along each ray (inf when none)."""
    def height_gap(t):
        p = origin + t[..., None] * dirs
        return p[..., 2] - world.elevation(p[..., 0], p[..., 1])

    steps = np.arange(0.0, t_max + _GROUND_SCAN_STEP, _GROUND_SCAN_STEP)
    n = len(dirs)
    out = np.full(n, np.inf)
    f_prev = height_gap(np.zeros(n))
    lo = np.zeros(n)
    hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    for t in steps[1:]:
        tt = np.full(n, t)
        f = height_gap(tt)
        cross = (~found) & (f_prev > 0) & (f <= 0)
        lo[cross] = t - _GROUND_SCAN_STEP
        hi[cross] = t
        found |= cross
        f_prev = f
        if found.all():
            break
    idx = np.flatnonzero(found)
    a, b = lo[idx], hi[idx]
    o, d = origin, dirs[idx]
    while np.max(b - a, initial=0.0) > GROUND_BISECT_TOL:
        m = 0.5 * (a + b)
        p = o + m[:, None] * d
        above = p[:, 2] - world.elevation(p[:, 0], p[:, 1]) > 0
        a = np.where(above, m, a)
        b = np.where(above, b, m)
    out[idx] = 0.5 * (a + b)
    return out


def _frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame)]))


def render_scan(world: WorldSpec, pose: Pose, frame: int, include_dynamic: bool = True) -> LabeledScan:
    """Cast every (beam, azimuth) ray and keep the nearest hit within range."""
    sensor = world.sensor
    dirs_s = sensor.directions()
    dirs_w = dirs_s @ pose.rotation.T
    origin = pose.translation
    n = len(dirs_s)
    rng = _frame_rng(world.seed, frame)
    # drawn for every ray so a ray gets the same noise in paired renders
    noise = rng.normal(0.0, 1.0, n) * sensor.range_noise_sigma
    keep = rng.random(n) >= sensor.dropout_prob

    t_ground = _ray_ground(world, origin, dirs_w, sensor.max_range)
    t_static, _ = _ray_boxes(origin, dirs_w, [b.bounds() for b in world.static_boxes])
    t = t_ground.copy()
    label = np.full(n, int(Label.GROUND))
    closer = t_static < t
    t[closer] = t_static[closer]
    label[closer] = int(Label.STATIC)
    if include_dynamic and world.dynamic_boxes:
        t_dyn, _ = _ray_boxes(origin, dirs_w, [b.bounds(frame) for b in world.dynamic_boxes])
        closer = t_dyn < t
        t[closer] = t_dyn[closer]
        label[closer] = int(Label.DYNAMIC)

    valid = np.isfinite(t) & (t <= sensor.max_range) & (t >= sensor.min_range) & keep
    rng_m = t[valid] + noise[valid]
    pts_s = dirs_s[valid] * rng_m[:, None]
    pts_w = dirs_w[valid] * rng_m[:, None] + origin
    elev = world.elevation(pts_w[:, 0], pts_w[:, 1])
    return LabeledScan(pts_s, label[valid].astype(np.uint8), np.asarray(elev, dtype=np.float64), frame, np.flatnonzero(valid))


def make_sequence(world: WorldSpec, traj_kind: str = "straight", n_frames: int = 10, speed: float = 0.5, **kw) -> Sequence_:
    """Paired dynamic/static renders along a ground-truth ego trajectory."""
    if not world.static_boxes and not world.dynamic_boxes and world.sensor.vertical_fov[0] >= 0:
        raise ValueError("world would render empty scans")
    traj = ego_trajectory(traj_kind, n_frames, speed, **kw)
    dyn, sta = [], []
    for f, pose in zip(traj.frame_indices, traj.poses):
        s = render_scan(world, pose, f, include_dynamic=False)
        d = render_scan(world, pose, f, include_dynamic=True) if world.dynamic_boxes else s
        dyn.append(d)
        sta.append(s)
    return Sequence_(dyn, sta, traj)


# -- ready-made worlds --------------------------------------------------------

def street_world(
    seed: int = 0,
    length: float = 60.0,
    n_dynamic: int = 0,
    sensor: Optional[SensorSpec] = None,
    ground: Optional[tuple] = None,
) -> WorldSpec:
    """A straight street lined with buildings and clutter, randomised by seed.

    Dynamic boxes are vehicles that drive in the ego direction, so a fraction
    of the scan moves with the sensor, the case that biases odometry most.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    a0 = -1.8
    if ground is None:
        ground = (a0, 0.0, float(rng.uniform(-0.01, 0.01)), float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.15, 0.4)))
    tmp = WorldSpec(ground=ground)
    boxes = []
    x = -20.0
    while x < length + 20.0:
        for side in (-1.0, 1.0):
            w = rng.uniform(3.0, 8.0)
            depth = rng.uniform(3.0, 6.0)
            h = rng.uniform(3.0, 9.0)
            off = rng.uniform(7.0, 11.0)
            cx, cy = x + w / 2.0, side * (off + depth / 2.0)
            base = float(tmp.elevation(cx, cy))
            boxes.append(Box((cx, cy, base + h / 2.0 - 0.5), (w, depth, h)))
        x += rng.uniform(5.0, 10.0)
    for _ in range(int(length / 3)):
        cx = rng.uniform(-10.0, length + 10.0)
        cy = rng.choice([-1.0, 1.0]) * rng.uniform(4.5, 6.5)
        s = rng.uniform(0.3, 1.2)
        h = rng.uniform(0.8, 3.0)
        base = float(tmp.elevation(cx, cy))
        boxes.append(Box((cx, cy, base + h / 2.0 - 0.3), (s, s, h)))
    dyn = []
    for k in range(n_dynamic):
        lane = (-1.0) ** k * rng.uniform(2.5, 3.5)
        ahead = rng.uniform(-6.0, 10.0)
        vx = 0.5 + rng.uniform(-0.1, 0.1)
        base = float(tmp.elevation(ahead, lane))
        dyn.append(Box((ahead, lane, base + 0.8), (4.2, 1.8, 1.6), (vx, 0.0, 0.0)))
    return WorldSpec(ground=ground, static_boxes=tuple(boxes), dynamic_boxes=tuple(dyn),
                     sensor=sensor or SensorSpec(), seed=seed)


def pole_world(
    seed: int = 0,
    length: float = 60.0,
    n_dynamic: int = 2,
    sensor: Optional[SensorSpec] = None,
    n_poles: int = 150,
    vehicle_height: float = 3.6,
) -> WorldSpec:
    """Flat ground with scattered thin posts and tall co-moving vehicles.

    Posts give every direction of motion a distinct signature, so odometry on
    the static scene is accurate and errors come from the vehicles. The
    default sensor looks level and upward (no ground returns), which removes
    the zero-motion bias that scan-to-scan matching of ground rings causes.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4391]))
    sensor = sensor or SensorSpec(azimuth_steps=360, vertical_fov=(0.0, 15.0), range_noise_sigma=0.01)
    a0 = -1.8
    boxes = []
    while len(boxes) < n_poles:
        cx, cy = rng.uniform(-20.0, length + 20.0), rng.uniform(-20.0, 20.0)
        if abs(cy) < 4.5:
            continue
        s = rng.uniform(0.2, 0.6)
        boxes.append(Box((cx, cy, 0.0), (s, s, 8.0)))
    dyn = []
    for k in range(n_dynamic):
        lane = (-1.0) ** k * rng.uniform(2.5, 3.5)
        ahead = rng.uniform(-6.0, 10.0)
        vx = 0.5 + rng.uniform(-0.1, 0.1)
        dyn.append(Box((ahead, lane, a0 + vehicle_height / 2.0), (4.2, 1.8, vehicle_height), (vx, 0.0, 0.0)))
    return WorldSpec(ground=(a0, 0.0, 0.0, 0.0, 0.0), static_boxes=tuple(boxes), dynamic_boxes=tuple(dyn),
                     sensor=sensor, seed=seed)
