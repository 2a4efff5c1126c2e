"""SE(3) rigid-body transforms.

Tangent vectors are ordered ``[wx, wy, wz, vx, vy, vz]`` (rotation first,
radians then meters). ``Pose`` is a plain numpy value type; ``DiffPose``
carries its rotation and translation as graph nodes so that trajectories
built from it can be differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node

# Below this angle the Rodrigues coefficients switch to their Taylor series.
_SERIES_ANGLE = 1e-2
NEAR_PI_MARGIN = 1e-6


class NearPiRotationError(ValueError):
    """The logarithm is ill-defined for rotations at (or very near) pi."""


# -- Rodrigues coefficients as functions of s = theta^2 --------------------
#   A = sin(t)/t,  B = (1 - cos t)/t^2,  C = (t - sin t)/t^3

def _coeffs(s: float) -> tuple[float, float, float, float, float, float]:
    """Return A, B, C and their derivatives with respect to s = theta**2."""
    t = np.sqrt(s)
    if t < _SERIES_ANGLE:
        a = 1.0 - s / 6.0 + s * s / 120.0 - s**3 / 5040.0
        b = 0.5 - s / 24.0 + s * s / 720.0 - s**3 / 40320.0
        c = 1.0 / 6.0 - s / 120.0 + s * s / 5040.0 - s**3 / 362880.0
        da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
        db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
        dc_ = -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0
        return a, b, c, da, db, dc_
    st, ct = np.sin(t), np.cos(t)
    a = st / t
    b = (1.0 - ct) / s
    c = (t - st) / (s * t)
    # d/ds = (1 / 2t) d/dt
    da = (t * ct - st) / (2.0 * t**3)
    db = (t * st - 2.0 * (1.0 - ct)) / (2.0 * s * s)
    dc_ = ((1.0 - ct) / t**3 - 3.0 * (t - st) / t**4) / (2.0 * t)
    return a, b, c, da, db, dc_


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite entries")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol)

    def lift(self, differentiable: bool = False) -> "DiffPose":
        return DiffPose(dc.lift(self.rotation, differentiable), dc.lift(self.translation, differentiable))


def exp_se3(xi) -> Pose:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("exp_se3: non-finite tangent vector")
    w, v = xi[:3], xi[3:]
    a, b, c, *_ = _coeffs(float(w @ w))
    k = hat(w)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    jl = np.eye(3) + b * k + c * k2
    return Pose(r, jl @ v)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    cos_t = (np.trace(r) - 1.0) / 2.0
    sin_t = np.linalg.norm(vee(r - r.T)) / 2.0
    return float(np.arctan2(sin_t, cos_t))


def log_so3(r: np.ndarray) -> np.ndarray:
    theta = rotation_angle(r)
    if theta >= np.pi - NEAR_PI_MARGIN:
        raise NearPiRotationError(f"rotation angle {theta:.9f} is too close to pi for a unique logarithm")
    axis_part = vee(r - r.T) / 2.0  # = sin(theta) * axis
    if theta < _SERIES_ANGLE:
        s = theta * theta
        return axis_part * (1.0 + s / 6.0 + 7.0 * s * s / 360.0)
    return axis_part * theta / np.sin(theta)


def log_se3(p: Pose) -> np.ndarray:
    w = log_so3(p.rotation)
    _, b, c, *_ = _coeffs(float(w @ w))
    k = hat(w)
    jl = np.eye(3) + b * k + c * (k @ k)
    v = np.linalg.solve(jl, p.translation)
    return np.concatenate([w, v])


def compose(a: Pose, b: Pose) -> Pose:
    """a o b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def relative_angle(a: np.ndarray, b: np.ndarray) -> float:
    return rotation_angle(a.T @ b)


# -- quaternions (TUM files only) ----------------------------------------

def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0."""
    m = r
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# -- differentiable poses --------------------------------------------------

def _coeff_nodes(s: Node) -> tuple[Node, Node, Node]:
    a, b, c, da, db, dcc = _coeffs(float(s.value))
    return (
        dc.custom(a, "rodrigues_a", ((s, lambda g: g * da),)),
        dc.custom(b, "rodrigues_b", ((s, lambda g: g * db),)),
        dc.custom(c, "rodrigues_c", ((s, lambda g: g * dcc),)),
    )


class DiffPose:
    """Pose whose rotation (3, 3) and translation (3,) are graph nodes."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Node, translation: Node):
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls) -> "DiffPose":
        return cls(dc.const(np.eye(3)), dc.const(np.zeros(3)))

    @classmethod
    def exp(cls, xi: Node) -> "DiffPose":
        """Differentiable exponential map of a 6-vector node."""
        w = xi[0:3]
        v = xi[3:6]
        a, b, c = _coeff_nodes(dc.dot(w, w))
        k = dc.hat(w)
        k2 = k @ k
        eye = np.eye(3)
        r = a * k + b * k2 + eye
        jl = b * k + c * k2 + eye
        return cls(r, jl @ v)

    def compose(self, other: "DiffPose") -> "DiffPose":
        return DiffPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "DiffPose") -> "DiffPose":
        return self.compose(other)

    def inverse(self) -> "DiffPose":
        rt = self.rotation.T
        return DiffPose(rt, -(rt @ self.translation))

    def detach(self) -> Pose:
        return Pose(self.rotation.value, self.translation.value)


def as_diff(p) -> DiffPose:
    return p if isinstance(p, DiffPose) else p.lift(False)


def transform_points(p, cloud) -> Node:
    """Row-wise R x + t, differentiable in both the pose and the points."""
    p = as_diff(p)
    cloud = cloud if isinstance(cloud, Node) else dc.const(cloud)
    if cloud.value.ndim != 2 or cloud.value.shape[1] != 3 or cloud.value.shape[0] < 1:
        raise ValueError(f"transform_points expects an (N, 3) cloud with N >= 1, got {cloud.value.shape}")
    return cloud @ p.rotation.T + dc.broadcast_rows(p.translation, cloud.value.shape[0])
