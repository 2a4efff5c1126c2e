"""On-disk formats: scans, labels, trajectories, checkpoints and histories."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Pose, quaternion_to_rotation, rotation_to_quaternion
from .synthworld import LabeledScan, Sequence_
from .trajectory import Trajectory

ORTHONORMAL_TOL = 1e-6
TRAJECTORY_FORMATS = ("kitti", "tum")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# -- scans ------------------------------------------------------------------------

def _sidecars(path: Path) -> tuple[Path, Path]:
    return path.with_suffix(".label"), path.with_suffix(".elev")


def write_scan(scan: LabeledScan, path) -> None:
    """x, y, z, 0 as little-endian float32 records, plus optional sidecars."""
    path = Path(path)
    rec = np.zeros((len(scan), 4), dtype="<f4")
    rec[:, :3] = scan.points
    path.write_bytes(rec.tobytes())
    label_path, elev_path = _sidecars(path)
    if scan.labels is not None:
        label_path.write_bytes(np.asarray(scan.labels, dtype=np.uint8).tobytes())
    if scan.true_elevation is not None:
        elev_path.write_bytes(np.asarray(scan.true_elevation, dtype="<f4").tobytes())


def read_scan(path, frame_index: int = 0) -> LabeledScan:
    """Read a scan; the 4th field (intensity / reserved) is ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scan file not found: {path}")
    raw = path.read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: truncated scan, size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    n = len(rec)
    labels = elev = None
    label_path, elev_path = _sidecars(path)
    if label_path.is_file():
        labels = np.frombuffer(label_path.read_bytes(), dtype=np.uint8).copy()
        if len(labels) != n:
            raise FormatError(f"{label_path}: {len(labels)} labels for {n} points")
        if np.any(labels > 2):
            raise FormatError(f"{label_path}: label codes must be 0, 1 or 2")
    if elev_path.is_file():
        eraw = elev_path.read_bytes()
        if len(eraw) != 4 * n:
            raise FormatError(f"{elev_path}: elevation sidecar holds {len(eraw)} bytes, expected {4 * n}")
        elev = np.frombuffer(eraw, dtype="<f4").astype(np.float64)
    return LabeledScan(rec[:, :3].astype(np.float64), labels, elev, frame_index)


# -- trajectories ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def _check_rotation(r: np.ndarray, where: str) -> None:
    if not (np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL) and abs(np.linalg.det(r) - 1.0) <= ORTHONORMAL_TOL):
        raise FormatError(f"{where}: rotation is not orthonormal (tolerance {ORTHONORMAL_TOL})")


def write_trajectory(traj: Trajectory, path, fmt: str = "kitti") -> None:
    if fmt not in TRAJECTORY_FORMATS:
        raise ValueError(f"trajectory format must be one of {TRAJECTORY_FORMATS}")
    lines = []
    for f, p in zip(traj.frame_indices, traj.detach().poses):
        if fmt == "kitti":
            m = np.hstack([p.rotation, p.translation[:, None]])
            lines.append(" ".join(_fmt(v) for v in m.ravel()))
        else:
            q = rotation_to_quaternion(p.rotation)
            lines.append(" ".join([str(int(f))] + [_fmt(v) for v in p.translation] + [_fmt(v) for v in q]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path, fmt: str = "kitti") -> Trajectory:
    if fmt not in TRAJECTORY_FORMATS:
        raise ValueError(f"trajectory format must be one of {TRAJECTORY_FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    want = 12 if fmt == "kitti" else 8
    poses, times = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        where = f"{path}:{lineno}"
        fields = line.split()
        if len(fields) != want:
            raise FormatError(f"{where}: expected {want} fields for {fmt}, found {len(fields)}")
        try:
            vals = [float(v) for v in fields]
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"{where}: non-finite value")
        if fmt == "kitti":
            m = np.array(vals).reshape(3, 4)
            r, t = m[:, :3], m[:, 3]
            times.append(len(poses))
        else:
            q = np.array(vals[4:8])
            if abs(np.linalg.norm(q) - 1.0) > ORTHONORMAL_TOL:
                raise FormatError(f"{where}: quaternion is not unit length (tolerance {ORTHONORMAL_TOL})")
            r, t = quaternion_to_rotation(q), np.array(vals[1:4])
            times.append(vals[0])
        _check_rotation(r, where)
        poses.append(Pose(r, t))
    if fmt == "tum" and not all(float(t).is_integer() for t in times):
        times = list(range(len(poses)))
    return Trajectory(poses, [int(t) for t in times])


# -- sequences ---------------------------------------------------------------------

def write_sequence(seq: Sequence_, directory) -> Path:
    """Write every frame plus a JSON manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = []
    for dyn, sta in zip(seq.dynamic_scans, seq.static_scans):
        name = f"{dyn.frame_index:06d}"
        write_scan(dyn, d / f"{name}.bin")
        write_scan(sta, d / f"{name}_static.bin")
        frames.append({"frame": dyn.frame_index, "scan": f"{name}.bin", "static_scan": f"{name}_static.bin"})
    write_trajectory(seq.trajectory, d / "poses.txt", "kitti")
    manifest = d / "manifest.json"
    manifest.write_text(json.dumps({"frames": frames, "trajectory": "poses.txt", "trajectory_format": "kitti"}, indent=2))
    return manifest


def read_sequence(manifest) -> Sequence_:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    try:
        meta = json.loads(manifest.read_text())
        frames = meta["frames"]
        traj_name = meta["trajectory"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{manifest}: malformed manifest ({exc})") from None
    base = manifest.parent
    dyn = [read_scan(base / f["scan"], int(f["frame"])) for f in frames]
    sta = [read_scan(base / f.get("static_scan", f["scan"]), int(f["frame"])) for f in frames]
    traj = read_trajectory(base / traj_name, meta.get("trajectory_format", "kitti"))
    traj = Trajectory(traj.poses, [f.frame_index for f in dyn][: len(traj)])
    return Sequence_(dyn, sta, traj)


def list_scans(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scan directory not found: {d}")
    return sorted(p for p in d.glob("*.bin") if not p.stem.endswith("_static"))


# -- checkpoints and histories --------------------------------------------------------

def save_checkpoint(task: str, theta: dict, path, extra: Optional[dict] = None) -> None:
    """JSON of named parameter arrays; floats use the shortest exact repr (<= 17 digits)."""
    body = {"task": task, "params": {k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
                                     for k, v in theta.items()}}
    if extra:
        body["extra"] = extra
    Path(path).write_text(json.dumps(body, indent=1))


def load_checkpoint(path) -> tuple[str, dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        body = json.loads(path.read_text())
        theta = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in body["params"].items()}
        return body["task"], theta, body.get("extra", {})
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from None


def write_history(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if c != "epoch" else int(r[c])) for c in columns])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (None if v == "" else (int(v) if k == "epoch" else float(v))) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def default_output_dir() -> Path:
    return Path(os.environ.get("DIFFSLAM_OUTPUT_DIR", "runs"))
