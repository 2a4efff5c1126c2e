import numpy as np
import pytest

from conftest import random_motion
from diffslam.formats import (
    FormatError,
    list_scans,
    load_checkpoint,
    read_history,
    read_scan,
    read_sequence,
    read_trajectory,
    save_checkpoint,
    write_history,
    write_scan,
    write_sequence,
    write_trajectory,
)
from diffslam.geometry import Pose, compose
from diffslam.synthworld import LabeledScan, SensorSpec, make_sequence, street_world
from diffslam.trajectory import Trajectory


def random_scan(rng, n):
    pts = rng.normal(0, 20, (n, 3)).astype(np.float32).astype(np.float64)
    return LabeledScan(pts, rng.integers(0, 3, n).astype(np.uint8),
                       rng.normal(0, 1, n).astype(np.float32).astype(np.float64), 0)


def random_traj(rng, n=20):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(compose(poses[-1], random_motion(rng, 1.0, 20.0)))
    return Trajectory(poses, list(range(n)))


def test_scan_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    scan = random_scan(rng, 1000)
    write_scan(scan, tmp_path / "a.bin")
    back = read_scan(tmp_path / "a.bin")
    assert back.points.tobytes() == scan.points.tobytes()
    np.testing.assert_array_equal(back.labels, scan.labels)
    assert back.true_elevation.tobytes() == scan.true_elevation.tobytes()


def test_truncated_scan_rejected(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 17)
    with pytest.raises(FormatError, match="truncated"):
        read_scan(tmp_path / "bad.bin")


def test_intensity_field_is_ignored(tmp_path):
    rec = np.array([[1, 2, 3, 0.7], [4, 5, 6, 99.0]], dtype="<f4")
    (tmp_path / "k.bin").write_bytes(rec.tobytes())
    scan = read_scan(tmp_path / "k.bin")
    np.testing.assert_array_equal(scan.points, [[1, 2, 3], [4, 5, 6]])
    assert scan.labels is None and scan.true_elevation is None


def test_sidecar_length_mismatch_rejected(tmp_path):
    scan = random_scan(np.random.default_rng(1), 10)
    write_scan(scan, tmp_path / "s.bin")
    (tmp_path / "s.label").write_bytes(b"\x00" * 9)
    with pytest.raises(FormatError, match="labels"):
        read_scan(tmp_path / "s.bin")


def test_missing_scan_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_scan(tmp_path / "nope.bin")


def test_kitti_identity_lines(tmp_path):
    t = Trajectory([Pose.identity()] * 3, [0, 1, 2])
    write_trajectory(t, tmp_path / "id.txt", "kitti")
    assert (tmp_path / "id.txt").read_text().splitlines() == ["1 0 0 0 0 1 0 0 0 0 1 0"] * 3


@pytest.mark.parametrize("fmt", ["kitti", "tum"])
def test_trajectory_round_trip(tmp_path, fmt):
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(100):
        t = random_traj(rng)
        write_trajectory(t, tmp_path / "t.txt", fmt)
        back = read_trajectory(tmp_path / "t.txt", fmt)
        assert back.frame_indices == t.frame_indices
        for a, b in zip(back.poses, t.poses):
            worst = max(worst, np.max(np.abs(a.matrix() - b.matrix())))
    assert worst <= 1e-12
    if fmt == "kitti":
        assert worst == 0.0  # 17 significant digits are exact for float64


def test_wrong_field_count_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(FormatError, match=r"bad.txt:2: expected 12 fields"):
        read_trajectory(p, "kitti")
    p.write_text("0 0 0 0 0 0 0 1 5\n")
    with pytest.raises(FormatError, match=r":1: expected 8 fields"):
        read_trajectory(p, "tum")


def test_non_orthonormal_rotation_rejected(tmp_path):
    p = tmp_path / "skew.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1.001 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(FormatError, match=r"skew.txt:2: rotation is not orthonormal"):
        read_trajectory(p)


def test_unit_quaternion_required(tmp_path):
    p = tmp_path / "q.txt"
    p.write_text("0 0 0 0 0 0 0 0.9\n")
    with pytest.raises(FormatError, match="quaternion"):
        read_trajectory(p, "tum")


def test_sequence_round_trip(tmp_path):
    world = street_world(seed=3, length=20.0, n_dynamic=1, sensor=SensorSpec(beams=8, azimuth_steps=60))
    seq = make_sequence(world, "straight", 3)
    manifest = write_sequence(seq, tmp_path / "seq")
    back = read_sequence(manifest)
    assert [s.frame_index for s in back.dynamic_scans] == [0, 1, 2]
    for a, b in zip(back.static_scans, seq.static_scans):
        np.testing.assert_array_equal(a.points, b.points.astype(np.float32))
        np.testing.assert_array_equal(a.labels, b.labels)
    assert [p.name for p in list_scans(tmp_path / "seq")] == ["000000.bin", "000001.bin", "000002.bin"]


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(4)
    theta = {"w": rng.normal(size=(5, 16)), "b": rng.normal(size=16) * 1e-300}
    save_checkpoint("elevation", theta, tmp_path / "m.json", {"gamma": 1.5})
    task, back, extra = load_checkpoint(tmp_path / "m.json")
    assert task == "elevation" and extra == {"gamma": 1.5}
    for k in theta:
        assert back[k].tobytes() == theta[k].tobytes()


def test_history_round_trip(tmp_path):
    rows = [{"epoch": 0, "loss": 0.1 + 0.2, "slam": None}, {"epoch": 1, "loss": 1e-17, "slam": 3.0}]
    write_history(rows, tmp_path / "h.csv", ("epoch", "loss", "slam"))
    assert read_history(tmp_path / "h.csv") == rows
