import numpy as np
import pytest

from diffslam.geometry import Pose, rotation_angle
from diffslam.synthworld import (
    Box,
    Label,
    SensorSpec,
    WorldSpec,
    ego_trajectory,
    make_sequence,
    pole_world,
    render_scan,
    street_world,
)

SMALL = SensorSpec(beams=16, azimuth_steps=120, range_noise_sigma=0.02)


def test_spec_validation():
    with pytest.raises(ValueError):
        SensorSpec(max_range=0.0)
    with pytest.raises(ValueError):
        SensorSpec(dropout_prob=1.5)
    with pytest.raises(ValueError):
        Box((0, 0, 0), (1, 0, 1))


def test_straight_trajectory_example():
    t = ego_trajectory("straight", 3, 0.5)
    np.testing.assert_array_equal(t.positions(), [[0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    np.testing.assert_array_equal(t.poses[0].matrix(), np.eye(4))


def test_arc_turns_ninety_degrees():
    t = ego_trajectory("arc", 11, speed=10 * (np.pi / 2) / 10, radius=10.0)
    assert abs(rotation_angle(t.poses[-1].rotation) - np.pi / 2) <= 1e-9
    np.testing.assert_allclose(t.positions()[-1], [10.0, 10.0, 0.0], atol=1e-9)


def test_figure_path_is_smooth_and_tangent():
    t = ego_trajectory("figure", 30, 0.5)
    pos = t.positions()
    for i in range(len(t) - 1):
        step = pos[i + 1] - pos[i]
        assert np.linalg.norm(step) == pytest.approx(0.5, rel=1e-3)
        heading = t.poses[i].rotation[:, 0]
        assert np.dot(step / np.linalg.norm(step), heading) > 0.99


def test_trajectory_needs_two_frames():
    with pytest.raises(ValueError):
        ego_trajectory("straight", 1)


def test_flat_world_range_example():
    world = WorldSpec(ground=(-2.0, 0, 0, 0, 0), sensor=SensorSpec(beams=1, azimuth_steps=4, vertical_fov=(-30.0, -30.0)))
    scan = render_scan(world, Pose.identity(), 0)
    np.testing.assert_allclose(np.linalg.norm(scan.points, axis=1), 4.0, atol=1e-5)
    assert np.all(scan.labels == Label.GROUND)


def test_box_occludes_ground():
    sensor = SensorSpec(beams=1, azimuth_steps=1, vertical_fov=(-30.0, -30.0))
    world = WorldSpec(ground=(-2.0, 0, 0, 0, 0), static_boxes=(Box((2.0, 0.0, -1.5), (1.0, 1.0, 1.0)),), sensor=sensor)
    scan = render_scan(world, Pose.identity(), 0)
    assert scan.labels.tolist() == [Label.STATIC]
    assert np.linalg.norm(scan.points[0]) < 4.0


def test_ground_points_follow_surface():
    for seed in range(10):
        world = street_world(seed=seed, length=20.0, sensor=SMALL)
        seq = make_sequence(world, "straight", 2)
        scan = seq.static_scans[1]
        g = scan.labels == Label.GROUND
        world_pts = seq.trajectory.poses[1].apply(scan.points[g])
        dz = np.abs(world_pts[:, 2] - world.elevation(world_pts[:, 0], world_pts[:, 1]))
        assert np.quantile(dz, 0.99) <= 3 * SMALL.range_noise_sigma


def test_zero_dynamic_boxes_gives_identical_scans():
    seq = make_sequence(street_world(seed=1, length=20.0, sensor=SMALL), "straight", 3)
    for d, s in zip(seq.dynamic_scans, seq.static_scans):
        assert d.points.tobytes() == s.points.tobytes()


def test_dynamic_box_visible_and_labels_sound():
    world = street_world(seed=2, length=20.0, n_dynamic=2, sensor=SMALL)
    seq = make_sequence(world, "straight", 5)
    tol = 3 * SMALL.range_noise_sigma + 1e-9
    for f, (scan, pose) in enumerate(zip(seq.dynamic_scans, seq.trajectory.poses)):
        dyn = scan.labels == Label.DYNAMIC
        assert dyn.sum() >= 1
        pts = pose.apply(scan.points[dyn])
        inside = np.zeros(len(pts), dtype=bool)
        for box in world.dynamic_boxes:
            lo, hi = box.bounds(f)
            inside |= np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)
        assert inside.all()


def test_static_pairing_is_exact():
    seq = make_sequence(street_world(seed=3, length=20.0, n_dynamic=2, sensor=SMALL), "straight", 3)
    for d, s in zip(seq.dynamic_scans, seq.static_scans):
        rays_s = dict(zip(s.ray_index.tolist(), range(len(s))))
        for j in np.flatnonzero(d.labels != Label.DYNAMIC):
            k = rays_s[int(d.ray_index[j])]
            assert d.points[j].tobytes() == s.points[k].tobytes()


def test_determinism():
    def build():
        return make_sequence(street_world(seed=4, length=20.0, n_dynamic=1,
                                          sensor=SensorSpec(beams=8, azimuth_steps=90, range_noise_sigma=0.02, dropout_prob=0.1)),
                             "arc", 3)

    a, b = build(), build()
    for x, y in zip(a.dynamic_scans + a.static_scans, b.dynamic_scans + b.static_scans):
        assert x.points.tobytes() == y.points.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_dropout_removes_points():
    full = render_scan(street_world(seed=5, length=20.0, sensor=SMALL), Pose.identity(), 0)
    sparse = SensorSpec(beams=16, azimuth_steps=120, range_noise_sigma=0.02, dropout_prob=0.5)
    half = render_scan(street_world(seed=5, length=20.0, sensor=sparse), Pose.identity(), 0)
    assert 0.4 * len(full) < len(half) < 0.6 * len(full)


def test_pole_world_has_no_ground_returns_by_default():
    scan = make_sequence(pole_world(seed=0, length=20.0), "straight", 2).dynamic_scans[0]
    assert not np.any(scan.labels == Label.GROUND)
    assert np.any(scan.labels == Label.DYNAMIC)
    assert np.all(np.isfinite(scan.true_elevation))


def test_empty_world_rejected():
    with pytest.raises(ValueError):
        make_sequence(WorldSpec(sensor=SensorSpec(vertical_fov=(0.0, 10.0))), "straight", 2)
