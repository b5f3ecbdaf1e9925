import math
from dataclasses import replace

import numpy as np
import pytest

from lidar_uda.cloud import load_manifest
from lidar_uda.synth import (
    BUILDING,
    CAR,
    ROAD,
    SYNTH_CLASSES,
    Box,
    Cylinder,
    Plane,
    Scene,
    SceneSpec,
    SensorConfig,
    SensorPose,
    Sphere,
    domain_pair,
    domain_pair_clouds,
    generate_scene,
    random_pose,
    scan,
    sensor_preset,
    sensor_to_world,
)

EMPTY = dict(n_sidewalks=0, n_buildings=0, n_cars=0, n_persons=0, n_poles=0, n_vegetation=0, n_clutter=0)


def _inside(prim, p):
    """Strict interior test, written independently of the intersection code."""
    if isinstance(prim, Plane):
        return np.zeros(len(p), bool)
    if isinstance(prim, Box):
        lo, hi = np.array(prim.lo), np.array(prim.hi)
        return ((p > lo) & (p < hi)).all(axis=1)
    if isinstance(prim, Cylinder):
        r = np.hypot(p[:, 0] - prim.center[0], p[:, 1] - prim.center[1])
        return (r < prim.radius) & (p[:, 2] > prim.z0) & (p[:, 2] < prim.z1)
    return np.linalg.norm(p - np.array(prim.center), axis=1) < prim.radius


def test_horizontal_ray_hits_wall():
    wall = Plane((1.0, 0.0, 0.0), 10.0, BUILDING)
    sensor = SensorConfig(1, (-1.0, 1.0), 1, mount_height=1.0, max_range=100.0, azimuth_span=(-1.0, 1.0))
    c = scan(Scene((wall,)), sensor)
    assert c.n == 1
    np.testing.assert_allclose(c.points, [[10.0, 0.0, 0.0]], atol=1e-12)
    assert c.labels.tolist() == [BUILDING]
    assert c.beam.tolist() == [0]


def test_empty_scene_gives_empty_scan():
    assert scan(Scene(()), sensor_preset("hdl64")).n == 0


def _ground_hits_oracle(sensor):
    # a downward ray at elevation e from height h meets z=0 at range h / sin(-e)
    e = np.radians(sensor.elevations())
    down = e < 0
    rng = np.full(e.shape, np.inf)
    rng[down] = sensor.mount_height / np.sin(-e[down])
    return int((rng <= sensor.max_range).sum()) * sensor.horizontal_steps


@pytest.mark.parametrize("fov", [(-30.0, -5.0), (-24.8, 2.0)])
def test_ground_plane_point_counts(fov):
    ground = Scene((Plane((0.0, 0.0, 1.0), 0.0, ROAD),))
    s64 = SensorConfig(64, fov, 90, 1.73, max_range=1000.0)
    s16 = replace(s64, beam_count=16)
    n64, n16 = scan(ground, s64).n, scan(ground, s16).n
    assert n64 == _ground_hits_oracle(s64)
    assert n16 == _ground_hits_oracle(s16)
    if fov[1] < 0:
        assert n64 == 4 * n16


def test_points_within_range_and_on_their_surface():
    for seed in range(3):
        scene = generate_scene(SceneSpec(seed=seed, n_persons=4, n_clutter=3))
        for name in ("hdl64", "vlp16", "hdl32_tilted"):
            sensor = sensor_preset(name, horizontal_steps=120)
            pose = random_pose(scene, np.random.default_rng(seed))
            cloud, hit = scan(scene, sensor, pose, return_hits=True)
            assert cloud.n > 0
            assert (np.linalg.norm(cloud.points, axis=1) <= sensor.max_range).all()
            world = sensor_to_world(cloud.points, sensor, pose)
            for k in np.unique(hit):
                sel = hit == k
                assert scene.primitives[k].distance(world[sel]).max() < 1e-6
            # the nearest surface carries the stored label
            assert np.array_equal(scene.labels_of(scene.nearest_primitive(world)), cloud.labels)


def test_nearest_hit_has_nothing_in_front():
    scene = generate_scene(SceneSpec(seed=7, n_persons=3))
    sensor = sensor_preset("vlp16", horizontal_steps=60)
    cloud = scan(scene, sensor, SensorPose(1.0, -2.0, 30.0))
    origin = np.array([1.0, -2.0, sensor.mount_height])
    world = sensor_to_world(cloud.points, sensor, SensorPose(1.0, -2.0, 30.0))
    for u in np.linspace(0.02, 0.98, 25):
        probe = origin + u * (world - origin)
        assert probe[:, 2].min() > 0  # still above the ground
        for prim in scene.primitives:
            assert not _inside(prim, probe).any()


def test_primitive_intersections_analytic():
    o = np.array([0.0, 0.0, 1.0])
    d = np.array([[1.0, 0.0, 0.0]])
    assert Box((5, -1, 0), (6, 1, 2), CAR).intersect(o, d)[0] == pytest.approx(5.0)
    assert Cylinder((5.0, 0.0), 0.5, 0.0, 2.0, CAR).intersect(o, d)[0] == pytest.approx(4.5)
    assert Sphere((5.0, 0.0, 1.0), 2.0, CAR).intersect(o, d)[0] == pytest.approx(3.0)
    # straight down onto a cylinder cap
    down = np.array([[0.0, 0.0, -1.0]])
    assert Cylinder((0.0, 0.0), 0.5, 0.0, 0.25, CAR).intersect(o, down)[0] == pytest.approx(0.75)
    # parallel ray outside a box slab misses
    assert Box((5, 2, 0), (6, 3, 2), CAR).intersect(o, d)[0] == math.inf


def test_scene_generation_deterministic():
    spec = SceneSpec(seed=42)
    assert generate_scene(spec) == generate_scene(spec)
    assert generate_scene(spec) != generate_scene(replace(spec, seed=43))


def test_zero_counts_only_ground():
    scene = generate_scene(SceneSpec(seed=1, **EMPTY))
    assert len(scene.primitives) == 1 and isinstance(scene.primitives[0], Plane)


def test_exact_car_count():
    scene = generate_scene(SceneSpec(seed=3, **{**EMPTY, "n_cars": 5}))
    cars = [p for p in scene.primitives if isinstance(p, Box) and p.label == CAR]
    assert len(cars) == 5 and len(scene.primitives) == 6


def test_scan_determinism_byte_exact():
    scene = generate_scene(SceneSpec(seed=5))
    sensor = sensor_preset("hdl64", horizontal_steps=90, range_noise=0.02)
    a = scan(scene, sensor, SensorPose(1, 2, 3), np.random.default_rng(9))
    b = scan(scene, sensor, SensorPose(1, 2, 3), np.random.default_rng(9))
    for f in ("points", "reflectance", "beam", "labels"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_domain_pair_layout(tmp_path):
    spec = SceneSpec(seed=0)
    src = sensor_preset("hdl64", horizontal_steps=60)
    tgt = sensor_preset("vlp16", horizontal_steps=60)
    s_man, t_man = domain_pair(spec, src, tgt, 3, tmp_path)
    assert len(s_man) == 3 and s_man.labeled
    assert len(t_man) == 3 and not t_man.labeled
    assert len(list((tmp_path / "target" / "labels").glob("*.label"))) == 3
    ev = load_manifest(tmp_path / "target_eval")
    assert ev.labeled and len(ev) == 3
    assert load_manifest(tmp_path / "target").label_paths == ()
    assert ev.load(0).n == t_man.load(0).n
    # byte-identical on a second run
    domain_pair(spec, src, tgt, 3, tmp_path / "again")
    for sub in ("source/scans/000001.bin", "source/labels/000001.label", "target/scans/000002.bin"):
        assert (tmp_path / sub).read_bytes() == (tmp_path / "again" / sub).read_bytes()


def test_identical_sensors_give_identical_pairs():
    s = sensor_preset("pandora40", horizontal_steps=60)
    a, b = domain_pair_clouds(SceneSpec(seed=2), s, s, 2)
    for x, y in zip(a, b):
        assert x.points.tobytes() == y.points.tobytes()
        assert np.array_equal(x.labels, y.labels)


def test_low_sparse_target_is_sparser_and_offset():
    src = sensor_preset("hdl64", horizontal_steps=90)
    tgt = sensor_preset("vlp16", horizontal_steps=90)
    sources, targets = domain_pair_clouds(SceneSpec(seed=4), src, tgt, 2)
    for s, t in zip(sources, targets):
        assert t.n < s.n
        # ground points sit exactly one mount height below each sensor
        np.testing.assert_allclose(s.points[s.labels == ROAD, 2], -1.73, atol=1e-9)
        np.testing.assert_allclose(t.points[t.labels == ROAD, 2], -0.5, atol=1e-9)
        assert t.points[:, 2].mean() > s.points[:, 2].mean()


def test_synth_classes():
    assert SYNTH_CLASSES.class_count == 8
    assert SYNTH_CLASSES.names[SYNTH_CLASSES.ignore_index] == "unlabeled"
