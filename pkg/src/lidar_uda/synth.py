"""Synthetic urban scenes and a ray-casting virtual LiDAR.

Scenes are built from primitives with closed-form ray intersections (plane,
axis-aligned box, vertical capped cylinder, sphere). The scanner casts one
ray per (beam, azimuth step) and keeps the nearest hit, so every point lies
exactly on the surface of the primitive that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cloud import ClassDef, DatasetManifest, LabeledCloud, write_dataset
from .errors import ValidationError

SYNTH_CLASSES = ClassDef.with_unlabeled(
    ["road", "sidewalk", "building", "car", "person", "pole", "vegetation"]
)
ROAD, SIDEWALK, BUILDING, CAR, PERSON, POLE, VEGETATION, UNLABELED = range(8)

# mean reflectance per class; each primitive gets a small uniform jitter
CLASS_REFLECTANCE = (0.20, 0.35, 0.50, 0.70, 0.40, 0.60, 0.30, 0.50)

_EPS_T = 1e-9


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    offset: float
    label: int
    reflectance: float = 0.2

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ n) / denom
        t[~np.isfinite(t) | (t <= _EPS_T)] = np.inf
        return t

    def distance(self, p: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        return np.abs(p @ n - self.offset) / np.linalg.norm(n)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int
    reflectance: float = 0.5

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        t_near = np.full(dirs.shape[0], -np.inf)
        t_far = np.full(dirs.shape[0], np.inf)
        for ax in range(3):
            d = dirs[:, ax]
            par = d == 0.0
            if par.any() and not (lo[ax] <= origin[ax] <= hi[ax]):
                t_far[par] = -np.inf
            nz = ~par
            t1 = (lo[ax] - origin[ax]) / d[nz]
            t2 = (hi[ax] - origin[ax]) / d[nz]
            t_near[nz] = np.maximum(t_near[nz], np.minimum(t1, t2))
            t_far[nz] = np.minimum(t_far[nz], np.maximum(t1, t2))
        t = np.where(t_near > _EPS_T, t_near, t_far)
        t[(t_far < t_near) | (t <= _EPS_T)] = np.inf
        return t

    def distance(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        out = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        outside = np.linalg.norm(out, axis=1)
        inside = np.minimum(p - lo, hi - p).min(axis=1)
        return np.where((out > 0).any(axis=1), outside, inside)

    @property
    def footprint(self) -> tuple[float, float, float]:
        cx, cy = (self.lo[0] + self.hi[0]) / 2, (self.lo[1] + self.hi[1]) / 2
        r = math.hypot(self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]) / 2
        return cx, cy, r


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder with flat caps at ``z0`` and ``z1``."""

    center: tuple[float, float]
    radius: float
    z0: float
    z1: float
    label: int
    reflectance: float = 0.6

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        ox, oy, oz = origin[0] - cx, origin[1] - cy, origin[2]
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        best = np.full(dirs.shape[0], np.inf)

        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius**2
        disc = b * b - 4 * a * c
        ok = (a > 0) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(ok, a, 1.0)
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * safe_a)
            z = oz + t * dz
            hit = ok & (t > _EPS_T) & (z >= self.z0) & (z <= self.z1)
            best = np.where(hit & (t < best), t, best)

        for zc in (self.z0, self.z1):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zc - oz) / dz
                px, py = ox + t * dx, oy + t * dy
            hit = np.isfinite(t) & (t > _EPS_T) & (px * px + py * py <= self.radius**2)
            best = np.where(hit & (t < best), t, best)
        return best

    def distance(self, p: np.ndarray) -> np.ndarray:
        rho = np.hypot(p[:, 0] - self.center[0], p[:, 1] - self.center[1])
        z = p[:, 2]
        dr = rho - self.radius
        dz = np.maximum(self.z0 - z, z - self.z1)
        inside = (dr <= 0) & (dz <= 0)
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return np.where(inside, np.minimum(-dr, -dz), outside)

    @property
    def footprint(self) -> tuple[float, float, float]:
        return self.center[0], self.center[1], self.radius


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    label: int
    reflectance: float = 0.3

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center, dtype=float)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS_T, t0, t1)
        t[~ok | (t <= _EPS_T)] = np.inf
        return t

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - np.asarray(self.center, dtype=float), axis=1) - self.radius)

    @property
    def footprint(self) -> tuple[float, float, float]:
        return self.center[0], self.center[1], self.radius


Primitive = Plane | Box | Cylinder | Sphere


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    extent: float = 40.0

    def nearest_primitive(self, world_points: np.ndarray) -> np.ndarray:
        """Index of the primitive whose surface is closest to each point."""
        if not self.primitives:
            raise ValidationError("scene has no primitives")
        d = np.stack([p.distance(world_points) for p in self.primitives], axis=1)
        return np.argmin(d, axis=1)

    def labels_of(self, index: np.ndarray) -> np.ndarray:
        lut = np.array([p.label for p in self.primitives], dtype=np.int64)
        return lut[index]


# --------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a random street scene; sizes are (low, high) ranges in meters."""

    seed: int = 0
    extent: float = 40.0
    ground: bool = True
    n_sidewalks: int = 2
    n_buildings: int = 8
    n_cars: int = 10
    n_persons: int = 0
    n_poles: int = 10
    n_vegetation: int = 8
    n_clutter: int = 0
    sidewalk_width: tuple[float, float] = (2.0, 4.0)
    curb_height: float = 0.15
    building_size: tuple[float, float] = (6.0, 16.0)
    building_height: tuple[float, float] = (4.0, 14.0)
    car_length: tuple[float, float] = (3.8, 4.8)
    car_width: tuple[float, float] = (1.6, 1.9)
    car_height: tuple[float, float] = (1.4, 1.7)
    person_radius: tuple[float, float] = (0.2, 0.3)
    person_height: tuple[float, float] = (1.6, 1.9)
    pole_radius: tuple[float, float] = (0.08, 0.15)
    pole_height: tuple[float, float] = (3.0, 7.0)
    vegetation_radius: tuple[float, float] = (0.8, 2.0)
    clutter_size: tuple[float, float] = (0.3, 1.0)

    def __post_init__(self):
        if not self.extent > 0:
            raise ValidationError("extent must be > 0")
        for name in ("n_sidewalks", "n_buildings", "n_cars", "n_persons", "n_poles", "n_vegetation", "n_clutter"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("sidewalk_width", "building_size", "building_height", "car_length", "car_width",
                     "car_height", "person_radius", "person_height", "pole_radius", "pole_height",
                     "vegetation_radius", "clutter_size"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if not self.curb_height > 0:
            raise ValidationError("curb_height must be > 0")


def _refl(rng: np.random.Generator, label: int) -> float:
    return float(np.clip(CLASS_REFLECTANCE[label] + rng.uniform(-0.05, 0.05), 0.0, 1.0))


def _place(rng, extent, radius, taken, margin=0.5, tries=200):
    """Rejection-sample a footprint centre that does not overlap ``taken``."""
    lim = extent - radius
    for _ in range(tries):
        x, y = rng.uniform(-lim, lim, size=2)
        if all(math.hypot(x - tx, y - ty) > radius + tr + margin for tx, ty, tr in taken):
            return float(x), float(y)
    return None


def generate_scene(spec: SceneSpec) -> Scene:
    """Build a deterministic random scene from ``spec``.

    Objects are placed largest-first with footprint rejection sampling; an
    object that cannot be placed after many tries is dropped (only possible
    when the scene is over-full).
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & (2**64 - 1), 0x5CE9E]))
    E = spec.extent
    prims: list = []
    if spec.ground:
        prims.append(Plane((0.0, 0.0, 1.0), 0.0, ROAD, _refl(rng, ROAD)))

    for _ in range(spec.n_sidewalks):
        w = rng.uniform(*spec.sidewalk_width)
        c = rng.uniform(-E + w, E - w)
        if rng.random() < 0.5:
            lo, hi = (-E, c - w / 2, 0.0), (E, c + w / 2, spec.curb_height)
        else:
            lo, hi = (c - w / 2, -E, 0.0), (c + w / 2, E, spec.curb_height)
        prims.append(Box(lo, hi, SIDEWALK, _refl(rng, SIDEWALK)))

    taken: list[tuple[float, float, float]] = []

    for _ in range(spec.n_buildings):
        sx, sy = rng.uniform(*spec.building_size, size=2)
        h = rng.uniform(*spec.building_height)
        r = math.hypot(sx, sy) / 2
        pos = _place(rng, E, r, taken)
        if pos is None:
            continue
        x, y = pos
        prims.append(Box((x - sx / 2, y - sy / 2, 0.0), (x + sx / 2, y + sy / 2, h), BUILDING, _refl(rng, BUILDING)))
        taken.append((x, y, r))

    for _ in range(spec.n_cars):
        length, width, h = rng.uniform(*spec.car_length), rng.uniform(*spec.car_width), rng.uniform(*spec.car_height)
        if rng.random() < 0.5:
            sx, sy = length, width
        else:
            sx, sy = width, length
        r = math.hypot(sx, sy) / 2
        pos = _place(rng, E, r, taken)
        if pos is None:
            continue
        x, y = pos
        prims.append(Box((x - sx / 2, y - sy / 2, 0.0), (x + sx / 2, y + sy / 2, h), CAR, _refl(rng, CAR)))
        taken.append((x, y, r))

    for count, label, rad, height in (
        (spec.n_persons, PERSON, spec.person_radius, spec.person_height),
        (spec.n_poles, POLE, spec.pole_radius, spec.pole_height),
    ):
        for _ in range(count):
            r, h = rng.uniform(*rad), rng.uniform(*height)
            pos = _place(rng, E, r, taken)
            if pos is None:
                continue
            prims.append(Cylinder(pos, r, 0.0, h, label, _refl(rng, label)))
            taken.append((*pos, r))

    for _ in range(spec.n_vegetation):
        r = rng.uniform(*spec.vegetation_radius)
        pos = _place(rng, E, r, taken)
        if pos is None:
            continue
        # sunk into the ground so the ground disk under it is never visible
        prims.append(Sphere((pos[0], pos[1], 0.7 * r), r, VEGETATION, _refl(rng, VEGETATION)))
        taken.append((*pos, r))

    for _ in range(spec.n_clutter):
        s = rng.uniform(*spec.clutter_size, size=3)
        r = math.hypot(s[0], s[1]) / 2
        pos = _place(rng, E, r, taken)
        if pos is None:
            continue
        x, y = pos
        prims.append(Box((x - s[0] / 2, y - s[1] / 2, 0.0), (x + s[0] / 2, y + s[1] / 2, s[2]), UNLABELED,
                         _refl(rng, UNLABELED)))
        taken.append((x, y, r))

    return Scene(tuple(prims), E)


# --------------------------------------------------------------------------
# sensor


@dataclass(frozen=True)
class SensorConfig:
    """Virtual spinning LiDAR. Angles in degrees, distances in meters.

    ``mount_tilt`` tilts the rotation axis away from vertical (about the
    sensor's y axis). Elevations of the ``beam_count`` lasers are evenly spaced
    over ``vertical_fov`` with both endpoints included.
    """

    beam_count: int = 64
    vertical_fov: tuple[float, float] = (-24.8, 2.0)
    horizontal_steps: int = 360
    mount_height: float = 1.73
    mount_tilt: float = 0.0
    max_range: float = 50.0
    azimuth_span: tuple[float, float] = (-180.0, 180.0)
    range_noise: float = 0.0

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValidationError("beam_count must be >= 1")
        if self.horizontal_steps < 1:
            raise ValidationError("horizontal_steps must be >= 1")
        if not self.vertical_fov[0] < self.vertical_fov[1]:
            raise ValidationError("vertical_fov must satisfy min < max")
        if not self.max_range > 0:
            raise ValidationError("max_range must be > 0")
        if not self.azimuth_span[0] < self.azimuth_span[1]:
            raise ValidationError("azimuth_span must be non-empty")
        if self.range_noise < 0:
            raise ValidationError("range_noise must be >= 0")

    def elevations(self) -> np.ndarray:
        lo, hi = self.vertical_fov
        if self.beam_count == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, self.beam_count)

    def azimuths(self) -> np.ndarray:
        a0, a1 = self.azimuth_span
        return a0 + (np.arange(self.horizontal_steps) + 0.5) * (a1 - a0) / self.horizontal_steps

    def ray_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions in the sensor frame, beam-major, plus beam ids."""
        el = np.radians(self.elevations())[:, None]
        az = np.radians(self.azimuths())[None, :]
        d = np.stack(np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)), axis=-1)
        beams = np.repeat(np.arange(self.beam_count), self.horizontal_steps)
        return d.reshape(-1, 3), beams


SENSOR_PRESETS: dict[str, SensorConfig] = {
    # SemanticKITTI, Velodyne HDL-64E on a car roof
    "hdl64": SensorConfig(64, (-24.8, 2.0), 360, 1.73, 0.0, 50.0),
    # I3A, Velodyne VLP-16 on a TurtleBot
    "vlp16": SensorConfig(16, (-15.0, 15.0), 360, 0.5, 0.0, 50.0),
    # SemanticPoss-like 40-line Pandora on a car
    "pandora40": SensorConfig(40, (-16.0, 7.0), 360, 1.8, 0.0, 50.0),
    # Paris-Lille-like tilted HDL-32E: rotation axis 30 deg above horizontal, points kept below 20 m
    "hdl32_tilted": SensorConfig(32, (-30.67, 10.67), 360, 2.5, 60.0, 20.0),
}


def sensor_preset(name: str, **overrides) -> SensorConfig:
    try:
        base = SENSOR_PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown sensor preset {name!r}; choose from {sorted(SENSOR_PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class SensorPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0  # degrees


def _rotation(sensor: SensorConfig, pose: SensorPose) -> np.ndarray:
    t, y = math.radians(sensor.mount_tilt), math.radians(pose.yaw)
    tilt = np.array([[math.cos(t), 0.0, math.sin(t)], [0.0, 1.0, 0.0], [-math.sin(t), 0.0, math.cos(t)]])
    yaw = np.array([[math.cos(y), -math.sin(y), 0.0], [math.sin(y), math.cos(y), 0.0], [0.0, 0.0, 1.0]])
    return yaw @ tilt


def sensor_to_world(points: np.ndarray, sensor: SensorConfig, pose: SensorPose) -> np.ndarray:
    origin = np.array([pose.x, pose.y, sensor.mount_height])
    return origin + points @ _rotation(sensor, pose).T


def cast_rays(scene: Scene, sensor: SensorConfig, pose: SensorPose = SensorPose()):
    """Nearest hit distance and primitive index per ray (inf / -1 on miss)."""
    d_sensor, beams = sensor.ray_directions()
    origin = np.array([pose.x, pose.y, sensor.mount_height])
    d_world = d_sensor @ _rotation(sensor, pose).T
    t_best = np.full(d_sensor.shape[0], np.inf)
    idx = np.full(d_sensor.shape[0], -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(origin, d_world)
        closer = t < t_best
        t_best[closer] = t[closer]
        idx[closer] = k
    return d_sensor, beams, t_best, idx


def scan(scene: Scene, sensor: SensorConfig, pose: SensorPose = SensorPose(),
         rng: np.random.Generator | None = None, return_hits: bool = False):
    """Scan ``scene`` and return a labeled cloud in sensor-relative coordinates.

    With ``return_hits`` the index of the primitive hit by each point is
    returned as a second value. Range noise (``sensor.range_noise`` > 0) draws
    from ``rng``, defaulting to a fixed seed.
    """
    d_sensor, beams, t, idx = cast_rays(scene, sensor, pose)
    if sensor.range_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        t = t + sensor.range_noise * rng.standard_normal(t.shape)
    keep = np.isfinite(t) & (t > 0) & (t <= sensor.max_range) & (idx >= 0)
    pts = d_sensor[keep] * t[keep, None]
    hit = idx[keep]
    if scene.primitives:
        labels = scene.labels_of(hit)
        refl = np.array([p.reflectance for p in scene.primitives])[hit]
    else:
        labels, refl = np.zeros(0, dtype=np.int64), np.zeros(0)
    cloud = LabeledCloud(pts, refl, beams[keep], labels)
    return (cloud, hit) if return_hits else cloud


def random_pose(scene: Scene, rng: np.random.Generator, clearance: float = 1.5, tries: int = 500) -> SensorPose:
    """Planar position in the inner half of the scene, away from obstacles."""
    obstacles = [p.footprint for p in scene.primitives if isinstance(p, (Cylinder, Sphere))
                 or (isinstance(p, Box) and p.label != SIDEWALK)]
    lim = 0.5 * scene.extent
    for _ in range(tries):
        x, y = rng.uniform(-lim, lim, size=2)
        if all(math.hypot(x - ox, y - oy) > r + clearance for ox, oy, r in obstacles):
            return SensorPose(float(x), float(y), float(rng.uniform(-180.0, 180.0)))
    return SensorPose(0.0, 0.0, float(rng.uniform(-180.0, 180.0)))


# --------------------------------------------------------------------------
# domain pairs


def domain_pair_clouds(spec: SceneSpec, src: SensorConfig, tgt: SensorConfig, n_scans: int,
                       ) -> tuple[list[LabeledCloud], list[LabeledCloud]]:
    """Scan ``n_scans`` scenes (seeds ``spec.seed + i``) with both sensors from the same pose."""
    if n_scans < 1:
        raise ValidationError("n_scans must be >= 1")
    sources, targets = [], []
    for i in range(n_scans):
        scene = generate_scene(replace(spec, seed=spec.seed + i))
        pose = random_pose(scene, np.random.default_rng(np.random.SeedSequence([spec.seed, i, 1])))
        noise_seed = np.random.SeedSequence([spec.seed, i, 2])
        sources.append(scan(scene, src, pose, np.random.default_rng(noise_seed)))
        targets.append(scan(scene, tgt, pose, np.random.default_rng(noise_seed)))
    return sources, targets


def domain_pair(spec: SceneSpec, src: SensorConfig, tgt: SensorConfig, n_scans: int, out_dir,
                class_def: ClassDef = SYNTH_CLASSES) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a labeled source set and an unlabeled target set under ``out_dir``.

    Layout::

        out_dir/source/        scans + labels, manifest lists both
        out_dir/target/        scans in the manifest; labels/ written but not listed
        out_dir/target_eval/   manifest pairing the target scans with their labels
    """
    out = Path(out_dir)
    sources, targets = domain_pair_clouds(spec, src, tgt, n_scans)
    src_man = write_dataset(out / "source", sources, class_def, "source")
    tgt_man = write_dataset(out / "target", targets, class_def, "target", with_labels=True)
    tgt_man = DatasetManifest("target", tgt_man.root, tgt_man.scan_paths, (), class_def)
    tgt_man.save()
    DatasetManifest(
        "target", out / "target_eval",
        tuple(f"../target/{p}" for p in tgt_man.scan_paths),
        tuple(f"../target/labels/{i:06d}.label" for i in range(n_scans)),
        class_def,
    ).save()
    return src_man, tgt_man
