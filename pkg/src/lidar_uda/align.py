"""Input-space alignment between LiDAR domains.

Global and per-class XYZ-shift augmentation, beam-count matching, field of
view cropping and the source class histogram. Every operation returns a new
cloud; labels, reflectance and beams travel with their points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cloud import ClassDef, LabeledCloud
from .errors import ValidationError
from .synth import SensorConfig


@dataclass(frozen=True)
class AugmentConfig:
    """Half-widths (meters) of the uniform shift ranges."""

    global_shift_xy: float = 5.0
    global_shift_z: float = 2.0
    per_class_shift_xy: float = 3.0
    per_class_shift_z: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("global_shift_xy", "global_shift_z", "per_class_shift_xy", "per_class_shift_z"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


def _draw_shift(rng: np.random.Generator, xy: float, z: float) -> np.ndarray:
    u = rng.uniform(-1.0, 1.0, size=3)
    return u * np.array([xy, xy, z])


def xyz_shift(cloud: LabeledCloud, cfg: AugmentConfig, rng: np.random.Generator | None = None,
              shift: Sequence[float] | None = None) -> LabeledCloud:
    """Translate the whole cloud by one vector drawn uniformly from the box
    ``[-xy, xy]^2 x [-z, z]``. ``shift`` forces the vector."""
    if shift is None:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        shift = _draw_shift(rng, cfg.global_shift_xy, cfg.global_shift_z)
    shift = np.asarray(shift, dtype=np.float64).reshape(3)
    return cloud.with_points(cloud.points + shift)


def per_class_shift(cloud: LabeledCloud, cfg: AugmentConfig, rng: np.random.Generator | None = None,
                    ignore_index: int | None = None,
                    shifts: Mapping[int, Sequence[float]] | None = None) -> LabeledCloud:
    """Translate each class by its own random vector.

    One vector is drawn per class id present, in ascending id order; points
    labeled ``ignore_index`` stay put. ``shifts`` forces the per-class
    vectors (classes missing from it are not moved).
    """
    if cloud.labels is None:
        raise ValidationError("per_class_shift needs a labeled cloud")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pts = cloud.points.copy()
    for c in np.unique(cloud.labels):
        c = int(c)
        if c == ignore_index:
            continue
        if shifts is None:
            v = _draw_shift(rng, cfg.per_class_shift_xy, cfg.per_class_shift_z)
        elif c in shifts:
            v = np.asarray(shifts[c], dtype=np.float64)
        else:
            continue
        pts[cloud.labels == c] += v
    return cloud.with_points(pts)


def beam_selection(src_beams: int, tgt_beams: int, mode: str = "even") -> np.ndarray:
    """Beam indices of a ``src_beams`` sensor kept when reducing to ``tgt_beams``.

    ``even``: round(i * (src-1) / (tgt-1)) for i in 0..tgt-1, half rounded up,
    both end beams kept; a single target beam keeps beam 0.
    ``stride``: every (src // tgt)-th beam starting at 0.
    """
    if tgt_beams < 1 or src_beams < 1:
        raise ValidationError("beam counts must be >= 1")
    if tgt_beams > src_beams:
        raise ValidationError(f"cannot match {src_beams} beams up to {tgt_beams}; only reduction is supported")
    if mode == "even":
        if tgt_beams == 1:
            return np.array([0])
        i = np.arange(tgt_beams)
        # exact integer form of floor(i*(src-1)/(tgt-1) + 1/2)
        return (2 * i * (src_beams - 1) + (tgt_beams - 1)) // (2 * (tgt_beams - 1))
    if mode == "stride":
        return np.arange(tgt_beams) * (src_beams // tgt_beams)
    raise ValidationError(f"unknown beam selection mode {mode!r}")


def match_beams(cloud: LabeledCloud, src_beams: int, tgt_beams: int, mode: str = "even") -> LabeledCloud:
    keep_beams = beam_selection(src_beams, tgt_beams, mode)
    b = cloud.beam
    if cloud.n and ((b < 0) | (b >= src_beams)).any():
        raise ValidationError(
            f"every point needs a beam index in [0, {src_beams}); run infer_beams on clouds without beam ids")
    lut = np.full(src_beams, -1, dtype=np.int64)
    lut[keep_beams] = np.arange(len(keep_beams))
    new_beam = lut[b] if cloud.n else b
    keep = new_beam >= 0
    out = cloud.take(np.flatnonzero(keep))
    return replace(out, beam=new_beam[keep])


def elevation_deg(points: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(r > 0, points[:, 2] / np.where(r > 0, r, 1.0), 0.0)
    return np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))


def azimuth_deg(points: np.ndarray) -> np.ndarray:
    return np.degrees(np.arctan2(points[:, 1], points[:, 0]))


def infer_beams(cloud: LabeledCloud, sensor: SensorConfig) -> LabeledCloud:
    """Assign beams by binning elevation into ``beam_count`` uniform bins.

    Bins are lower-inclusive; points outside the field of view clamp to the
    nearest bin and a point at the origin counts as elevation 0.
    """
    lo, hi = sensor.vertical_fov
    B = sensor.beam_count
    e = elevation_deg(cloud.points)
    b = np.floor((e - lo) / (hi - lo) * B).astype(np.int64)
    return replace(cloud, beam=np.clip(b, 0, B - 1))


def fov_crop(cloud: LabeledCloud, max_range: float = math.inf,
             azimuth_span: tuple[float, float] = (-180.0, 180.0),
             elev_span: tuple[float, float] = (-90.0, 90.0)) -> LabeledCloud:
    """Keep points with range <= max_range, azimuth in [a0, a1) and elevation in [e0, e1].

    The azimuth interval is taken modulo 360 so spans such as (90, 270) work.
    """
    a0, a1 = azimuth_span
    e0, e1 = elev_span
    if not (a0 < a1 and e0 <= e1 and max_range > 0):
        raise ValidationError("invalid field-of-view spans")
    p = cloud.points
    keep = np.linalg.norm(p, axis=1) <= max_range
    if a1 - a0 < 360.0:
        az = a0 + np.mod(azimuth_deg(p) - a0, 360.0)
        keep &= az < a1
    el = elevation_deg(p)
    keep &= (el >= e0) & (el <= e1)
    return cloud.take(np.flatnonzero(keep))


# --------------------------------------------------------------------------
# class histogram


@dataclass(frozen=True, eq=False)
class ClassHistogram:
    freq: np.ndarray
    ignore_index: int | None = None

    def __post_init__(self):
        f = np.asarray(self.freq, dtype=np.float64)
        if f.ndim != 1 or (f < 0).any() or not np.isfinite(f).all():
            raise ValidationError("histogram must be a finite non-negative vector")
        if abs(f.sum() - 1.0) > 1e-9:
            raise ValidationError(f"histogram sums to {f.sum()}, expected 1")
        if self.ignore_index is not None and f[self.ignore_index] != 0:
            raise ValidationError("ignore_index entry must be 0")
        f = f.copy()
        f.setflags(write=False)
        object.__setattr__(self, "freq", f)

    def __len__(self) -> int:
        return self.freq.shape[0]


def class_histogram(label_sets: Iterable[np.ndarray], class_def: ClassDef) -> ClassHistogram:
    """Normalized class frequencies over all non-ignored labels of all scans."""
    C = class_def.class_count
    counts = np.zeros(C, dtype=np.int64)
    for labels in label_sets:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= C):
            raise ValidationError(f"label outside [0, {C})")
        counts += np.bincount(labels, minlength=C)
    if class_def.ignore_index is not None:
        counts[class_def.ignore_index] = 0
    total = counts.sum()
    if total == 0:
        raise ValidationError("no countable (non-ignored) labels for the class histogram")
    return ClassHistogram(counts / total, class_def.ignore_index)


# --------------------------------------------------------------------------
# transform chains

AUGMENTATIONS = ("xyz_shift", "per_class_shift")
TRANSFORMS = AUGMENTATIONS + ("match_beams", "infer_beams", "fov_crop")


@dataclass(frozen=True)
class TransformChain:
    """An ordered list of named transforms plus the parameters they need.

    Augmentations are random and only run when ``train=True``; the others are
    deterministic and run always. ``match_beams`` infers beams with
    ``sensor`` first when the cloud lacks them.
    """

    steps: tuple[str, ...] = ()
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sensor: SensorConfig | None = None
    tgt_beams: int | None = None
    beam_mode: str = "even"
    fov_max_range: float = math.inf
    fov_azimuth: tuple[float, float] = (-180.0, 180.0)
    fov_elevation: tuple[float, float] = (-90.0, 90.0)
    ignore_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for s in self.steps:
            if s not in TRANSFORMS:
                raise ValidationError(f"unknown transform {s!r}; choose from {TRANSFORMS}")
        if ("match_beams" in self.steps or "infer_beams" in self.steps) and self.sensor is None:
            raise ValidationError("beam transforms need a sensor config")
        if "match_beams" in self.steps and self.tgt_beams is None:
            raise ValidationError("match_beams needs tgt_beams")

    def __call__(self, cloud: LabeledCloud, rng: np.random.Generator | None = None,
                 train: bool = True) -> LabeledCloud:
        for step in self.steps:
            if step in AUGMENTATIONS and not train:
                continue
            if step == "xyz_shift":
                cloud = xyz_shift(cloud, self.augment, rng)
            elif step == "per_class_shift":
                cloud = per_class_shift(cloud, self.augment, rng, self.ignore_index)
            elif step == "infer_beams":
                cloud = infer_beams(cloud, self.sensor)
            elif step == "match_beams":
                if not cloud.has_beams:
                    cloud = infer_beams(cloud, self.sensor)
                cloud = match_beams(cloud, self.sensor.beam_count, self.tgt_beams, self.beam_mode)
            elif step == "fov_crop":
                cloud = fov_crop(cloud, self.fov_max_range, self.fov_azimuth, self.fov_elevation)
        return cloud
