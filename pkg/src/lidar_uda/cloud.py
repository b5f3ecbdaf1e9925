"""Point-cloud containers and SemanticKITTI-compatible binary I/O.

Scan files hold packed little-endian float32 quadruplets ``(x, y, z,
reflectance)``; label files hold one little-endian uint32 per point with the
semantic class in the lower 16 bits and the instance id in the upper 16.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataIOError, FormatError, ValidationError

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_STRIDE = 16


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """One LiDAR scan in sensor-relative coordinates.

    ``beam`` is -1 where the laser channel is unknown; ``labels`` is None for
    unlabeled (target) data. Arrays are copied and made read-only.
    """

    points: np.ndarray
    reflectance: np.ndarray | None = None
    beam: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {pts.shape}")
        n = pts.shape[0]
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite coordinate at point {int(np.argmax(bad))}")

        refl = np.zeros(n) if self.reflectance is None else np.asarray(self.reflectance, dtype=np.float64)
        beam = np.full(n, -1, dtype=np.int64) if self.beam is None else np.asarray(self.beam, dtype=np.int64)
        for name, arr in (("reflectance", refl), ("beam", beam)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.isfinite(refl).all():
            raise ValidationError(f"non-finite reflectance at point {int(np.argmax(~np.isfinite(refl)))}")

        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "reflectance", _frozen(refl))
        object.__setattr__(self, "beam", _frozen(beam))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,):
                raise ValidationError(f"labels have shape {lab.shape}, expected ({n},)")
            if lab.size and (lab.min() < 0):
                raise ValidationError("labels must be non-negative class ids")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.int64)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def has_beams(self) -> bool:
        return self.n > 0 and bool((self.beam >= 0).all())

    def take(self, index) -> "LabeledCloud":
        """Subset (or reorder) points; every per-point field follows."""
        index = np.asarray(index)
        return LabeledCloud(
            self.points[index],
            self.reflectance[index],
            self.beam[index],
            None if self.labels is None else self.labels[index],
        )

    def with_points(self, points: np.ndarray) -> "LabeledCloud":
        return replace(self, points=points)

    def check_labels(self, class_count: int) -> None:
        if self.labels is not None and self.labels.size and self.labels.max() >= class_count:
            i = int(np.argmax(self.labels >= class_count))
            raise ValidationError(f"label {int(self.labels[i])} at point {i} is >= class count {class_count}")


@dataclass(frozen=True)
class ClassDef:
    """Class names, the ignore index, and an optional raw-id remap.

    ``class_map`` pairs raw 16-bit semantic ids found in ``.label`` files
    with class ids; raw ids it does not list read as ``ignore_index``. When
    absent, label files already hold class ids.
    """

    names: tuple[str, ...]
    ignore_index: int | None = None
    class_map: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.class_map is not None:
            cmap = dict(self.class_map.items() if isinstance(self.class_map, Mapping) else self.class_map)
            object.__setattr__(self, "class_map", tuple(sorted((int(k), int(v)) for k, v in cmap.items())))
            if any(not 0 <= v < len(self.names) for _, v in self.class_map):
                raise ValidationError("class_map targets must be valid class ids")
        if len(self.names) < 2:
            raise ValidationError("a class definition needs at least 2 classes")
        if self.ignore_index is not None and not 0 <= self.ignore_index < len(self.names):
            raise ValidationError(f"ignore_index {self.ignore_index} outside [0, {len(self.names)})")

    @property
    def class_count(self) -> int:
        return len(self.names)

    @classmethod
    def with_unlabeled(cls, names: Sequence[str]) -> "ClassDef":
        """Append an ``unlabeled`` class and make it the ignore index (C-1)."""
        names = tuple(names) + ("unlabeled",)
        return cls(names, len(names) - 1)

    def to_json(self) -> dict:
        d = {"names": list(self.names), "ignore_index": self.ignore_index}
        if self.class_map is not None:
            d["class_map"] = {str(k): v for k, v in self.class_map}
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ClassDef":
        try:
            cmap = d.get("class_map")
            return cls(tuple(d["names"]), d.get("ignore_index"),
                       None if cmap is None else tuple((int(k), int(v)) for k, v in cmap.items()))
        except (KeyError, TypeError, AttributeError, ValueError) as e:
            raise ValidationError(f"malformed class definition: {e}") from None


# --------------------------------------------------------------------------
# binary I/O


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e


def read_scan_bin(path) -> LabeledCloud:
    raw = _read_bytes(path)
    if len(raw) % POINT_STRIDE:
        bad = len(raw) - len(raw) % POINT_STRIDE
        raise FormatError("truncated scan file: length is not a multiple of 16", offset=bad, path=path)
    arr = np.frombuffer(raw, dtype=SCAN_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        raise ValidationError(f"{path}: non-finite value at point {int(np.argmax(bad))}")
    arr = arr.astype(np.float64)
    return LabeledCloud(arr[:, :3], arr[:, 3])


def write_scan_bin(cloud: LabeledCloud, path) -> None:
    out = np.empty((cloud.n, 4), dtype=SCAN_DTYPE)
    out[:, :3] = cloud.points
    out[:, 3] = cloud.reflectance
    _write_bytes(path, out.tobytes())


def read_labels(path, class_map: Mapping[int, int] | None = None, ignore_index: int | None = None) -> np.ndarray:
    """Read a ``.label`` file and remap raw semantic ids to class ids.

    Only the lower 16 bits are the semantic id. Raw ids missing from
    ``class_map`` become ``ignore_index``. ``class_map=None`` keeps raw ids.
    """
    raw = _read_bytes(path)
    if len(raw) % 4:
        raise FormatError("truncated label file: length is not a multiple of 4", offset=len(raw) - len(raw) % 4, path=path)
    sem = np.frombuffer(raw, dtype=LABEL_DTYPE) & 0xFFFF
    if class_map is None:
        return sem.astype(np.int64)
    if ignore_index is None:
        missing = set(np.unique(sem).tolist()) - set(class_map)
        if missing:
            raise ValidationError(f"{path}: raw ids {sorted(missing)} unmapped and no ignore_index given")
        ignore_index = 0
    lut = np.full(1 << 16, ignore_index, dtype=np.int64)
    for k, v in class_map.items():
        lut[int(k) & 0xFFFF] = v
    return lut[sem]


def write_labels(cloud: LabeledCloud, path) -> None:
    if cloud.labels is None:
        raise ValidationError(f"cannot write labels for {path}: cloud has no labels")
    if cloud.labels.size and cloud.labels.max() > 0xFFFF:
        raise ValidationError("class ids must fit in 16 bits")
    _write_bytes(path, cloud.labels.astype(LABEL_DTYPE).tobytes())


def read_cloud(scan_path, label_path=None, class_map=None, ignore_index=None) -> LabeledCloud:
    cloud = read_scan_bin(scan_path)
    if label_path is None:
        return cloud
    labels = read_labels(label_path, class_map, ignore_index)
    if labels.shape[0] != cloud.n:
        raise FormatError(f"label count {labels.shape[0]} != point count {cloud.n}", path=label_path)
    return replace(cloud, labels=labels)


# --------------------------------------------------------------------------
# dataset manifests

SCANS_FILE = "scans.txt"
LABELS_FILE = "labels.txt"
CLASSES_FILE = "classes.json"
ROLE_FILE = "role.txt"


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered list of scans (and optionally labels) plus the class set.

    Paths are stored relative to ``root`` exactly as they appear in the
    manifest text files.
    """

    role: str
    root: Path
    scan_paths: tuple[str, ...]
    label_paths: tuple[str, ...] = ()
    class_def: ClassDef = field(default_factory=lambda: ClassDef.with_unlabeled(["object"]))

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValidationError(f"role must be 'source' or 'target', got {self.role!r}")
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "scan_paths", tuple(self.scan_paths))
        object.__setattr__(self, "label_paths", tuple(self.label_paths))
        if self.label_paths and len(self.label_paths) != len(self.scan_paths):
            raise ValidationError("label_paths must be empty or parallel to scan_paths")
        for paths in (self.scan_paths, self.label_paths):
            if len(set(paths)) != len(paths):
                raise ValidationError("manifest paths must be unique")

    def __len__(self) -> int:
        return len(self.scan_paths)

    @property
    def labeled(self) -> bool:
        return bool(self.label_paths)

    def scan_file(self, i: int) -> Path:
        return self.root / self.scan_paths[i]

    def label_file(self, i: int) -> Path:
        return self.root / self.label_paths[i]

    def load(self, i: int, with_labels: bool = True) -> LabeledCloud:
        lab = self.label_file(i) if (with_labels and self.labeled) else None
        cmap = None if self.class_def.class_map is None else dict(self.class_def.class_map)
        cloud = read_cloud(self.scan_file(i), lab, cmap, self.class_def.ignore_index)
        cloud.check_labels(self.class_def.class_count)
        return cloud

    def load_all(self, with_labels: bool = True) -> list[LabeledCloud]:
        return [self.load(i, with_labels) for i in range(len(self))]

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / SCANS_FILE).write_text("".join(p + "\n" for p in self.scan_paths), encoding="utf-8")
        if self.label_paths:
            (self.root / LABELS_FILE).write_text("".join(p + "\n" for p in self.label_paths), encoding="utf-8")
        elif (self.root / LABELS_FILE).exists():
            os.remove(self.root / LABELS_FILE)
        (self.root / CLASSES_FILE).write_text(json.dumps(self.class_def.to_json(), indent=2) + "\n", encoding="utf-8")
        (self.root / ROLE_FILE).write_text(self.role + "\n", encoding="utf-8")


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def load_manifest(root, role: str | None = None) -> DatasetManifest:
    """Load a dataset directory written by :meth:`DatasetManifest.save`."""
    root = Path(root)
    scans = _read_lines(root / SCANS_FILE)
    labels = _read_lines(root / LABELS_FILE) if (root / LABELS_FILE).exists() else []
    try:
        cdef = ClassDef.from_json(json.loads((root / CLASSES_FILE).read_text(encoding="utf-8")))
    except OSError as e:
        raise DataIOError(root / CLASSES_FILE, e.strerror or str(e)) from e
    if role is None:
        role = _read_lines(root / ROLE_FILE)[0] if (root / ROLE_FILE).exists() else ("source" if labels else "target")
    return DatasetManifest(role, root, tuple(scans), tuple(labels), cdef)


def write_dataset(root, clouds: Sequence[LabeledCloud], class_def: ClassDef, role: str,
                  with_labels: bool = True, label_dir: str = "labels") -> DatasetManifest:
    """Write clouds as ``scans/NNNNNN.bin`` (+ ``labels/NNNNNN.label``) and a manifest."""
    root = Path(root)
    scan_paths, label_paths = [], []
    for i, c in enumerate(clouds):
        sp = f"scans/{i:06d}.bin"
        write_scan_bin(c, root / sp)
        scan_paths.append(sp)
        if with_labels:
            lp = f"{label_dir}/{i:06d}.label"
            write_labels(c, root / lp)
            label_paths.append(lp)
    man = DatasetManifest(role, root, tuple(scan_paths), tuple(label_paths), class_def)
    man.save()
    return man
