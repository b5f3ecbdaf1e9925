"""Spherical-projection images of a scan: range in gray, labels in color.

Columns are azimuth bins with azimuth 0 (straight ahead) at column
``width // 2`` and azimuth increasing to the left; rows are beams, top row
for the highest beam. When several points fall into one cell the nearest
wins. Images are binary PGM/PPM so they need no imaging library.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .align import azimuth_deg, infer_beams
from .cloud import LabeledCloud
from .errors import DataIOError, ValidationError
from .synth import SensorConfig

# fixed palette, cycled for class ids beyond its length
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (0, 0, 142), (220, 20, 60),
    (153, 153, 153), (107, 142, 35), (250, 170, 30), (102, 102, 156), (190, 153, 153),
    (220, 220, 0), (152, 251, 152), (70, 130, 180), (255, 0, 0), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32), (81, 0, 81),
], dtype=np.uint8)
IGNORE_COLOR = (255, 255, 255)


def _cells(cloud: LabeledCloud, sensor: SensorConfig, width: int, height: int):
    """Pixel (row, col) per point and the order that lets the nearest point win."""
    if width < 1 or height < 1:
        raise ValidationError(f"render resolution must be positive, got {width}x{height}")
    if not cloud.has_beams:
        cloud = infer_beams(cloud, sensor)
    B = sensor.beam_count
    beam = np.clip(cloud.beam, 0, B - 1)
    row = ((B - 1 - beam) * height) // B
    col = np.floor((180.0 - azimuth_deg(cloud.points)) / 360.0 * width).astype(np.int64) % width
    r = np.linalg.norm(cloud.points, axis=1)
    # write farthest first so the nearest point is the last write to a cell;
    # ties keep the lower point index
    order = np.lexsort((-np.arange(cloud.n), -r))
    return row[order], col[order], r[order], order


def range_image(cloud: LabeledCloud, sensor: SensorConfig, width: int, height: int,
                max_range: float) -> np.ndarray:
    """uint8 (height, width) image; gray = round(255 * min(r, max_range) / max_range),
    at least 1 so a hit is never black."""
    if not max_range > 0:
        raise ValidationError("max_range must be > 0")
    img = np.zeros((height, width), dtype=np.uint8)
    if cloud.n == 0:
        _cells(cloud, sensor, width, height)
        return img
    row, col, r, _ = _cells(cloud, sensor, width, height)
    gray = np.clip(np.round(255.0 * np.minimum(r, max_range) / max_range), 1, 255).astype(np.uint8)
    img[row, col] = gray
    return img


def label_image(cloud: LabeledCloud, sensor: SensorConfig, width: int, height: int,
                ignore_index: int | None = None) -> np.ndarray:
    """uint8 (height, width, 3) image colored by class; unlabeled clouds and
    the ignore class are drawn white."""
    img = np.zeros((height, width, 3), dtype=np.uint8)
    if cloud.n == 0:
        _cells(cloud, sensor, width, height)
        return img
    row, col, _, order = _cells(cloud, sensor, width, height)
    if cloud.labels is None:
        colors = np.tile(np.array(IGNORE_COLOR, np.uint8), (cloud.n, 1))
    else:
        lab = cloud.labels[order]
        colors = PALETTE[lab % len(PALETTE)]
        if ignore_index is not None:
            colors[lab == ignore_index] = IGNORE_COLOR
    img[row, col] = colors
    return img


def write_pnm(img: np.ndarray, path) -> None:
    """Binary PGM for 2-D arrays, PPM for (h, w, 3)."""
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    data = magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e


def read_pnm(path) -> np.ndarray:
    """Inverse of :func:`write_pnm` (binary P5/P6, maxval 255, no comments)."""
    raw = Path(path).read_bytes()
    magic, w, h, maxval = raw.split(maxsplit=4)[:4]
    w, h = int(w), int(h)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValidationError(f"{path}: unsupported image header")
    # the payload starts right after the single whitespace following maxval
    start = len(raw) - w * h * (1 if magic == b"P5" else 3)
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(raw[start:], dtype=np.uint8).reshape(shape)
