import numpy as np
import pytest

from lidar_uda.cloud import LabeledCloud
from lidar_uda.errors import ValidationError
from lidar_uda.render import PALETTE, label_image, range_image, read_pnm, write_pnm
from lidar_uda.synth import SceneSpec, domain_pair_clouds, sensor_preset

S = sensor_preset("vlp16")


def test_empty_cloud_is_black():
    img = range_image(LabeledCloud(np.zeros((0, 3))), S, 90, 16, 20.0)
    assert img.shape == (16, 90) and not img.any()
    assert not label_image(LabeledCloud(np.zeros((0, 3))), S, 90, 16).any()


def test_single_point_dead_ahead():
    c = LabeledCloud(np.array([[10.0, 0.0, 0.0]]), labels=np.array([3]))
    img = range_image(c, S, 360, 16, 20.0)
    rows, cols = np.nonzero(img)
    assert cols.tolist() == [180]
    assert abs(int(img[rows[0], cols[0]]) - 127.5) <= 1
    lab = label_image(c, S, 360, 16)
    assert lab[rows[0], 180].tolist() == PALETTE[3].tolist()
    assert np.count_nonzero(lab.any(axis=2)) == 1


def test_left_is_left_and_top_is_up():
    c = LabeledCloud(np.array([[0.0, 10.0, 0.0], [10.0, 0.0, 2.6]]))
    img = range_image(c, S, 360, 16, 50.0)
    rows, cols = np.nonzero(img)
    by_col = dict(zip(cols.tolist(), rows.tolist()))
    assert 90 in by_col  # +y (left) lands left of centre
    assert by_col[180] < by_col[90]  # the raised point is higher in the image


def test_nearest_point_wins_and_range_clamps():
    c = LabeledCloud(np.array([[20.0, 0.0, 0.0], [5.0, 0.0, 0.0], [80.0, 0.0, 30.0]]), beam=np.array([7, 7, 15]))
    img = range_image(c, S, 36, 16, 40.0)
    assert img[16 - 1 - 7, 18] == round(255 * 5 / 40)
    assert img[0, 18] == 255


def test_render_deterministic(tmp_path):
    src, _ = domain_pair_clouds(SceneSpec(seed=0), S, S, 1)
    for k in ("a", "b"):
        write_pnm(range_image(src[0], S, 180, 16, 50.0), tmp_path / f"{k}.pgm")
        write_pnm(label_image(src[0], S, 180, 16, 7), tmp_path / f"{k}.ppm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    img = read_pnm(tmp_path / "a.ppm")
    assert img.shape == (16, 180, 3) and img.any()


def test_bad_resolution():
    with pytest.raises(ValidationError):
        range_image(LabeledCloud(np.zeros((1, 3)) + 1), S, 0, 16, 10.0)
