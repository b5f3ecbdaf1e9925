import struct

import numpy as np
import pytest

from lidar_uda.errors import DataIOError, FormatError, NumericError, ValidationError
from lidar_uda.losses import entropy_loss, seg_loss
from lidar_uda.model import (
    Prediction,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
)

from oracles import finite_difference, mlp_probs, rel_error


def test_forward_matches_reference():
    p = init_params(10, 5, seed=3, hidden=(7, 6))
    x = np.random.default_rng(0).standard_normal((9, 10))
    pred = forward(p, x)
    np.testing.assert_allclose(pred.probs, mlp_probs(p, x), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_is_stable_for_huge_logits():
    p = init_params(2, 3, seed=0, hidden=(4, 4))
    pred = forward(p, np.array([[1e6, -1e6]]))
    assert np.isfinite(pred.probs).all()


def test_argmax_ties_lowest_class():
    pred = Prediction(np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]]), np.zeros((2, 3)))
    assert pred.argmax().tolist() == [0, 1]


def test_init_variance_and_biases():
    D = 400
    p = init_params(D, 8, seed=1, hidden=(300, 200))
    assert p.w1.var() == pytest.approx(2.0 / D, rel=0.05)
    assert p.w2.var() == pytest.approx(2.0 / 300, rel=0.05)
    assert not p.b1.any() and not p.b2.any() and not p.b3.any()
    q = init_params(D, 8, seed=1, hidden=(300, 200))
    assert all(np.array_equal(a, b) for a, b in zip(p.tensors(), q.tensors()))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = init_params(6, 4, seed=2, hidden=(5, 5))
    x = rng.standard_normal((8, 6))
    y = rng.integers(0, 4, 8)
    pred = forward(p, x)
    g = backward(p, x, pred, seg_loss(pred, y).dL_dprobs).flat()
    num = finite_difference(lambda q: seg_loss(mlp_probs(q, x), y).value, p)
    assert rel_error(g, num) < 1e-6
    g = backward(p, x, pred, entropy_loss(pred).dL_dprobs).flat()
    num = finite_difference(lambda q: entropy_loss(mlp_probs(q, x)).value, p)
    assert rel_error(g, num) < 1e-6


def test_zero_upstream_gives_zero_grads():
    p = init_params(3, 2, hidden=(4, 4))
    x = np.ones((2, 3))
    pred = forward(p, x)
    g = backward(p, x, pred, np.zeros((2, 2)))
    assert not g.flat().any()
    assert not zero_grads(p).flat().any()


def test_nonfinite_activation_names_layer():
    p = init_params(2, 2, hidden=(3, 3))
    with pytest.raises(NumericError, match="layer 1"):
        forward(p, np.array([[np.inf, 0.0]]))


def test_feature_dim_mismatch():
    with pytest.raises(ValidationError):
        forward(init_params(4, 2), np.zeros((1, 5)))


def test_checkpoint_round_trip(tmp_path):
    p = init_params(12, 5, seed=77)
    save_checkpoint(p, tmp_path / "c.bin")
    q = load_checkpoint(tmp_path / "c.bin", D=12, C=5)
    assert q.init_seed == 77
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.tensors(), q.tensors()))
    save_checkpoint(q, tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = init_params(4, 3, hidden=(5, 5))
    f = tmp_path / "c.bin"
    save_checkpoint(p, f)
    raw = f.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "ver.bin").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "ver.bin")
    with pytest.raises(ValidationError):
        load_checkpoint(f, D=5)
    with pytest.raises(DataIOError):
        load_checkpoint(tmp_path / "missing.bin")
