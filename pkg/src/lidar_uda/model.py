"""Per-point MLP classifier ``D -> h1 -> h2 -> C`` with an exact backward pass.

The backward pass takes the gradient of a scalar loss with respect to the
predicted probabilities, so every loss only has to supply ``dL/dP``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataIOError, FormatError, NumericError, ValidationError
from .features import FeatureMatrix

TENSOR_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = b"LUDA"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, D, h1, h2, C, init_seed


@dataclass(frozen=True, eq=False)
class _Tensors:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in TENSOR_NAMES]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1], self.w3.shape[1]

    def _check(self):
        D, h1, h2, C = self.dims
        want = {"w1": (D, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,), "w3": (h2, C), "b3": (C,)}
        for n in TENSOR_NAMES:
            if getattr(self, n).shape != want[n]:
                raise ValidationError(f"{n} has shape {getattr(self, n).shape}, expected {want[n]}")
            if not np.isfinite(getattr(self, n)).all():
                raise NumericError(f"non-finite entries in {n}")


@dataclass(frozen=True, eq=False)
class ModelParams(_Tensors):
    init_seed: int = 0

    def __post_init__(self):
        self._check()

    def step(self, grads: "GradientSet", lr: float) -> "ModelParams":
        return ModelParams(*(p - lr * g for p, g in zip(self.tensors(), grads.tensors())), init_seed=self.init_seed)

    def copy_with(self, tensors) -> "ModelParams":
        return ModelParams(*tensors, init_seed=self.init_seed)


@dataclass(frozen=True, eq=False)
class GradientSet(_Tensors):
    def __post_init__(self):
        self._check()

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(*(a + b for a, b in zip(self.tensors(), other.tensors())))

    def scale(self, s: float) -> "GradientSet":
        return GradientSet(*(s * a for a in self.tensors()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])


def init_params(D: int, C: int, seed: int = 0, hidden: tuple[int, int] = (64, 64)) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    if D < 1 or C < 1 or min(hidden) < 1:
        raise ValidationError("layer sizes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x11A7]))
    sizes = (D, *hidden, C)
    ts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ts.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        ts.append(np.zeros(fan_out))
    return ModelParams(*ts, init_seed=seed)


@dataclass(frozen=True, eq=False)
class Prediction:
    """Row-softmax probabilities plus the logits and hidden activations
    the backward pass needs."""

    probs: np.ndarray
    logits: np.ndarray
    cache: tuple = ()

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def C(self) -> int:
        return self.probs.shape[1]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.probs, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_rows(features) -> np.ndarray:
    return features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)


def forward(params: ModelParams, features: FeatureMatrix | np.ndarray) -> Prediction:
    x = _as_rows(features)
    D, h1, h2, C = params.dims
    if x.ndim != 2 or x.shape[1] != D:
        raise ValidationError(f"features have dimension {x.shape[-1]}, model expects {D}")
    if x.shape[0] == 0:
        return Prediction(np.zeros((0, C)), np.zeros((0, C)), (x, np.zeros((0, h1)), np.zeros((0, h2))))
    with np.errstate(invalid="ignore", over="ignore"):  # checked just below
        z1 = x @ params.w1 + params.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ params.w2 + params.b2
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ params.w3 + params.b3
    for name, t in (("layer 1", z1), ("layer 2", z2), ("output layer", logits)):
        if not np.isfinite(t).all():
            raise NumericError(f"non-finite activation in {name}")
    return Prediction(softmax(logits), logits, (x, a1, a2))


def backward(params: ModelParams, features: FeatureMatrix | np.ndarray, prediction: Prediction,
             dL_dprobs: np.ndarray) -> GradientSet:
    """Parameter gradients of the loss whose probability-gradient is ``dL_dprobs``."""
    g = np.asarray(dL_dprobs, dtype=np.float64)
    if g.shape != prediction.probs.shape:
        raise ValidationError(f"dL_dprobs has shape {g.shape}, expected {prediction.probs.shape}")
    if not np.isfinite(g).all():
        raise NumericError("non-finite upstream gradient")
    x, a1, a2 = prediction.cache if prediction.cache else forward(params, features).cache
    P = prediction.probs
    # softmax Jacobian-vector product: dL/dz = P * (g - <g, P>)
    dz3 = P * (g - (g * P).sum(axis=1, keepdims=True))
    dw3 = a2.T @ dz3
    db3 = dz3.sum(axis=0)
    dz2 = (dz3 @ params.w3.T) * (a2 > 0)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.w2.T) * (a1 > 0)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    return GradientSet(dw1, db1, dw2, db2, dw3, db3)


def zero_grads(params: ModelParams) -> GradientSet:
    return GradientSet(*(np.zeros_like(t) for t in params.tensors()))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    D, h1, h2, C = params.dims
    blob = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, D, h1, h2, C, params.init_seed & (2**64 - 1))
    blob += b"".join(t.astype("<f8").tobytes() for t in params.tensors())
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e


def load_checkpoint(path, D: int | None = None, C: int | None = None) -> ModelParams:
    """Read a checkpoint; ``D``/``C`` when given must match the stored shapes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e
    if len(raw) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header", offset=len(raw), path=path)
    magic, version, d, h1, h2, c, seed = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0, path=path)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    if (D is not None and D != d) or (C is not None and C != c):
        raise ValidationError(f"{path}: checkpoint has D={d}, C={c}; expected D={D}, C={C}")
    shapes = [(d, h1), (h1,), (h1, h2), (h2,), (h2, c), (c,)]
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise FormatError(f"checkpoint size {len(raw)} does not match header shapes ({need} bytes)",
                          offset=min(len(raw), need), path=path)
    off, ts = _HEADER.size, []
    for s in shapes:
        cnt = int(np.prod(s))
        ts.append(np.frombuffer(raw, "<f8", cnt, off).reshape(s).astype(np.float64))
        off += 8 * cnt
    return ModelParams(*ts, init_seed=seed)
