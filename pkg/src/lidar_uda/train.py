"""Joint source/target training with SGD and polynomial learning-rate decay.

Every iteration samples ``batch_size`` scans per domain (uniform, with
replacement), runs the configured transform chains, extracts features,
and takes one SGD step on ``seg + lambda_align * align + lambda_ent * ent``.
All randomness is derived from ``(seed, iteration, slot)`` so runs are
bit-reproducible.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import AUGMENTATIONS, AugmentConfig, ClassHistogram, TransformChain, class_histogram
from .cloud import ClassDef, DatasetManifest, LabeledCloud
from .errors import DataIOError, NumericError, ValidationError
from .features import RELATIVE, RELATIVE_ABSOLUTE, feature_dim, knn, relative_features
from .losses import LossWeights, joint_loss
from .metrics import ConfusionMatrix, accumulate, iou
from .model import ModelParams, backward, forward, init_params, save_checkpoint, zero_grads
from .synth import sensor_preset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "loss_seg", "loss_align", "loss_ent", "loss_total")


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 5000
    batch_size: int = 8
    lr0: float = 5e-3
    poly_power: float = 0.9
    momentum: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    source_chain: tuple[str, ...] = ()
    target_chain: tuple[str, ...] = ()
    source_sensor: str = "hdl64"
    target_sensor: str = "vlp16"
    beam_mode: str = "even"
    fov_max_range: float = math.inf
    fov_azimuth: tuple[float, float] = (-180.0, 180.0)
    fov_elevation: tuple[float, float] = (-90.0, 90.0)
    feature_mode: str = RELATIVE_ABSOLUTE
    k: int = 16
    hidden: tuple[int, int] = (64, 64)
    points_per_scan: int = 0
    align_mode: str = "batch"
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValidationError("total_iters must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be > 0")
        if not self.poly_power > 0:
            raise ValidationError("poly_power must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.k < 1 or self.points_per_scan < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValidationError("k >= 1 and non-negative points_per_scan / eval_every / checkpoint_every required")
        feature_dim(self.k, self.feature_mode)
        object.__setattr__(self, "source_chain", tuple(self.source_chain))
        object.__setattr__(self, "target_chain", tuple(self.target_chain))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def chain(self, domain: str, ignore_index: int | None = None) -> TransformChain:
        src, tgt = sensor_preset(self.source_sensor), sensor_preset(self.target_sensor)
        return TransformChain(
            self.source_chain if domain == "source" else self.target_chain,
            augment=self.augment,
            sensor=src if domain == "source" else tgt,
            tgt_beams=tgt.beam_count if domain == "source" else src.beam_count,
            beam_mode=self.beam_mode,
            fov_max_range=self.fov_max_range,
            fov_azimuth=self.fov_azimuth,
            fov_elevation=self.fov_elevation,
            ignore_index=ignore_index,
        )


def lr_at(cfg: TrainConfig, t: int) -> float:
    """``lr0 * (1 - t/T) ** poly_power``."""
    if not 0 <= t <= cfg.total_iters:
        raise ValidationError(f"iteration {t} outside [0, {cfg.total_iters}]")
    return cfg.lr0 * (1.0 - t / cfg.total_iters) ** cfg.poly_power


# --------------------------------------------------------------------------
# data preparation


def _split_chain(chain: TransformChain) -> tuple[TransformChain, TransformChain]:
    """Deterministic prefix (cacheable) and the remainder (run per sample)."""
    steps = chain.steps
    cut = next((i for i, s in enumerate(steps) if s in AUGMENTATIONS), len(steps))
    return replace(chain, steps=steps[:cut]), replace(chain, steps=steps[cut:])


class _Domain:
    """Scans of one domain after the cacheable part of the transform chain.

    Neighbour matrices of untouched clouds are computed once and reused.
    ``cache`` may be shared between runs that use the same data.
    """

    def __init__(self, name: str, clouds: Sequence[LabeledCloud], chain: TransformChain, k: int,
                 cache: dict | None = None, key=None):
        self.name = name
        self.prefix, self.rest = _split_chain(chain)
        self.k = k
        self._cache = cache if cache is not None else {}
        self._key = (key if key is not None else id(clouds), name, self.prefix, k)
        pre = self._cache.get(("clouds",) + self._key)
        if pre is None:
            pre = [self.prefix(c, train=False) for c in clouds]
            self._cache[("clouds",) + self._key] = pre
        self.clouds = pre

    def neighbors(self, i: int) -> np.ndarray:
        key = ("knn", i) + self._key
        nb = self._cache.get(key)
        if nb is None:
            nb = knn(self.clouds[i], self.k)
            self._cache[key] = nb
        return nb

    @property
    def augments(self) -> bool:
        return bool(self.rest.steps)


def _query(cloud: LabeledCloud, n: int, rng: np.random.Generator, ignore_index: int | None,
           labeled: bool) -> np.ndarray:
    idx = np.arange(cloud.n)
    if labeled and ignore_index is not None:
        idx = idx[cloud.labels != ignore_index]
    if n and idx.size > n:
        idx = np.sort(rng.choice(idx, size=n, replace=False))
    return idx


def _batch(domain: _Domain, picks: Sequence[int], cfg: TrainConfig, seed_words, ignore_index, labeled: bool,
           n_total: int, events: list):
    rows, labels = [], []
    for slot, i in enumerate(picks):
        attempt = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence([*seed_words, slot, attempt]))
            cloud = domain.clouds[i]
            if domain.augments:
                cloud = domain.rest(cloud, rng, train=True)
            q = _query(cloud, cfg.points_per_scan, rng, ignore_index, labeled) if cloud.n else np.zeros(0, int)
            if q.size:
                break
            events.append(f"{domain.name} scan {i} empty after transforms; resampled")
            attempt += 1
            if attempt > 100:
                raise ValidationError(f"{domain.name}: could not draw a non-empty scan")
            i = int(rng.integers(n_total))
        nb = knn(cloud, cfg.k, q) if domain.augments else domain.neighbors(i)[q]
        rows.append(relative_features(cloud, nb, cfg.feature_mode, q).rows)
        if labeled:
            labels.append(cloud.labels[q])
    return np.concatenate(rows), (np.concatenate(labels) if labeled else None)


def _as_clouds(data, with_labels: bool) -> tuple[list[LabeledCloud], ClassDef | None]:
    if isinstance(data, DatasetManifest):
        return data.load_all(with_labels), data.class_def
    return list(data), None


# --------------------------------------------------------------------------
# evaluation


def evaluate(params: ModelParams, clouds: Sequence[LabeledCloud], cfg: TrainConfig, class_def: ClassDef,
             cache: dict | None = None, key=None) -> ConfusionMatrix:
    """Confusion matrix over every point that survives the target chain's
    deterministic steps."""
    dom = _Domain("eval", clouds, replace(cfg.chain("target", class_def.ignore_index),
                                          steps=tuple(s for s in cfg.target_chain if s not in AUGMENTATIONS)),
                  cfg.k, cache, key)
    cm = ConfusionMatrix.empty(class_def.class_count, class_def.ignore_index)
    for i, cloud in enumerate(dom.clouds):
        if cloud.n == 0:
            continue
        if cloud.labels is None:
            raise ValidationError("evaluation needs labeled clouds")
        feats = relative_features(cloud, dom.neighbors(i), cfg.feature_mode)
        cm = accumulate(cm, cloud.labels, forward(params, feats))
    return cm


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    log: list[tuple] = field(default_factory=list)
    eval_log: list[tuple] = field(default_factory=list)
    hist: ClassHistogram | None = None
    events: list[str] = field(default_factory=list)


def train(src, tgt, cfg: TrainConfig, class_def: ClassDef | None = None, eval_data=None,
          out_dir=None, cache: dict | None = None, data_key=None) -> TrainResult:
    """Optimize the joint objective.

    ``src``/``tgt``/``eval_data`` are manifests or lists of clouds. Target
    labels are never read for training. With ``out_dir`` the train log, eval
    log and checkpoints are written there.
    """
    src_clouds, cdef = _as_clouds(src, True)
    tgt_clouds, _ = _as_clouds(tgt, False)
    class_def = class_def or cdef
    if class_def is None:
        raise ValidationError("a class definition is required")
    if not src_clouds or not tgt_clouds:
        raise ValidationError("source and target sets must be non-empty")
    if any(c.labels is None for c in src_clouds):
        raise ValidationError("every source scan needs labels")
    tgt_clouds = [replace(c, labels=None) for c in tgt_clouds]
    eval_clouds = None
    if eval_data is not None:
        eval_clouds, _ = _as_clouds(eval_data, True)

    ign, C = class_def.ignore_index, class_def.class_count
    hist = class_histogram([c.labels for c in src_clouds], class_def)
    dkey = data_key if data_key is not None else id(src)
    sdom = _Domain("source", src_clouds, cfg.chain("source", ign), cfg.k, cache, (dkey, "src"))
    tdom = _Domain("target", tgt_clouds, cfg.chain("target", ign), cfg.k, cache, (dkey, "tgt"))
    if all(c.n == 0 for c in tdom.clouds) and not tdom.augments:
        raise ValidationError("every target scan is empty after its transform chain")

    params = init_params(feature_dim(cfg.k, cfg.feature_mode), C, cfg.seed, cfg.hidden)
    velocity = None
    result = TrainResult(params, hist=hist)
    use_target = cfg.weights.lambda_ent > 0 or cfg.weights.lambda_align > 0
    out = Path(out_dir) if out_dir is not None else None

    def do_eval(it: int, p: ModelParams):
        if eval_clouds is None:
            return
        _, miou = iou(evaluate(p, eval_clouds, cfg, class_def, cache, (dkey, "eval")))
        result.eval_log.append((it, miou))
        log.info("iter %d target mIoU %.4f", it, miou)

    T = cfg.total_iters
    for it in range(T):
        if cfg.eval_every and it % cfg.eval_every == 0 and it > 0:
            do_eval(it, params)
        pick_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, 0]))
        s_idx = pick_rng.integers(len(src_clouds), size=cfg.batch_size)
        t_idx = pick_rng.integers(len(tgt_clouds), size=cfg.batch_size)
        xs, ys = _batch(sdom, s_idx, cfg, (cfg.seed, it, 1), ign, True, len(src_clouds), result.events)
        xt, _ = _batch(tdom, t_idx, cfg, (cfg.seed, it, 2), ign, False, len(tgt_clouds), result.events)

        ps = forward(params, xs)
        pt = forward(params, xt)
        jl = joint_loss(ps, ys, pt, hist, cfg.weights, ign, cfg.align_mode)
        if not math.isfinite(jl.value):
            raise NumericError(f"non-finite loss at iteration {it}: {jl.terms}")
        grads = backward(params, xs, ps, jl.src_grad)
        if use_target:
            grads = grads + backward(params, xt, pt, jl.tgt_grad)
        lr = lr_at(cfg, it)
        if cfg.momentum:
            velocity = grads if velocity is None else velocity.scale(cfg.momentum) + grads
            params = params.step(velocity, lr)
        else:
            params = params.step(grads, lr)
        t = jl.terms
        result.log.append((it, lr, t["seg"], t["align"], t["ent"], t["total"]))
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < T:
            save_checkpoint(params, out / "checkpoints" / f"ckpt_{it + 1:07d}.bin")

    result.params = params
    do_eval(T, params)
    for e in result.events:
        log.info(e)
    if out is not None:
        save_checkpoint(params, out / "checkpoints" / f"ckpt_{T:07d}.bin")
        write_train_log(result.log, out / "train_log.csv")
        if result.eval_log:
            _write_csv(out / "eval_log.csv", ("iter", "miou"), result.eval_log)
    return result


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header, rows) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e


def write_train_log(rows, path) -> None:
    _write_csv(Path(path), LOG_COLUMNS, rows)


# --------------------------------------------------------------------------
# ablation

STAGES = ("base", "xyz_shift", "per_class", "beams", "relative", "minent", "class_align")
STAGE_TITLES = {
    "base": "Base model",
    "xyz_shift": "+ XYZ-shift augmentation",
    "per_class": "+ Per-class augmentation",
    "beams": "+ Same number of beams",
    "relative": "+ Only relative features",
    "minent": "+ MinEnt",
    "class_align": "+ Class distribution alignment",
}


def stage_config(cfg: TrainConfig, stage: str) -> TrainConfig:
    """Cumulative configuration for ``stage``.

    ``cfg.weights`` supplies the lambdas switched on by the last two stages;
    ``cfg.target_chain`` is kept as is. Beam matching runs before the
    augmentations so the deterministic part of the chain can be cached.
    """
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES}")
    upto = STAGES[: STAGES.index(stage) + 1]
    chain = []
    if "beams" in upto:
        chain.append("match_beams")
    if "xyz_shift" in upto:
        chain.append("xyz_shift")
    if "per_class" in upto:
        chain.append("per_class_shift")
    extra = tuple(s for s in cfg.source_chain if s not in ("match_beams", "xyz_shift", "per_class_shift"))
    return replace(
        cfg,
        source_chain=extra + tuple(chain),
        feature_mode=RELATIVE if "relative" in upto else RELATIVE_ABSOLUTE,
        weights=LossWeights(
            lambda_ent=cfg.weights.lambda_ent if "minent" in upto else 0.0,
            lambda_align=cfg.weights.lambda_align if "class_align" in upto else 0.0,
        ),
    )


def run_ablation(src, tgt, eval_data, cfg: TrainConfig, stages: Sequence[str] = STAGES,
                 seeds: Sequence[int] = (0,), class_def: ClassDef | None = None, out_dir=None,
                 cache: dict | None = None) -> list[tuple[str, int, float]]:
    """Train one model per (cumulative stage, seed) and evaluate target mIoU.

    Stages must be a prefix-closed run of :data:`STAGES`. Returns rows of
    ``(stage, seed, miou)`` in stage-major order.
    """
    stages = tuple(stages)
    if not stages or stages != STAGES[: len(stages)]:
        raise ValidationError(f"stages must be a prefix of {STAGES}")
    src_c, cdef = _as_clouds(src, True)
    tgt_c, _ = _as_clouds(tgt, False)
    ev_c, _ = _as_clouds(eval_data, True)
    class_def = class_def or cdef
    cache = {} if cache is None else cache
    key = ("ablation", id(src_c))
    rows = []
    for stage in stages:
        for seed in seeds:
            scfg = replace(stage_config(cfg, stage), seed=seed, eval_every=0)
            sub = Path(out_dir) / f"{stage}_seed{seed}" if out_dir is not None else None
            res = train(src_c, tgt_c, scfg, class_def, None, sub, cache, key)
            _, miou = iou(evaluate(res.params, ev_c, scfg, class_def, cache, (key, "eval")))
            log.info("stage %s seed %d target mIoU %.4f", stage, seed, miou)
            rows.append((stage, seed, miou))
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_table(rows, path) -> None:
    by_stage: dict[str, list[float]] = {}
    for stage, _, m in rows:
        by_stage.setdefault(stage, []).append(m)
    table = [(s, STAGE_TITLES[s], seed, m) for s, seed, m in rows]
    table += [(s, STAGE_TITLES[s], "mean", float(np.mean(v))) for s, v in by_stage.items()]
    _write_csv(Path(path), ("stage", "title", "seed", "miou"), table)


def lambda_sweep(src, tgt, eval_data, cfg: TrainConfig, lambdas: Sequence[float] = (1e-5, 1e-3, 1e-2),
                 seeds: Sequence[int] = (0,), class_def: ClassDef | None = None, out_dir=None,
                 cache: dict | None = None) -> list[tuple[float, int, float]]:
    """Full-pipeline target mIoU with both loss weights set to each lambda.

    Returns rows ``(lambda, seed, miou)``; with ``out_dir`` also writes
    ``sweep.csv`` with per-lambda means and the max-min spread of the means.
    """
    if not lambdas:
        raise ValidationError("lambda sweep needs at least one value")
    if any(not lam >= 0 for lam in lambdas):
        raise ValidationError("lambdas must be >= 0")
    src_c, cdef = _as_clouds(src, True)
    tgt_c, _ = _as_clouds(tgt, False)
    ev_c, _ = _as_clouds(eval_data, True)
    class_def = class_def or cdef
    cache = {} if cache is None else cache
    key = ("ablation", id(src_c))
    full = stage_config(cfg, STAGES[-1])
    rows = []
    for lam in lambdas:
        for seed in seeds:
            scfg = replace(full, seed=seed, eval_every=0, weights=LossWeights(lambda_ent=lam, lambda_align=lam))
            sub = Path(out_dir) / f"lambda_{lam:g}_seed{seed}" if out_dir is not None else None
            res = train(src_c, tgt_c, scfg, class_def, None, sub, cache, key)
            _, miou = iou(evaluate(res.params, ev_c, scfg, class_def, cache, (key, "eval")))
            log.info("lambda %g seed %d target mIoU %.4f", lam, seed, miou)
            rows.append((lam, seed, miou))
    if out_dir is not None:
        means = {lam: float(np.mean([m for l_, _, m in rows if l_ == lam])) for lam in lambdas}
        table = list(rows) + [(lam, "mean", m) for lam, m in means.items()]
        table.append(("spread", "max-min", max(means.values()) - min(means.values())))
        _write_csv(Path(out_dir) / "sweep.csv", ("lambda", "seed", "miou"), table)
    return rows
