"""Run configuration: one flat key/value schema shared by every subcommand.

Config files are INI-style ``key = value`` lines. Section headers such as
``[train]`` may be used for grouping but do not namespace keys; a key may
appear only once per file. A ``run.json`` written by the CLI is also
accepted, so any output directory can be replayed from its stored config.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .align import TRANSFORMS, AugmentConfig
from .errors import ConfigError, DataIOError
from .features import FEATURE_MODES
from .losses import LossWeights
from .synth import SENSOR_PRESETS, SceneSpec, sensor_preset
from .train import STAGES, TrainConfig

# --------------------------------------------------------------------------
# value types


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s: str) -> str:
    return s.strip()


def _items(s: str) -> list[str]:
    return [p.strip() for p in s.replace(",", " ").split() if p.strip()]


def _pair(s: str) -> tuple[float, float]:
    v = tuple(float(p) for p in _items(s))
    if len(v) != 2:
        raise ValueError(f"expected two numbers, got {s!r}")
    return v


def _int_pair(s: str) -> tuple[int, int]:
    v = tuple(int(p) for p in _items(s))
    if len(v) != 2:
        raise ValueError(f"expected two integers, got {s!r}")
    return v


def _names(s: str) -> tuple[str, ...]:
    return tuple(_items(s))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _items(s))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in _items(s))


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def p(s: str):
        return None if s.strip().lower() in ("", "none", "preset") else parse(s)
    return p


def _choice(*options: str) -> Callable[[str], str]:
    def p(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {options}")
        return v
    return p


def _subset(options) -> Callable[[str], tuple[str, ...]]:
    def p(s: str) -> tuple[str, ...]:
        v = _names(s)
        bad = [x for x in v if x not in options]
        if bad:
            raise ValueError(f"{bad} not in {tuple(options)}")
        return v
    return p


def format_value(v) -> str:
    """Canonical text form; parsing it gives back the same value."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


# --------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    group: str


def _scene_keys() -> list[Key]:
    out = []
    d = SceneSpec()
    for f in fields(SceneSpec):
        if f.name == "seed":
            continue
        v = getattr(d, f.name)
        parse = _bool if isinstance(v, bool) else _int if isinstance(v, int) else _pair if isinstance(v, tuple) else _float
        out.append(Key(f.name, parse, v, f"scene: {f.name.replace('_', ' ')}", "scene"))
    return out


_tc, _aug, _w = TrainConfig(), AugmentConfig(), LossWeights()
_SENSORS = tuple(sorted(SENSOR_PRESETS))

SCHEMA: dict[str, Key] = {k.name: k for k in [
    Key("seed", _int, 0, "global seed (scene seeds, init, sampling)", "run"),
    # data locations
    Key("source", _str, "", "labeled source dataset directory", "paths"),
    Key("target", _str, "", "unlabeled target dataset directory", "paths"),
    Key("eval", _str, "", "labeled target dataset used for evaluation", "paths"),
    Key("input", _str, "", "dataset directory read by align and render", "paths"),
    Key("checkpoint", _str, "", "checkpoint file read by eval", "paths"),
    # synthetic data
    Key("n_scans", _int, 16, "training scans per domain", "synth"),
    Key("n_eval_scans", _int, 8, "held-out target scans (0 to skip)", "synth"),
    Key("eval_seed_offset", _int, 1000, "scene seed offset of the held-out scans", "synth"),
    *_scene_keys(),
    Key("source_sensor", _choice(*_SENSORS), _tc.source_sensor, "source sensor preset", "sensor"),
    Key("target_sensor", _choice(*_SENSORS), _tc.target_sensor, "target sensor preset", "sensor"),
    Key("horizontal_steps", _optional(_int), None, "azimuth steps per revolution (empty: preset)", "sensor"),
    Key("sensor_max_range", _optional(_float), None, "sensor max range in m (empty: preset)", "sensor"),
    Key("range_noise", _float, 0.0, "Gaussian range noise sigma in m", "sensor"),
    # training
    Key("total_iters", _int, _tc.total_iters, "iterations T", "train"),
    Key("batch_size", _int, _tc.batch_size, "scans per domain per iteration", "train"),
    Key("lr0", _float, _tc.lr0, "initial learning rate", "train"),
    Key("poly_power", _float, _tc.poly_power, "polynomial decay power", "train"),
    Key("momentum", _float, _tc.momentum, "SGD momentum", "train"),
    Key("lambda_ent", _float, _w.lambda_ent, "entropy loss weight", "train"),
    Key("lambda_align", _float, _w.lambda_align, "class-distribution loss weight", "train"),
    Key("align_mode", _choice("batch", "per_point"), _tc.align_mode, "class-distribution loss form", "train"),
    Key("global_shift_xy", _float, _aug.global_shift_xy, "xyz_shift half-width in x and y", "train"),
    Key("global_shift_z", _float, _aug.global_shift_z, "xyz_shift half-width in z", "train"),
    Key("per_class_shift_xy", _float, _aug.per_class_shift_xy, "per_class_shift half-width in x and y", "train"),
    Key("per_class_shift_z", _float, _aug.per_class_shift_z, "per_class_shift half-width in z", "train"),
    Key("source_chain", _subset(TRANSFORMS), _tc.source_chain, "transforms applied to source scans", "train"),
    Key("target_chain", _subset(TRANSFORMS), _tc.target_chain, "transforms applied to target scans", "train"),
    Key("beam_mode", _choice("even", "stride"), _tc.beam_mode, "beam selection rule", "train"),
    Key("fov_max_range", _float, _tc.fov_max_range, "fov_crop max range", "train"),
    Key("fov_azimuth", _pair, _tc.fov_azimuth, "fov_crop azimuth window (deg)", "train"),
    Key("fov_elevation", _pair, _tc.fov_elevation, "fov_crop elevation window (deg)", "train"),
    Key("feature_mode", _choice(*FEATURE_MODES), _tc.feature_mode, "point features", "train"),
    Key("k", _int, _tc.k, "neighbours per point", "train"),
    Key("hidden", _int_pair, _tc.hidden, "hidden layer widths", "train"),
    Key("points_per_scan", _int, _tc.points_per_scan, "query points sampled per scan (0: all)", "train"),
    Key("eval_every", _int, _tc.eval_every, "evaluate every N iterations (0: only at the end)", "train"),
    Key("checkpoint_every", _int, _tc.checkpoint_every, "checkpoint every N iterations (0: only at the end)", "train"),
    # offline transforms
    Key("chain", _subset(TRANSFORMS), (), "transforms applied by the align command", "align"),
    Key("domain", _choice("source", "target"), "target", "sensor settings used by the align command", "align"),
    # ablation and sweep
    Key("stages", _subset(STAGES), STAGES, "ablation stages (a prefix of the full list)", "ablate"),
    Key("seeds", _ints, (), "ablation seeds (empty: the run seed)", "ablate"),
    Key("lambdas", _floats, (1e-5, 1e-3, 1e-2), "values used for both weights by the sweep", "sweep"),
    # rendering
    Key("render_width", _int, 360, "image width in pixels (azimuth bins)", "render"),
    Key("render_height", _optional(_int), None, "image height (empty: beam count)", "render"),
    Key("render_max_range", _optional(_float), None, "range mapped to white (empty: sensor max range)", "render"),
    Key("render_sensor", _optional(_choice(*_SENSORS)), None, "sensor for beam rows (empty: by dataset role)", "render"),
]}


# --------------------------------------------------------------------------
# loading


class RunConfig(dict):
    """Resolved configuration: every schema key mapped to a parsed value."""

    def to_strings(self) -> dict[str, str]:
        return {k: format_value(self[k]) for k in SCHEMA}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key].parse(str(text))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from None


def read_config_file(path) -> dict[str, str]:
    """Raw ``key -> text`` pairs from an INI-style file or a ``run.json``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e
    if path.suffix == ".json":
        try:
            data = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"{path}: not a run manifest ({e})") from None
        return {str(k): str(v) for k, v in data.items()}
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__defaults__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    # keys before the first header belong to an implicit section
    text = "[__top__]\n" + text
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in out:
                raise ConfigError(f"{path}: key {key!r} set twice")
            out[key] = value
    return out


def resolve(*layers: Mapping[str, Any]) -> RunConfig:
    """Defaults overlaid with each layer in order; text values are parsed
    and every key is checked against the schema before anything runs."""
    cfg = RunConfig({k: v.default for k, v in SCHEMA.items()})
    for layer in layers:
        for key, value in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = parse_value(key, value) if isinstance(value, str) else value
    return cfg


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    return resolve(read_config_file(path) if path is not None else {}, overrides or {})


def preset_path(name: str) -> Path:
    """Path of a bundled preset, e.g. ``desk``."""
    p = resources.files("lidar_uda") / "presets" / f"{name}.cfg"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(p))


# --------------------------------------------------------------------------
# builders


def scene_spec(cfg: Mapping[str, Any], seed: int | None = None) -> SceneSpec:
    kw = {f.name: cfg[f.name] for f in fields(SceneSpec) if f.name != "seed"}
    return SceneSpec(seed=cfg["seed"] if seed is None else seed, **kw)


def sensor(cfg: Mapping[str, Any], name: str):
    over = {"range_noise": cfg["range_noise"]}
    if cfg["horizontal_steps"] is not None:
        over["horizontal_steps"] = cfg["horizontal_steps"]
    if cfg["sensor_max_range"] is not None:
        over["max_range"] = cfg["sensor_max_range"]
    return sensor_preset(name, **over)


def train_config(cfg: Mapping[str, Any], seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        total_iters=cfg["total_iters"],
        batch_size=cfg["batch_size"],
        lr0=cfg["lr0"],
        poly_power=cfg["poly_power"],
        momentum=cfg["momentum"],
        weights=LossWeights(lambda_ent=cfg["lambda_ent"], lambda_align=cfg["lambda_align"]),
        augment=AugmentConfig(cfg["global_shift_xy"], cfg["global_shift_z"], cfg["per_class_shift_xy"],
                              cfg["per_class_shift_z"], cfg["seed"] if seed is None else seed),
        source_chain=cfg["source_chain"],
        target_chain=cfg["target_chain"],
        source_sensor=cfg["source_sensor"],
        target_sensor=cfg["target_sensor"],
        beam_mode=cfg["beam_mode"],
        fov_max_range=cfg["fov_max_range"],
        fov_azimuth=cfg["fov_azimuth"],
        fov_elevation=cfg["fov_elevation"],
        feature_mode=cfg["feature_mode"],
        k=cfg["k"],
        hidden=cfg["hidden"],
        points_per_scan=cfg["points_per_scan"],
        align_mode=cfg["align_mode"],
        seed=cfg["seed"] if seed is None else seed,
        eval_every=cfg["eval_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )
