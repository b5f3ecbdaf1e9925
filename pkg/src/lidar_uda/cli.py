"""``lidar-uda`` command line.

Every subcommand takes ``--config``/``--preset``, ``--out`` and ``--seed``
plus one ``--<key>`` override flag per configuration key, and writes
``run.json`` (resolved config, seed, version) into its output directory.
Exit codes: 0 ok, 1 validation/config error, 2 runtime/numeric error,
3 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .cloud import LabeledCloud, load_manifest, read_scan_bin, write_dataset
from .errors import DataIOError, LidarUDAError, ValidationError
from .features import feature_dim
from .metrics import write_report
from .model import load_checkpoint
from .render import label_image, range_image, write_pnm
from .synth import SYNTH_CLASSES, domain_pair, domain_pair_clouds
from .train import evaluate, lambda_sweep, run_ablation, train

log = logging.getLogger("lidar_uda")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _need(cfg, *keys):
    for k in keys:
        if not cfg[k]:
            raise ValidationError(f"missing required setting {k!r} (use --{k} or the config file)")


def _manifest(path, labeled=False):
    man = load_manifest(path)
    if labeled and not man.labeled:
        raise ValidationError(f"{path}: dataset has no labels")
    return man


def _seeds(cfg):
    return cfg["seeds"] or (cfg["seed"],)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, out: Path) -> int:
    """Source, target and target_eval sets, plus held-out target scenes in target_test."""
    src, tgt = C.sensor(cfg, cfg["source_sensor"]), C.sensor(cfg, cfg["target_sensor"])
    s_man, t_man = domain_pair(C.scene_spec(cfg), src, tgt, cfg["n_scans"], out)
    log.info("wrote %d source and %d target scans", len(s_man), len(t_man))
    if cfg["n_eval_scans"]:
        spec = C.scene_spec(cfg, cfg["seed"] + cfg["eval_seed_offset"])
        _, held = domain_pair_clouds(spec, src, tgt, cfg["n_eval_scans"])
        write_dataset(out / "target_test", held, SYNTH_CLASSES, "target")
        log.info("wrote %d held-out target scans", len(held))
    return EXIT_OK


def cmd_align(cfg, out: Path) -> int:
    """Apply ``chain`` to every scan of ``input``; scan i uses rng (seed, i)."""
    _need(cfg, "input", "chain")
    man = _manifest(cfg["input"])
    tc = C.train_config(cfg)
    chain = replace(tc.chain(cfg["domain"], man.class_def.ignore_index), steps=cfg["chain"])
    clouds = []
    for i in range(len(man)):
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], i]))
        clouds.append(chain(man.load(i), rng, train=True))
    write_dataset(out, clouds, man.class_def, man.role, with_labels=man.labeled)
    log.info("transformed %d scans with %s", len(clouds), ", ".join(cfg["chain"]))
    return EXIT_OK


def cmd_train(cfg, out: Path) -> int:
    _need(cfg, "source", "target")
    src, tgt = _manifest(cfg["source"], True), _manifest(cfg["target"])
    ev = _manifest(cfg["eval"], True) if cfg["eval"] else None
    res = train(src, tgt, C.train_config(cfg), src.class_def, ev, out)
    if res.eval_log:
        print(f"final target mIoU {res.eval_log[-1][1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg, out: Path) -> int:
    _need(cfg, "checkpoint", "eval")
    man = _manifest(cfg["eval"], True)
    tc = C.train_config(cfg)
    params = load_checkpoint(cfg["checkpoint"], feature_dim(tc.k, tc.feature_mode), man.class_def.class_count)
    cm = evaluate(params, man.load_all(), tc, man.class_def)
    miou = write_report(cm, man.class_def.names, out / "metrics.csv")
    print(f"mIoU {miou:.4f}")
    return EXIT_OK


def _table(rows, head):
    print(head)
    for r in rows:
        print("  ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


def cmd_ablate(cfg, out: Path) -> int:
    _need(cfg, "source", "target", "eval")
    src, tgt, ev = _manifest(cfg["source"], True), _manifest(cfg["target"]), _manifest(cfg["eval"], True)
    rows = run_ablation(src, tgt, ev, C.train_config(cfg), cfg["stages"], _seeds(cfg), src.class_def, out)
    _table(rows, "stage  seed  miou")
    return EXIT_OK


def cmd_sweep(cfg, out: Path) -> int:
    _need(cfg, "source", "target", "eval")
    src, tgt, ev = _manifest(cfg["source"], True), _manifest(cfg["target"]), _manifest(cfg["eval"], True)
    rows = lambda_sweep(src, tgt, ev, C.train_config(cfg), cfg["lambdas"], _seeds(cfg), src.class_def, out)
    _table(rows, "lambda  seed  miou")
    return EXIT_OK


def _render_one(cloud: LabeledCloud, sensor, cfg, ignore_index, out: Path, stem: str) -> None:
    h = cfg["render_height"] or sensor.beam_count
    mr = cfg["render_max_range"] or sensor.max_range
    write_pnm(range_image(cloud, sensor, cfg["render_width"], h, mr), out / f"{stem}_range.pgm")
    write_pnm(label_image(cloud, sensor, cfg["render_width"], h, ignore_index), out / f"{stem}_label.ppm")


def cmd_render(cfg, out: Path) -> int:
    """Range and label images per scan. A scan that fails is reported and
    skipped; the exit code is then 3."""
    _need(cfg, "input")
    inp = Path(cfg["input"])
    if inp.is_file():
        name = cfg["render_sensor"] or cfg["source_sensor"]
        jobs, ignore = [(inp.stem, lambda: read_scan_bin(inp))], None
    else:
        man = _manifest(inp)
        ignore = man.class_def.ignore_index
        name = cfg["render_sensor"] or cfg[f"{man.role}_sensor"]
        jobs = [(Path(p).stem, lambda i=i: man.load(i)) for i, p in enumerate(man.scan_paths)]
    sensor = C.sensor(cfg, name)
    failed = 0
    for stem, load in jobs:
        try:
            _render_one(load(), sensor, cfg, ignore, out, stem)
        except LidarUDAError as e:
            failed += 1
            print(f"error: {stem}: {e}", file=sys.stderr)
    log.info("rendered %d of %d scans", len(jobs) - failed, len(jobs))
    return EXIT_IO if failed else EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic source/target dataset pair"),
    "align": (cmd_align, "apply a transform chain to a dataset offline"),
    "train": (cmd_train, "train on labeled source and unlabeled target scans"),
    "eval": (cmd_eval, "evaluate a checkpoint on a labeled dataset"),
    "ablate": (cmd_ablate, "run the cumulative ablation and write ablation.csv"),
    "sweep": (cmd_sweep, "full pipeline across loss weights and write sweep.csv"),
    "render": (cmd_render, "draw range and label images of scans"),
}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lidar-uda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=(fn.__doc__ or help_).strip())
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="key = value config file, or a run.json to replay")
        src.add_argument("--preset", help="bundled config, e.g. desk")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--quiet", action="store_true", help="only print errors")
        keys = p.add_argument_group("configuration keys")
        for key in C.SCHEMA.values():
            if key.name == "seed":
                continue
            flags = [f"--{key.name}"]
            if "_" in key.name:
                flags.append(f"--{key.name.replace('_', '-')}")
            keys.add_argument(*flags, dest=f"key_{key.name}", metavar="V",
                              help=f"{key.help} [{C.format_value(key.default) or 'unset'}]")
    return parser


def _exit_code(e: BaseException) -> int:
    if isinstance(e, LidarUDAError):
        return e.exit_code
    if isinstance(e, OSError):
        return EXIT_IO
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        path = args.config or (C.preset_path(args.preset) if args.preset else None)
        cfg = C.load_config(path, overrides)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            manifest = {"command": args.command, "version": __version__, "seed": cfg["seed"],
                        "config": cfg.to_strings()}
            (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(out, e.strerror or str(e)) from e
        return COMMANDS[args.command][0](cfg, out)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - every failure maps to an exit code
        print(f"error: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
