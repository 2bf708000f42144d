"""Command-line entry point.

One binary with subcommands: gen-data, train, eval, infer, bench,
gradcheck. Every command takes --config (plain key=value file), --seed,
and --out; explicit flags override config-file values, and unknown
config keys are rejected. Run artifacts land in a per-run timestamped
directory (overridable with --run-name) together with the fully
resolved configuration.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# option name -> (type tag, default, help); type tags: int, float, str, bool
COMMON_OPTIONS = {
    "config": ("str", None, "key=value configuration file"),
    "seed": ("int", 0, "master random seed"),
    "out": ("str", "runs", "output directory"),
}

GEN_OPTIONS = {
    "train": ("int", 40, "number of training clips"),
    "test": ("int", 20, "number of test clips"),
    "size": ("int", 112, "frame side length in pixels"),
    "frames": ("int", 8, "frames per clip"),
    "classes": ("int", 6, "number of action classes"),
    "distractors": ("int", 1, "distractor sprites per clip"),
    "noise": ("float", 0.05, "additive uniform noise level"),
    "background": ("str", "gradient", "background kind: gradient or plain"),
    "amplitude": ("float", 12.0, "trajectory amplitude in pixels"),
    "jitter": ("float", 2.0, "stationary-jitter amplitude in pixels"),
    "sprite_min": ("float", 16.0, "smallest sprite side"),
    "sprite_max": ("float", 28.0, "largest sprite side"),
}

MODEL_OPTIONS = {
    "width_mult": ("float", 0.125, "channel width multiplier"),
    "depth": ("int", 50, "backbone depth: 34 or 50"),
    "crop_size": ("int", 4, "crop grid side"),
    "anchor_preset": ("str", "body", "anchor geometry preset: body or micro"),
    "improved": ("bool", False, "enable the box refinement block"),
    "fullframe_crop": ("bool", False, "ablation: crop the whole frame instead of proposals"),
}

TRAIN_OPTIONS = {
    **MODEL_OPTIONS,
    "data": ("str", None, "dataset manifest path"),
    "iters": ("int", 500, "training iterations"),
    "batch": ("int", 5, "clips per batch"),
    "lr": ("float", 0.01, "learning rate"),
    "momentum": ("float", 0.9, "SGD momentum"),
    "weight_decay": ("float", 1e-4, "weight decay"),
    "lambda1": ("float", 3.0, "proposal regression loss weight"),
    "lambda2": ("float", 1.0, "box refinement loss weight"),
    "log_every": ("int", 5, "iterations between log points"),
    "lr_decay_iter": ("int", None, "iteration of the single LR decay step"),
    "lr_decay_factor": ("float", 0.1, "LR decay multiplier"),
    "run_name": ("str", None, "run directory name (default: timestamped)"),
}

EVAL_OPTIONS = {
    **MODEL_OPTIONS,
    "data": ("str", None, "dataset manifest path"),
    "ckpt": ("str", None, "checkpoint path"),
    "split": ("str", "test", "dataset split: train, test, or all"),
    "iou": ("float", 0.5, "IoU threshold for a true positive"),
    "run_name": ("str", None, "run directory name"),
}

INFER_OPTIONS = {
    **MODEL_OPTIONS,
    "data": ("str", None, "dataset manifest path"),
    "ckpt": ("str", None, "checkpoint path"),
    "split": ("str", "test", "dataset split: train, test, or all"),
    "render": ("int", 1, "render overlay figures for the first N clips"),
    "run_name": ("str", None, "run directory name"),
}

BENCH_OPTIONS = {
    **MODEL_OPTIONS,
    "size": ("int", 112, "frame side length"),
    "frames": ("int", 8, "frames per clip"),
    "classes": ("int", 6, "number of action classes"),
    "batch": ("int", 1, "clips per forward pass"),
    "reps": ("int", 10, "timed repetitions"),
    "run_name": ("str", None, "run directory name"),
}

GRADCHECK_OPTIONS = {
    "bits": ("int", 32, "float precision of the check: 32 or 64"),
    "run_name": ("str", None, "run directory name"),
}

COMMANDS = {
    "gen-data": GEN_OPTIONS,
    "train": TRAIN_OPTIONS,
    "eval": EVAL_OPTIONS,
    "infer": INFER_OPTIONS,
    "bench": BENCH_OPTIONS,
    "gradcheck": GRADCHECK_OPTIONS,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="rmcaction",
                     description="Specific-target action recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, options in COMMANDS.items():
        p = sub.add_parser(cmd, conflict_handler="resolve")
        for name, (kind, _default, help_text) in {**COMMON_OPTIONS, **options}.items():
            flag = "--" + name.replace("_", "-")
            if kind == "bool":
                p.add_argument(flag, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
            else:
                typ = {"int": int, "float": float, "str": str}[kind]
                p.add_argument(flag, type=typ, default=None, help=help_text)
    return parser


def _parse_value(kind: str, raw: str, key: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lower = raw.strip().lower()
            if lower in ("true", "1", "yes"):
                return True
            if lower in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def load_config_file(path, schema: Dict[str, tuple]) -> Dict[str, object]:
    """Parse a key=value file, rejecting keys the command does not know."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in schema:
                raise UsageError(f"{path}:{lineno}: unknown configuration key {key!r}")
            values[key] = _parse_value(schema[key][0], raw.strip(), key)
    return values


def resolve_config(args: argparse.Namespace, command: str) -> Dict[str, object]:
    schema = {**COMMON_OPTIONS, **COMMANDS[command]}
    resolved = {k: default for k, (_kind, default, _help) in schema.items()}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        resolved.update(load_config_file(config_path, schema))
    for key in schema:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    resolved["config"] = config_path
    return resolved


def echo_config(cfg: Dict[str, object], directory) -> None:
    # the destination itself is not part of the resolved parameters: two
    # identically-parameterized runs must produce identical file trees
    skip = {"config", "out"}
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg) if cfg[k] is not None and k not in skip]
    with open(os.path.join(directory, "config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def make_run_dir(cfg: Dict[str, object], command: str) -> str:
    base = cfg["out"]
    name = cfg.get("run_name")
    if name is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        name = f"{command}-{stamp}"
        candidate = os.path.join(base, name)
        suffix = 1
        while os.path.exists(candidate):
            candidate = os.path.join(base, f"{name}-{suffix}")
            suffix += 1
    else:
        candidate = os.path.join(base, str(name))
    os.makedirs(candidate, exist_ok=True)
    return candidate


# ----------------------------------------------------------------------
# commands


def _clip_config(cfg) -> "ClipConfig":
    from .synthclips import ClipConfig

    if cfg["classes"] < 1:
        raise UsageError("--classes must be at least 1")
    if cfg["train"] < 1 or cfg["test"] < 1:
        raise UsageError("--train and --test must be at least 1")
    return ClipConfig(
        size=cfg["size"], clip_len=cfg["frames"], act_num=cfg["classes"],
        distractors=cfg["distractors"], noise_level=cfg["noise"],
        background=cfg["background"], amplitude=cfg["amplitude"],
        jitter=cfg["jitter"], sprite_min=cfg["sprite_min"],
        sprite_max=cfg["sprite_max"])


def cmd_gen_data(cfg) -> int:
    from .synthclips import make_dataset

    clip_cfg = _clip_config(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    manifest = make_dataset(cfg["seed"], cfg["train"], cfg["test"], clip_cfg, cfg["out"])
    echo_config(cfg, cfg["out"])
    print(f"wrote {cfg['train'] + cfg['test']} clips; manifest at {manifest}")
    return EXIT_OK


def _dataset_geometry(records):
    sizes = {(r.size, r.clip_len, r.act_num) for r in records}
    if len(sizes) != 1:
        raise ValueError(f"dataset mixes clip geometries: {sorted(sizes)}")
    return sizes.pop()


def _network_config(cfg, size: int, frames: int, act_num: int):
    from .network import NetworkConfig

    return NetworkConfig(
        input_size=size, clip_len=frames, width_multiplier=cfg["width_mult"],
        depth=cfg["depth"], act_num=act_num, crop_size=cfg["crop_size"],
        anchor_preset=cfg["anchor_preset"], improved=cfg["improved"],
        fullframe_crop=cfg["fullframe_crop"])


def _load_split(cfg, split_key="split"):
    from .synthclips import load_records

    if cfg["data"] is None:
        raise UsageError("--data is required")
    split = cfg.get(split_key, "train")
    records = load_records(cfg["data"], None if split == "all" else split)
    if not records:
        raise ValueError(f"no clips in split {split!r} of {cfg['data']}")
    return records


def cmd_train(cfg) -> int:
    from .checkpoint import save_checkpoint
    from .network import build_network
    from .plots import save_curves_figure
    from .train import TrainConfig, train, write_curves

    records = _load_split(cfg | {"split": "train"})
    size, frames, act_num = _dataset_geometry(records)
    net_cfg = _network_config(cfg, size, frames, act_num)
    model = build_network(net_cfg, seed=cfg["seed"])

    train_cfg = TrainConfig(
        lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], improved=cfg["improved"],
        lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        iterations=cfg["iters"], batch_clips=cfg["batch"], seed=cfg["seed"],
        anchor_preset=cfg["anchor_preset"], log_every=cfg["log_every"],
        lr_decay_iter=cfg["lr_decay_iter"], lr_decay_factor=cfg["lr_decay_factor"])

    run_dir = make_run_dir(cfg, "train")
    echo_config(cfg, run_dir)
    curves = train(model, records, train_cfg, log_fn=print)
    write_curves(os.path.join(run_dir, "curves.txt"), curves)
    save_curves_figure(curves, os.path.join(run_dir, "curves.png"))
    ckpt = os.path.join(run_dir, "model.rmcw")
    save_checkpoint(model, ckpt)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _restore_model(cfg, records):
    from .checkpoint import load_checkpoint
    from .network import build_network

    if cfg["ckpt"] is None:
        raise UsageError("--ckpt is required")
    size, frames, act_num = _dataset_geometry(records)
    net_cfg = _network_config(cfg, size, frames, act_num)
    model = build_network(net_cfg, seed=cfg["seed"])
    load_checkpoint(model, cfg["ckpt"])
    return model


def cmd_eval(cfg) -> int:
    from .evaluate import evaluate
    from .plots import save_pr_figure

    records = _load_split(cfg)
    model = _restore_model(cfg, records)
    report = evaluate(model, records, iou_threshold=cfg["iou"])
    run_dir = make_run_dir(cfg, "eval")
    echo_config(cfg, run_dir)
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    save_pr_figure(report.pr_points, report.ap, os.path.join(run_dir, "pr_curve.png"))
    print(report.to_text(), end="")
    print(f"report written to {run_dir}")
    return EXIT_OK


def cmd_infer(cfg) -> int:
    from .plots import save_detection_overlay
    from .rpn import write_proposals
    from .synthclips import PATTERN_NAMES
    from .tensor import Tensor

    records = _load_split(cfg)
    model = _restore_model(cfg, records)
    run_dir = make_run_dir(cfg, "infer")
    echo_config(cfg, run_dir)
    lines = []
    for i, rec in enumerate(records):
        out = model.forward_infer(Tensor(rec.frames[None]))
        name = PATTERN_NAMES[out.labels[0]] if out.labels[0] < len(PATTERN_NAMES) \
            else f"class_{out.labels[0]}"
        write_proposals(os.path.join(run_dir, f"clip_{rec.clip_id:04d}.proposals.txt"),
                        out.boxes, out.scores)
        lines.append(f"{rec.clip_id} {out.labels[0]} {name}")
        if i < cfg["render"]:
            save_detection_overlay(
                rec.frames, out.boxes, rec.boxes,
                os.path.join(run_dir, f"clip_{rec.clip_id:04d}.png"),
                title=f"clip {rec.clip_id}: predicted {name}")
    with open(os.path.join(run_dir, "predictions.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(records)} prediction(s) to {run_dir}")
    return EXIT_OK


def cmd_bench(cfg) -> int:
    from .evaluate import bench_fps
    from .network import build_network

    net_cfg = _network_config(cfg, cfg["size"], cfg["frames"], cfg["classes"])
    model = build_network(net_cfg, seed=cfg["seed"])
    shape = (cfg["batch"], 3, cfg["frames"], cfg["size"], cfg["size"])
    result = bench_fps(model, shape, repetitions=cfg["reps"], seed=cfg["seed"])
    run_dir = make_run_dir(cfg, "bench")
    echo_config(cfg, run_dir)
    text = "".join(f"{k}={v:.3f}\n" for k, v in result.items())
    with open(os.path.join(run_dir, "bench.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from .gradcheck import format_results, run_suite

    if cfg["bits"] not in (32, 64):
        raise UsageError("--bits must be 32 or 64")
    results = run_suite(cfg["bits"], seed=cfg["seed"])
    table = format_results(results)
    run_dir = make_run_dir(cfg, "gradcheck")
    echo_config(cfg, run_dir)
    with open(os.path.join(run_dir, "gradcheck.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    if any(not r.passed for r in results):
        return EXIT_NUMERIC
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .synthclips import ClipFormatError
    from .train import DivergenceError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args, args.command)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ClipFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
