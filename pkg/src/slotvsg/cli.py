"""Command line: ``slotvsg {synth,train,eval,export,viz}``.

Outputs default to ``$SLOTVSG_OUT/<subcommand>`` when ``--out`` is omitted.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence, get_type_hints

from .config import ConfigError, load_config, dump_config

ENV_OUT = "SLOTVSG_OUT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- world config


def load_world_config(path: str | Path, overrides: Sequence[str] = ()):
    """``[world]`` holds :class:`WorldConfig` fields (sequences comma-separated);
    ``[splits]`` maps split names to video counts; ``base_seed`` in ``[splits]``
    is reserved for the first seed."""
    from .synthgen import WorldConfig

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"{path}: cannot read config file")
    values = {"world": dict(parser["world"]) if parser.has_section("world") else {},
              "splits": dict(parser["splits"]) if parser.has_section("splits") else {}}
    extra = set(parser.sections()) - set(values)
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in values:
            raise ConfigError(f"unknown config section {section!r}")
        values[section][name] = value
    hints = get_type_hints(WorldConfig)
    kwargs = {}
    for key, text in values["world"].items():
        if key not in hints:
            raise ConfigError(f"unknown config key world.{key}")
        kwargs[key] = _parse_world_value(key, text, hints[key])
    try:
        world = WorldConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    splits = {}
    base_seed = 0
    for key, text in values["splits"].items():
        try:
            n = int(text)
        except ValueError:
            raise ConfigError(f"splits.{key}: not an integer: {text!r}") from None
        if key == "base_seed":
            base_seed = n
        elif n < 0:
            raise ConfigError(f"splits.{key} must be >= 0")
        else:
            splits[key] = n
    if not splits:
        splits = {"train": 1}
    return world, splits, base_seed


def _parse_world_value(key: str, text: str, typ):
    text = text.strip()
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if key == "colors":
            nums = [int(p) for p in parts]
            if len(nums) % 3:
                raise ValueError("colors need r,g,b triples")
            return tuple(tuple(nums[i : i + 3]) for i in range(0, len(nums), 3))
        if key == "size_range":
            return tuple(int(p) for p in parts)
        if key == "velocity_range":
            return tuple(float(p) for p in parts)
        return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"world.{key}: {exc}") from None


# ---------------------------------------------------------------- commands


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(ENV_OUT)
    if not root:
        raise UsageError(f"--out is required (or set {ENV_OUT})")
    return Path(root) / name


def cmd_synth(args) -> int:
    from .core import validate_annotation
    from .dataset import write_dataset
    from .synthgen import generate_split

    if not args.config:
        raise UsageError("synth needs --config")
    world, splits, base_seed = load_world_config(args.config, args.override)
    out = _out_dir(args, "data")
    gens, seed = {}, base_seed
    for name, count in splits.items():
        videos = list(generate_split(world, count, seed, prefix=name))
        for _, ann in videos:
            problems = validate_annotation(ann)
            if problems:
                raise RuntimeError(f"{ann.video_id}: {problems[0]}")
        gens[name] = videos
        seed += count
    manifest = write_dataset(out, gens)
    print(json.dumps({"out": str(out), "splits": {k: len(v) for k, v in manifest["splits"].items()}}, sort_keys=True))
    return 0


def _train_config(args):
    cfg = load_config(args.config, args.override)
    if args.data:
        cfg.data.root = args.data
    if args.task:
        cfg.trainer.task = args.task
    cfg.validate()
    if not cfg.data.root:
        raise UsageError("no dataset: pass --data or set data.root")
    return cfg


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    ckpt, records = train(cfg, out_dir=out)
    last = records[-1] if records else {}
    print(json.dumps({"checkpoint": str(out / "final.pt"), "steps": ckpt.step, "last": last}, sort_keys=True))
    return 0


def _load_ckpt(args):
    from .trainer import load_checkpoint

    if not args.ckpt:
        raise UsageError(f"{args.command} needs --ckpt")
    ckpt = load_checkpoint(args.ckpt)
    if args.data:
        ckpt.config.data.root = args.data
    if not ckpt.config.data.root:
        raise UsageError("no dataset: pass --data")
    return ckpt


def _split(args, ckpt) -> str:
    return args.split or ckpt.config.data.eval_split


def cmd_eval(args) -> int:
    from .dataset import load_split
    from .trainer import evaluate

    ckpt = _load_ckpt(args)
    videos = load_split(ckpt.config.data.root, _split(args, ckpt))
    report = evaluate(ckpt, videos, task=args.task)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_export(args) -> int:
    from .dataset import load_split
    from .trainer import export_scene_graph, predict_video, video_features

    ckpt = _load_ckpt(args)
    out = _out_dir(args, "export")
    out.mkdir(parents=True, exist_ok=True)
    task = args.task or ckpt.config.trainer.task
    dtype = next(ckpt.model.parameters()).dtype
    for v in load_split(ckpt.config.data.root, _split(args, ckpt)):
        pred = predict_video(ckpt.model, v, task != "dsgg", ckpt.config.trainer.score_threshold,
                             video_features(ckpt.config, v, dtype))
        doc = export_scene_graph(pred, ckpt.meta)
        (out / f"{v.video_id}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"out": str(out)}))
    return 0


def cmd_viz(args) -> int:
    from .dataset import load_split, load_video
    from .viz import emit_figures

    ckpt = _load_ckpt(args)
    root = ckpt.config.data.root
    video = load_video(root, args.video) if args.video else load_split(root, _split(args, ckpt))[0]
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    frames = [int(f) for f in args.frames.split(",")] if args.frames else None
    written = emit_figures(ckpt, video, _out_dir(args, "viz"), kinds, frames)
    print(json.dumps({"written": len(written)}))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "export": cmd_export, "viz": cmd_viz}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slotvsg", description="Slot-based video scene graph toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
        if name != "synth":
            sp.add_argument("--data", help="dataset root")
            sp.add_argument("--task", choices=("dsgg", "pvsg", "joint"))
        if name in ("eval", "export", "viz"):
            sp.add_argument("--ckpt", help="checkpoint file")
            sp.add_argument("--split", help="dataset split (default data.eval_split)")
        if name == "viz":
            sp.add_argument("--video", help="video id (default: first of the split)")
            sp.add_argument("--kinds", default="attention,masks,graph,tube")
            sp.add_argument("--frames", help="comma-separated frame indices")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (" + ", ".join(COMMANDS) + ")")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(json.dumps({"error": "usage", "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # runtime failures become exit code 1
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
