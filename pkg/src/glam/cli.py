"""Command-line driver: one subcommand per pipeline step.

Every run writes ``run.json`` into ``--out`` with the resolved config, the
seed and SHA-256 digests of its inputs. Failures print a single JSON line
``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from glam.config import PRESETS, GlamConfig, load_config
from glam.global_net import ConfigError
from glam.io import (load_checkpoint, load_dataset, read_pgm, read_saliency, save_checkpoint,
                     write_dataset, write_pgm, write_saliency)
from glam.maps import CLASSES
from glam.metrics import auc, segmentation_report
from glam.model import GLAM
from glam.patches import extract_patches
from glam.synthdata import Example, generate
from glam import training

log = logging.getLogger("glam")

MAP_NAMES = ("sg", "sl", "sc", "s0", "s1", "s2")
EMIT_CHOICES = MAP_NAMES + ("patches", "preds")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _resolve_config(args) -> GlamConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if args.seed is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, seed=args.seed),
                          synth=dataclasses.replace(cfg.synth, seed=args.seed))
    return cfg.validate()


def _write_run_manifest(out: Path, args, cfg: GlamConfig, inputs: list) -> None:
    digests = {}
    for p in inputs:
        p = Path(p)
        if p.is_file():
            digests[str(p)] = _sha256(p)
    record = {"command": args.command, "config": cfg.to_json(), "config_digest": cfg.digest(),
              "seed": cfg.train.seed, "inputs": digests}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def _load_splits(manifest, cfg: GlamConfig) -> dict:
    splits = load_dataset(manifest)
    for examples in splits.values():
        for ex in examples:
            if ex.pixels.shape != cfg.image_dims:
                raise ConfigError(f"image {ex.id} is {ex.pixels.shape[0]}x{ex.pixels.shape[1]}, "
                                  f"config expects {cfg.image_dims[0]}x{cfg.image_dims[1]}")
    return splits


def _load_model(cfg: GlamConfig, args) -> GLAM:
    """Model with weights from a joint checkpoint, or from global + local checkpoints."""
    model = GLAM(cfg)
    digest = cfg.digest()
    if getattr(args, "checkpoint", None):
        load_checkpoint(args.checkpoint, model.registry("stage4"), digest)
        model.completed |= {"stage1", "stage3", "stage4"}
        model.use_attention = True
        return model
    if getattr(args, "global_ckpt", None):
        load_checkpoint(args.global_ckpt, model.registry("stage1"), digest)
        model.completed.add("stage1")
    if getattr(args, "local_ckpt", None):
        load_checkpoint(args.local_ckpt, model.registry("stage3"), digest)
        model.completed.add("stage3")
    return model


def _require(model: GLAM, stages: set, what: str) -> None:
    missing = stages - model.completed
    if missing:
        flags = {"stage1": "--global", "stage3": "--local", "stage4": "--checkpoint"}
        raise training.StageError(
            f"{what} needs {' and '.join(flags[s] for s in sorted(missing))} checkpoint(s)")


# ------------------------------------------------------------------ subcommands

def cmd_gen_data(args, cfg: GlamConfig, out: Path) -> list:
    splits = generate(cfg.synth)
    write_dataset(splits, out)
    return []


def cmd_train_global(args, cfg, out):
    splits = _load_splits(args.data, cfg)
    torch.manual_seed(cfg.train.seed)
    model = GLAM(cfg)
    training.train_global(model, splits, training.MetricsLog(out / "metrics.jsonl"))
    save_checkpoint(out / "global.ckpt", model.registry("stage1"), "stage1", cfg.digest())
    return [args.data]


def cmd_build_patches(args, cfg, out):
    splits = _load_splits(args.data, cfg)
    model = _load_model(cfg, args)
    _require(model, {"stage1"}, "build-patches")
    bags = training.build_local_training_set(model, splits["train"], cfg.train.K,
                                             cfg.train.negative_sampling,
                                             np.random.default_rng([cfg.train.seed, 2]))
    training.save_patch_set(out / "patches.jsonl", bags)
    return [args.data, args.global_ckpt]


def cmd_train_local(args, cfg, out):
    splits = _load_splits(args.data, cfg)
    torch.manual_seed(cfg.train.seed)
    model = _load_model(cfg, argparse.Namespace(global_ckpt=args.global_ckpt))
    _require(model, {"stage1"}, "train-local")
    bags = training.load_patch_set(args.patches)
    training.train_local(model, splits, bags, training.MetricsLog(out / "metrics.jsonl"))
    save_checkpoint(out / "local.ckpt", model.registry("stage3"), "stage3", cfg.digest())
    return [args.data, args.global_ckpt, args.patches]


def cmd_train_joint(args, cfg, out):
    splits = _load_splits(args.data, cfg)
    torch.manual_seed(cfg.train.seed)
    model = _load_model(cfg, args)
    _require(model, {"stage1", "stage3"}, "train-joint")
    training.train_joint(model, splits, training.MetricsLog(out / "metrics.jsonl"))
    save_checkpoint(out / "joint.ckpt", model.registry("stage4"), "stage4", cfg.digest())
    return [args.data, args.global_ckpt, args.local_ckpt]


def _parse_emit(text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in EMIT_CHOICES]
    if bad:
        raise UsageError(f"unknown --emit item(s) {', '.join(bad)}; choose from {', '.join(EMIT_CHOICES)}")
    return items


def _inference_inputs(args, cfg) -> list:
    if args.images:
        examples = []
        for path in args.images:
            pixels, maxval = read_pgm(path)
            if maxval != 255:
                pixels = np.floor(pixels / maxval * 255 + 0.5).astype(np.uint8)
            if pixels.shape != cfg.image_dims:
                raise ConfigError(f"{path} is {pixels.shape[0]}x{pixels.shape[1]}, "
                                  f"config expects {cfg.image_dims[0]}x{cfg.image_dims[1]}")
            examples.append(Example(Path(path).stem, pixels, (0, 0), (None, None)))
        return examples
    if args.data:
        return _load_splits(args.data, cfg)[args.split]
    raise UsageError("infer needs --images or --data")


@torch.no_grad()
def cmd_infer(args, cfg, out):
    if args.M < 1:
        raise UsageError(f"--M must be >= 1, got {args.M}")
    emit = _parse_emit(args.emit)
    model = _load_model(cfg, args)
    _require(model, {"stage1", "stage3"}, "infer")
    model.eval()
    gamma_c = cfg.gamma_c if args.gamma_c is None else args.gamma_c
    for ex in _inference_inputs(args, cfg):
        image = torch.from_numpy(ex.image)
        result = model.infer(image, M=args.M, gamma_c=gamma_c)
        maps = {"sg": result.sg, "sl": result.sl, "sc": result.sc,
                "s0": result.glob.saliency("s0"), "s1": result.glob.saliency("s1"),
                "s2": result.glob.saliency("s2")}
        for name in emit:
            if name in maps:
                values = maps[name].numpy()
                for ci, cls in enumerate(CLASSES):
                    write_saliency(out / f"{ex.id}_{name}_{cls}.pgm", values[ci])
        if "patches" in emit:
            for k, crop in enumerate(extract_patches(ex.pixels, result.local.locations)):
                write_pgm(out / f"{ex.id}_patch{k}.pgm", np.ascontiguousarray(crop), 255)
        record = {"id": ex.id, **result.to_record()}
        (out / f"{ex.id}.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return list(args.images or []) + [args.data, args.checkpoint, args.global_ckpt, args.local_ckpt]


def _parse_floats(text: str) -> list:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_eval(args, cfg, out):
    examples = _load_splits(args.data, cfg)[args.split]
    map_names = [s.strip() for s in args.map.split(",") if s.strip()]
    bad = [m for m in map_names if m not in MAP_NAMES]
    if bad:
        raise UsageError(f"unknown --map item(s) {', '.join(bad)}")
    masks = [ex.mask_array() for ex in examples]
    if not any(m is not None for m in masks):
        raise ValueError(f"split {args.split!r} has no lesion masks to evaluate against")
    sweep = _parse_floats(args.gamma_c) if args.gamma_c else [cfg.gamma_c]
    for g in sweep:
        if not 0.0 <= g <= 1.0:
            raise UsageError(f"gamma_c {g} outside [0, 1]")
    report = {"split": args.split, "n_images": len(examples),
              "n_with_masks": sum(m is not None for m in masks), "auc": None, "rows": []}

    def add_rows(name, maps, gamma_c=None):
        row = {"map": name, "gamma_c": gamma_c}
        row.update(segmentation_report(maps, masks))
        report["rows"].append(row)

    if args.maps_dir:
        root = Path(args.maps_dir)
        for name in map_names:
            maps = []
            for ex in examples:
                maps.append(np.stack([read_saliency(root / f"{ex.id}_{name}_{cls}.pgm")
                                      for cls in CLASSES]))
            add_rows(name, maps)
        inputs = [args.data]
    else:
        inputs = _eval_model(args, cfg, examples, map_names, sweep, report, add_rows)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return inputs


def _eval_model(args, cfg, examples, map_names, sweep, report, add_rows) -> list:
    model = _load_model(cfg, args)
    needs = {"stage1", "stage3"} if {"sl", "sc"} & set(map_names) else {"stage1"}
    _require(model, needs, "eval")
    first = training.predict(model, examples, [m for m in map_names if m != "sc"] or ["sg"])
    scores = np.stack([p.y_hat_g for p in first])
    labels = np.array([ex.labels for ex in examples])
    report["auc"] = {cls: auc(scores[:, c], labels[:, c]) for c, cls in enumerate(CLASSES)}
    for name in map_names:
        if name == "sc":
            for g in sweep:
                preds = training.predict(model, examples, ("sc",), gamma_c=g)
                add_rows("sc", [p.maps["sc"] for p in preds], g)
        else:
            add_rows(name, [p.maps[name] for p in first])
    return [args.data, args.checkpoint, args.global_ckpt, args.local_ckpt]


def cmd_search(args, cfg, out):
    space = training.SearchSpace(n_trials=args.n_trials)
    trials = training.random_search(space, np.random.default_rng(cfg.train.seed))
    lines = []
    for i, trial in enumerate(trials):
        trial_cfg = trial.apply(cfg).validate()
        path = out / f"trial_{i:03d}.json"
        path.write_text(trial_cfg.dumps(), encoding="utf-8")
        lines.append(json.dumps({"trial": i, **trial.to_json(), "config": path.name}))
    (out / "trials.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return []


COMMANDS = {
    "gen-data": cmd_gen_data, "train-global": cmd_train_global,
    "build-patches": cmd_build_patches, "train-local": cmd_train_local,
    "train-joint": cmd_train_joint, "infer": cmd_infer, "eval": cmd_eval, "search": cmd_search,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="built-in config used when --config is absent")
    common.add_argument("--seed", type=int, help="overrides the training and data seeds")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="glam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train-global", parents=[common], help="stage 1")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p = sub.add_parser("build-patches", parents=[common], help="stage 2")
    p.add_argument("--data", required=True)
    p.add_argument("--global", dest="global_ckpt", required=True)
    p = sub.add_parser("train-local", parents=[common], help="stage 3")
    p.add_argument("--data", required=True)
    p.add_argument("--global", dest="global_ckpt", required=True)
    p.add_argument("--patches", required=True)
    p = sub.add_parser("train-joint", parents=[common], help="stage 4")
    p.add_argument("--data", required=True)
    p.add_argument("--global", dest="global_ckpt", required=True)
    p.add_argument("--local", dest="local_ckpt", required=True)

    for name, help_ in (("infer", "saliency maps and predictions"), ("eval", "metrics report")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", help="joint (stage 4) checkpoint")
        p.add_argument("--global", dest="global_ckpt")
        p.add_argument("--local", dest="local_ckpt")
        p.add_argument("--data", help="manifest.jsonl")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--gamma-c", dest="gamma_c",
                       type=float if name == "infer" else str, default=None)
    p = sub.choices["infer"]
    p.add_argument("--images", nargs="+", help="PGM images")
    p.add_argument("--M", type=int, default=1, help="patches per image")
    p.add_argument("--emit", default="sc", help=f"comma list of {', '.join(EMIT_CHOICES)}")
    p = sub.choices["eval"]
    p.add_argument("--map", default="sg,sl,sc", help="comma list of maps to score")
    p.add_argument("--maps-dir", help="score saved 16-bit PGM maps instead of a model")

    p = sub.add_parser("search", parents=[common], help="sample hyperparameter trials")
    p.add_argument("--n-trials", type=int, default=30)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        torch.set_num_threads(int(os.environ.get("GLAM_THREADS", "1")))
        cfg = _resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, cfg, out)
        _write_run_manifest(out, args, cfg, [p for p in inputs if p])
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(err) + "\n")
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
