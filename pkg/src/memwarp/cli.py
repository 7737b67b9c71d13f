"""Command-line interface: synth, train, register, evaluate, segment.

Configuration comes from an optional YAML file plus ``--set key=value``
overrides (dotted keys reach into nested sections; values are parsed as
YAML). The ``MEMWARP_SEED`` environment variable overrides the configured
seed everywhere. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import io as volio
from .data import PhantomSpec, load_split_pairs, preprocess, read_manifest, synth_dataset
from .errors import ConfigError, ContractError, DataError, MemWarpError, UnsupportedModeError
from .fieldops import warp
from .memory import segmentation_from_address
from .metrics import evaluate_pair, write_report_csv, write_report_json
from .training import TrainConfig, load_checkpoint, predict_field, train

log = logging.getLogger("memwarp")


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed YAML in {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return data


def _apply_sets(config: dict, assignments) -> dict:
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse value in {item!r}: {err}") from err
        node = config
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {part} is not a section")
        node[parts[-1]] = value
    return config


def _seed_override(config: dict) -> dict:
    env = os.environ.get("MEMWARP_SEED")
    if env is not None:
        try:
            config["seed"] = int(env)
        except ValueError as err:
            raise ConfigError(f"MEMWARP_SEED must be an integer, got {env!r}") from err
    return config


def cmd_synth(args) -> int:
    cfg = _seed_override(_apply_sets(_load_yaml(args.spec), args.set))
    spec = PhantomSpec.from_dict(cfg)
    manifest = synth_dataset(spec, args.out)
    splits = {k: len(v) for k, v in manifest["splits"].items()}
    log.info("wrote %d subjects to %s (splits: %s)", spec.subjects, args.out, splits)
    return 0


def cmd_train(args) -> int:
    cfg = _seed_override(_apply_sets(_load_yaml(args.config), args.set))
    config = TrainConfig.from_dict(cfg)
    result = train(config, args.data, args.out)
    log.info(
        "best validation score %.4f at step %d; checkpoint %s",
        result.best_score, result.best_step, result.checkpoint_path,
    )
    return 0


def _load_conformed_image(path, meta):
    vol = volio.read_volume(path)
    if not hasattr(vol, "data") or vol.data.dtype.kind not in "fc":
        raise DataError(f"{path} is not a scalar intensity volume")
    shape = tuple(meta.get("shape", vol.data.shape))
    spacing = tuple(meta.get("spacing", vol.spacing))
    if vol.data.shape != shape or tuple(vol.spacing) != spacing:
        log.info("preprocessing %s to %s @ %s", path, shape, spacing)
        return preprocess(vol, spacing, shape)
    if vol.data.min() < 0 or vol.data.max() > 1:
        return preprocess(vol, spacing, shape)
    return vol


def cmd_register(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    moving = _load_conformed_image(args.moving, ckpt.meta)
    fixed = _load_conformed_image(args.fixed, ckpt.meta)
    if moving.data.shape != fixed.data.shape:
        raise DataError("moving and fixed volumes have different shapes after preprocessing")

    disp = predict_field(ckpt.model, moving, fixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volio.write_field(disp, out / "disp.nii.gz")
    warped = warp(moving, disp, interp="trilinear")
    volio.write_volume(warped, out / "warped_img.nii.gz")

    if args.moving_seg:
        n_classes = ckpt.meta.get("num_classes")
        seg = volio.read_volume(args.moving_seg, num_classes=n_classes)
        if seg.data.shape != moving.data.shape:
            raise DataError("moving segmentation does not match the image grid")
        warped_seg = warp(seg, disp, interp="nearest")
        volio.write_volume(warped_seg, out / "warped_seg.nii.gz")
    log.info("registered %s -> %s; outputs in %s", args.moving, args.fixed, out)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    pairs = load_split_pairs(args.data, args.split, with_masks=True)
    if not pairs:
        raise DataError(f"split {args.split!r} is empty")
    reports = []
    for pair in pairs:
        disp = predict_field(ckpt.model, pair.moving_image, pair.fixed_image)
        reports.append(
            evaluate_pair(pair.fixed_seg, pair.moving_seg, disp, pair_id=pair.pair_id)
        )
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    n = manifest["num_classes"]
    write_report_csv(reports, out_csv, num_classes=n)
    write_report_json(
        reports, out_csv.with_suffix(".json"), num_classes=n,
        extra={"split": args.split, "checkpoint": str(args.checkpoint)},
    )
    mean_dice = float(np.mean([r.dice_avg for r in reports]))
    log.info("%s split: %d pairs, mean dice %.4f -> %s", args.split, len(reports), mean_dice, out_csv)
    return 0


def cmd_segment(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.model.has_memory:
        raise UnsupportedModeError(
            "checkpoint was trained without the memory module and cannot segment"
        )
    fixed = _load_conformed_image(args.fixed, ckpt.meta)
    with torch.no_grad():
        addr = ckpt.model.segment(
            torch.from_numpy(fixed.data).float().reshape(1, 1, *fixed.data.shape)
        )
    soft, hard = segmentation_from_address(addr, fixed.data.shape, spacing=fixed.spacing)
    out = Path(args.out)
    volio.write_volume(hard, out)
    prob_path = out.parent / (out.name.replace(".nii", "_prob.nii") if ".nii" in out.name
                              else out.stem + "_prob" + out.suffix)
    volio.write_channels(soft, fixed.spacing, prob_path, descrip=b"memwarp class probabilities")
    if args.reference_seg:
        from .metrics import dice_score

        ref = volio.read_volume(args.reference_seg, num_classes=hard.num_classes)
        scores = {
            k: dice_score(hard, ref, k) for k in range(1, hard.num_classes)
        }
        mean = float(np.mean(list(scores.values())))
        log.info("segmentation dice vs reference: mean %.4f (%s)", mean,
                 ", ".join(f"c{k}={v:.4f}" for k, v in scores.items()))
    log.info("segmentation written to %s (probabilities: %s)", out, prob_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memwarp",
        description="Discontinuity-preserving deformable registration at desk scale.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--spec", help="phantom spec YAML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="spec override")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--data", required=True, help="dataset root (from synth)")
    p.add_argument("--out", required=True, help="run directory for logs and checkpoint")
    p.add_argument("--config", help="training config YAML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register a moving volume to a fixed volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--moving-seg", help="optional moving segmentation to warp along")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report CSV path (JSON written alongside)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="segment a fixed volume with the memory network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="hard-label output volume")
    p.add_argument("--reference-seg", help="optional ground truth; logs Dice when given")
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors, which matches the config code
        return int(err.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except MemWarpError as err:
        log.error("%s", err)
        return err.exit_code
    except FileNotFoundError as err:
        log.error("%s", err)
        return DataError.exit_code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
