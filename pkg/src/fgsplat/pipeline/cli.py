"""Command-line interface.

Every subcommand accepts ``--config <json>`` plus repeatable
``--set key=value`` overrides (``--set preset=NAME`` swaps the base
preset). Exit codes: 0 success, 2 contract/configuration/IO error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigurationError, ContractError, NumericError
from .config import PRESETS, PipelineConfig, apply_overrides, load_config
from .diagnostics import run_gradcheck
from .evaluate import evaluate, write_report
from .synth import load_dataset, synth_dataset
from .train import (build_model, load_bundle, train_stage1, train_stage2,
                    train_stage3_joint)


def build_parser():
    p = argparse.ArgumentParser(
        prog="fgsplat",
        description="Feature-guided Gaussian splatting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, **extra):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None,
                        help="JSON config file (defaults when omitted)")
        sp.add_argument("--set", action="append", default=[], dest="sets",
                        metavar="KEY=VALUE",
                        help="override a config field; preset=NAME swaps "
                             f"the base preset ({', '.join(PRESETS)})")
        for flag, kw in extra.items():
            sp.add_argument(f"--{flag.replace('_', '-')}", **kw)
        return sp

    add("synth-data", "generate a synthetic dataset",
        out={"required": True, "help": "output dataset directory"})
    add("train-recon", "stage 1: train the reconstruction model",
        data={"required": True, "help": "dataset directory"},
        out={"required": True, "help": "output directory for checkpoints"})
    add("train-refiner", "stage 2: train the refiner on frozen pairs",
        data={"required": True}, out={"required": True},
        recon={"required": True, "help": "stage-1 checkpoint"})
    add("train-joint", "stage 3: end-to-end fine-tuning",
        data={"required": True}, out={"required": True},
        recon={"required": True, "help": "stage-1 checkpoint"},
        refiner={"default": None, "help": "stage-2 checkpoint (optional)"})
    add("render", "render one target view from a checkpoint",
        ckpt={"required": True}, data={"required": True},
        out={"required": True, "help": "output PNG path"},
        scene={"type": int, "default": 0}, view={"type": int, "default": 0})
    add("eval", "write a metrics report for a checkpoint",
        ckpt={"required": True}, data={"required": True},
        out={"required": True, "help": "output JSON path"})
    add("gradcheck", "finite-difference gradient battery")
    return p


def _config_from(args, fallback_json=None):
    """--config beats a checkpoint snapshot; --set always applies last."""
    if args.config is not None:
        config = load_config(args.config)
    elif fallback_json is not None:
        config = PipelineConfig.from_json(fallback_json)
    else:
        config = PipelineConfig()
    return apply_overrides(config, args.sets)


def _cmd_synth_data(args):
    config = _config_from(args)
    synth_dataset(args.out, config.seed, config.num_scenes,
                  config.gaussians_per_scene, config.views_per_scene,
                  config.detail_resolution, config.detail_resolution,
                  config.feature_dim)
    print(f"wrote {config.num_scenes} scenes to {args.out}")


def _cmd_train_recon(args):
    config = _config_from(args)
    dataset = load_dataset(args.data)
    result = train_stage1(config, dataset, out_dir=args.out)
    final = result["losses"][-1] if result["losses"] else float("nan")
    print(f"stage 1 done: {config.stage1_steps} steps, "
          f"final loss {final:.6f}, checkpoint {result['checkpoint']}")


def _cmd_train_refiner(args):
    from .checkpoint import peek_config
    config = _config_from(args, fallback_json=peek_config(args.recon))
    bundle = load_bundle(args.recon, config)
    dataset = load_dataset(args.data)
    result = train_stage2(config, dataset, bundle["model"],
                          out_dir=args.out)
    final = result["losses"][-1] if result["losses"] else float("nan")
    print(f"stage 2 done: {config.stage2_steps} steps, "
          f"final generator loss {final:.6f}, "
          f"checkpoint {result['checkpoint']}")


def _cmd_train_joint(args):
    from .checkpoint import peek_config
    config = _config_from(args, fallback_json=peek_config(args.recon))
    model = load_bundle(args.recon, config)["model"]
    refiner = disc = None
    if args.refiner is not None:
        bundle = load_bundle(args.refiner, config)
        refiner = bundle.get("refiner")
        disc = bundle.get("disc")
    if refiner is None:
        from .train import build_refiner
        refiner = build_refiner(config)
    result = train_stage3_joint(config, dataset=load_dataset(args.data),
                                model=model, refiner=refiner, disc=disc,
                                out_dir=args.out)
    final = result["losses"][-1] if result["losses"] else float("nan")
    print(f"stage 3 done: {config.stage3_steps} steps, "
          f"final total loss {final:.6f}, checkpoint {result['checkpoint']}")


def _select_record(dataset, index):
    if not 0 <= index < len(dataset):
        raise ContractError(
            f"scene index {index} out of range (dataset has {len(dataset)})")
    return dataset[index]


def _cmd_render(args):
    from .evaluate import select_inputs
    from .model import render_and_refine
    bundle = load_bundle(args.ckpt)
    if args.config is not None or args.sets:
        bundle = load_bundle(args.ckpt, _config_from(
            args, fallback_json=bundle["config"].to_json()))
    config = bundle["config"]
    model = bundle.get("model")
    if model is None:
        raise ContractError(f"{args.ckpt} holds no reconstruction model")
    dataset = load_dataset(args.data)
    rec = _select_record(dataset, args.scene)
    if not 0 <= args.view < rec.n_views:
        raise ContractError(
            f"view index {args.view} out of range ({rec.n_views} views)")
    inputs = select_inputs(rec.n_views, args.view, config.views_per_sample)
    from .. import diffcore as dc
    with dc.no_grad():
        res = render_and_refine(model, bundle.get("refiner"),
                                [rec.images[i] for i in inputs],
                                [rec.cameras[i] for i in inputs],
                                rec.cameras[args.view])
    img = res["i_d"] if res["i_d"] is not None else res["i_r"]
    arr = np.clip(img.data.transpose(1, 2, 0) * 255.0 + 0.5,
                  0, 255).astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(args.out)
    print(f"rendered {rec.name} view {args.view} -> {args.out}")


def _cmd_eval(args):
    bundle = load_bundle(args.ckpt)
    if args.config is not None or args.sets:
        bundle = load_bundle(args.ckpt, _config_from(
            args, fallback_json=bundle["config"].to_json()))
    model = bundle.get("model")
    if model is None:
        raise ContractError(f"{args.ckpt} holds no reconstruction model")
    dataset = load_dataset(args.data)
    report = evaluate(bundle["config"], dataset, model,
                      refiner=bundle.get("refiner"))
    write_report(args.out, report)
    agg = report["aggregate"]
    print(f"evaluated {report['count']} views: psnr {agg['psnr']:.2f}, "
          f"ssim {agg['ssim']:.4f}, perceptual {agg['perceptual']:.4f} "
          f"-> {args.out}")


def _cmd_gradcheck(args):
    _config_from(args)  # validate config/overrides even though unused
    failed = []
    for precision in ("float64", "float32"):
        for r in run_gradcheck(precision):
            status = "PASS" if r["ok"] else "FAIL"
            print(f"gradcheck {r['name']} [{precision}]: "
                  f"fraction {r['fraction']:.4f} within {r['tolerance']:g} "
                  f"-> {status}")
            if not r["ok"]:
                failed.append((r["name"], precision, r["summary"]))
    if failed:
        details = "; ".join(f"{n} [{p}]" for n, p, _ in failed)
        raise NumericError(f"gradient check failed: {details}")


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train-recon": _cmd_train_recon,
    "train-refiner": _cmd_train_refiner,
    "train-joint": _cmd_train_joint,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except (ContractError, ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
