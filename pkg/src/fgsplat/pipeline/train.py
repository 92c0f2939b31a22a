"""Three-stage trainer.

Stage 1 fits the reconstruction backbone with the render loss. Stage 2
freezes it, renders degraded/clean pairs once, and trains the one-step
refiner (plus the adversarial pair) on those frozen pairs with guidance
features withheld. Stage 3 optimizes everything jointly end to end with
feature guidance active.

Determinism: every stochastic choice draws from a generator seeded by
``(config.seed, stage tag, step)``, so training curves replay bitwise for
a fixed config regardless of how stages are chained.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..diffcore import Adam, ops
from ..errors import ContractError, NumericError
from ..losses import (DEFAULT_WEIGHTS, Discriminator, LossWeights,
                      PerceptualProxy, gan_loss, loss_d, loss_r, total_loss)
from ..refiner import OneStepRefiner
from .checkpoint import load_checkpoint, peek_config, peek_names, save_checkpoint
from .config import PipelineConfig
from .model import ReconModel, render_and_refine

_STAGE1, _STAGE2, _STAGE3 = 101, 202, 303


def weights_from(config):
    return LossWeights(
        lambda1=config.lambda1, lambda2=config.lambda2,
        lambda3=config.lambda3, lambda4=config.lambda4,
        lambda5=config.lambda5, lambda_r=config.lambda_r,
        lambda_d=config.lambda_d, lambda_g=config.lambda_g)


def build_model(config):
    return ReconModel(np.random.default_rng([config.seed, 1]), config)


def build_refiner(config):
    c_guidance = config.feature_dim if config.use_feature_guidance else 0
    return OneStepRefiner(np.random.default_rng([config.seed, 2]),
                          c_lat=config.c_lat, c_guidance=c_guidance,
                          base=config.unet_base, n_heads=config.unet_heads)


def build_proxy(config):
    return PerceptualProxy(seed=config.seed)


def build_discriminator(config, proxy):
    return Discriminator(np.random.default_rng([config.seed, 3]), proxy)


def load_bundle(path, config=None):
    """Rebuild whatever modules a checkpoint holds and restore them.

    The manifest's top-level prefixes (model/refiner/disc) say which
    modules the file contains; missing an expected tensor is still a
    manifest error inside load_checkpoint. Returns a dict with the
    restored modules plus the effective config.
    """
    if config is None:
        config = PipelineConfig.from_json(peek_config(path))
    prefixes = {n.split("/", 1)[0] for n in peek_names(path)}
    modules = {}
    if "model" in prefixes:
        modules["model"] = build_model(config)
    if "refiner" in prefixes:
        modules["refiner"] = build_refiner(config)
    if "disc" in prefixes:
        modules["disc"] = build_discriminator(config, build_proxy(config))
    load_checkpoint(path, modules)
    modules["config"] = config
    return modules


def sample_views(rng, n_views, views_per_sample):
    """Pick input view indices and a target index.

    When the scene has more views than a sample uses, the target is held
    out; otherwise every view is an input and the target is one of them
    (the overfitting regime).
    """
    if n_views < 1:
        raise ContractError("scene has no views")
    perm = rng.permutation(n_views)
    n_in = min(views_per_sample - 1, n_views)
    inputs = [int(i) for i in perm[:n_in]]
    if n_views > n_in:
        target = int(perm[n_in])
    else:
        target = inputs[int(rng.integers(n_in))]
    return inputs, target


def _check_loss(value, stage, step, extra=""):
    if np.isfinite(value):
        return
    raise NumericError(
        f"{stage} loss became non-finite at step {step}: {value!r}{extra}")


def _write_csv(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    return path


def _pick_scene(rng, dataset):
    return dataset[int(rng.integers(len(dataset)))]


def train_stage1(config, dataset, out_dir=None, model=None):
    """Fit the reconstruction model with L_r; returns a result dict."""
    if not dataset:
        raise ContractError("stage 1 needs a non-empty dataset")
    model = model if model is not None else build_model(config)
    proxy = build_proxy(config)
    weights = weights_from(config)
    opt = Adam(model.named_parameters(), lr=config.lr_backbone,
               clip_norm=config.clip_norm)
    rows = []
    for step in range(config.stage1_steps):
        rng = np.random.default_rng([config.seed, _STAGE1, step])
        rec = _pick_scene(rng, dataset)
        inputs, target = sample_views(rng, rec.n_views,
                                      config.views_per_sample)
        res = render_and_refine(model, None,
                                [rec.images[i] for i in inputs],
                                [rec.cameras[i] for i in inputs],
                                rec.cameras[target])
        loss = loss_r(res["i_r"], dc.Tensor(rec.images[target]),
                      proxy, weights)
        value = float(loss.data)
        _check_loss(value, "stage1", step,
                    extra=f" (scene {rec.name}, target view {target})")
        opt.step(dc.backward(loss))
        rows.append({"step": step, "loss": value})
    result = {"model": model, "losses": [r["loss"] for r in rows]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        result["csv"] = _write_csv(out_dir / "stage1_loss.csv",
                                   ["step", "loss"], rows)
        result["checkpoint"] = save_checkpoint(
            out_dir / "stage1.ckpt", {"model": model}, config.to_json())
    return result


def build_pairs(config, dataset, model):
    """Frozen degraded/clean pairs from stage-1 renders.

    One pair per (scene, view): the view is rendered from the other views,
    seeded noise is added, and the ground-truth image is the clean side.
    Reference images ride along so the refiner's cross-view attention has
    inputs. Fully deterministic; no gradients are recorded.
    """
    pairs = []
    for s_idx, rec in enumerate(dataset):
        for v in range(rec.n_views):
            rng = np.random.default_rng([config.seed, _STAGE2, s_idx, v])
            inputs, _ = sample_views(rng, rec.n_views,
                                     config.views_per_sample)
            if v in inputs and rec.n_views > len(inputs):
                inputs = [i for i in inputs if i != v] + \
                    [i for i in range(rec.n_views)
                     if i != v and i not in inputs][:1]
            with dc.no_grad():
                res = render_and_refine(model, None,
                                        [rec.images[i] for i in inputs],
                                        [rec.cameras[i] for i in inputs],
                                        rec.cameras[v])
            noisy = np.clip(
                res["i_r"].data
                + config.pair_noise * rng.standard_normal(res["i_r"].shape),
                0.0, 1.0).astype(res["i_r"].data.dtype)
            pairs.append({"noisy": noisy, "clean": rec.images[v],
                          "refs": [rec.images[i] for i in inputs],
                          "scene": rec.name, "view": v})
    return pairs


def train_stage2(config, dataset, model, out_dir=None, refiner=None,
                 disc=None):
    """Train the refiner on frozen pairs with guidance withheld."""
    if not config.use_refiner:
        raise ContractError("stage 2 requires use_refiner=true")
    refiner = refiner if refiner is not None else build_refiner(config)
    proxy = build_proxy(config)
    disc = disc if disc is not None else build_discriminator(config, proxy)
    weights = weights_from(config)
    pairs = build_pairs(config, dataset, model)
    opt_g = Adam(refiner.named_parameters(), lr=config.lr_refiner,
                 clip_norm=config.clip_norm)
    opt_d = Adam(disc.named_parameters(), lr=config.lr_disc,
                 clip_norm=config.clip_norm)
    rows = []
    for step in range(config.stage2_steps):
        rng = np.random.default_rng([config.seed, _STAGE2, step])
        pair = pairs[int(rng.integers(len(pairs)))]
        clean = dc.Tensor(pair["clean"])
        i_d = refiner.denoise(dc.Tensor(pair["noisy"]),
                              [dc.Tensor(r) for r in pair["refs"]])
        l_d = loss_d(i_d, clean, proxy, weights)
        gen = gan_loss([clean], [i_d], disc, weights)["generator"]
        obj = ops.add(ops.mul(l_d, weights.lambda_d),
                      ops.mul(gen, weights.lambda_g))
        gen_value = float(obj.data)
        _check_loss(gen_value, "stage2(generator)", step)
        opt_g.step(dc.backward(obj))

        fake = dc.Tensor(i_d.data.copy())
        d_term = gan_loss([clean], [fake], disc, weights)["discriminator"]
        disc_value = float(d_term.data)
        _check_loss(disc_value, "stage2(discriminator)", step)
        opt_d.step(dc.backward(ops.neg(d_term)))
        rows.append({"step": step, "generator": gen_value,
                     "discriminator": disc_value})
    result = {"refiner": refiner, "disc": disc,
              "losses": [r["generator"] for r in rows]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        result["csv"] = _write_csv(out_dir / "stage2_loss.csv",
                                   ["step", "generator", "discriminator"],
                                   rows)
        result["checkpoint"] = save_checkpoint(
            out_dir / "stage2.ckpt", {"refiner": refiner, "disc": disc},
            config.to_json())
    return result


def train_stage3_joint(config, dataset, model, refiner, disc=None,
                       out_dir=None):
    """End-to-end fine-tuning with L_total and guidance features active."""
    if not config.use_refiner:
        raise ContractError("stage 3 requires use_refiner=true")
    proxy = build_proxy(config)
    disc = disc if disc is not None else build_discriminator(config, proxy)
    weights = weights_from(config)
    opt_r = Adam(refiner.named_parameters(), lr=config.lr_refiner,
                 clip_norm=config.clip_norm)
    opt_d = Adam(disc.named_parameters(), lr=config.lr_disc,
                 clip_norm=config.clip_norm)
    opt_m = None
    if not config.freeze_backbone_stage3:
        opt_m = Adam(model.named_parameters(),
                     lr=config.lr_backbone, clip_norm=config.clip_norm)
    rows = []
    for step in range(config.stage3_steps):
        rng = np.random.default_rng([config.seed, _STAGE3, step])
        rec = _pick_scene(rng, dataset)
        inputs, target = sample_views(rng, rec.n_views,
                                      config.views_per_sample)
        res = render_and_refine(model, refiner,
                                [rec.images[i] for i in inputs],
                                [rec.cameras[i] for i in inputs],
                                rec.cameras[target])
        clean = dc.Tensor(rec.images[target])
        l_r = loss_r(res["i_r"], clean, proxy, weights)
        l_d = loss_d(res["i_d"], clean, proxy, weights)
        gen = gan_loss([clean], [res["i_d"]], disc, weights)["generator"]
        total = total_loss(l_r, l_d, gen, weights)
        value = float(total.data)
        _check_loss(value, "stage3", step,
                    extra=f" (scene {rec.name}, target view {target})")
        grads = dc.backward(total)
        if opt_m is not None:
            opt_m.step(grads)
        opt_r.step(grads)

        fake = dc.Tensor(res["i_d"].data.copy())
        d_term = gan_loss([clean], [fake], disc, weights)["discriminator"]
        disc_value = float(d_term.data)
        _check_loss(disc_value, "stage3(discriminator)", step)
        opt_d.step(dc.backward(ops.neg(d_term)))
        rows.append({"step": step, "total": value,
                     "loss_r": float(l_r.data), "loss_d": float(l_d.data),
                     "discriminator": disc_value})
    result = {"model": model, "refiner": refiner, "disc": disc,
              "losses": [r["total"] for r in rows]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        result["csv"] = _write_csv(
            out_dir / "stage3_loss.csv",
            ["step", "total", "loss_r", "loss_d", "discriminator"], rows)
        result["checkpoint"] = save_checkpoint(
            out_dir / "stage3.ckpt",
            {"model": model, "refiner": refiner, "disc": disc},
            config.to_json())
    return result
