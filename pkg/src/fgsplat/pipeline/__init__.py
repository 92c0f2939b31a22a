"""Synthetic data, model assembly, training stages, checkpoints, evaluation,
and the command-line interface."""

from .config import PRESETS, PipelineConfig, apply_overrides, load_config, preset
from .checkpoint import (load_checkpoint, peek_config, peek_names,
                         save_checkpoint)
from .model import ReconModel, relative_camera, render_and_refine
from .synth import load_dataset, make_cameras, make_scene, synth_dataset
from .train import (build_discriminator, build_model, build_proxy,
                    build_refiner, load_bundle, sample_views, train_stage1,
                    train_stage2, train_stage3_joint, weights_from)
from .evaluate import aggregate_rows, evaluate, select_inputs, write_report
from .diagnostics import run_gradcheck

__all__ = [
    "PRESETS", "PipelineConfig", "apply_overrides", "load_config", "preset",
    "load_checkpoint", "peek_config", "peek_names", "save_checkpoint",
    "ReconModel", "relative_camera", "render_and_refine",
    "load_dataset", "make_cameras", "make_scene", "synth_dataset",
    "build_discriminator", "build_model", "build_proxy", "build_refiner",
    "load_bundle", "sample_views", "train_stage1", "train_stage2",
    "train_stage3_joint", "weights_from",
    "aggregate_rows", "evaluate", "select_inputs", "write_report",
    "run_gradcheck",
]
