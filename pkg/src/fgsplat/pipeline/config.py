"""Run configuration: one flat dataclass, JSON round-trip, presets, and
``--set key=value`` overrides.

The ablation presets reproduce the wiring of the model variants: each named
preset enables one more component on top of the previous one, from the bare
backbone ("base") to the fully feature-guided refiner ("feature-sd").
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from ..errors import ConfigurationError

TILE_SIZES = (8, 16, 32)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class PipelineConfig:
    """Every knob of the pipeline; defaults are the desk-scale paper setup."""

    seed: int = 0

    # input resolutions: the backbone reads images downscaled 2x, the
    # detail module reads them at full stored resolution
    backbone_resolution: int = 256
    detail_resolution: int = 512

    # backbone
    patch: int = 16
    d_model: int = 128
    n_heads: int = 4
    n_enc: int = 4
    n_dec: int = 4
    # head biases: initial log-scale, opacity logit, and depth of the
    # per-pixel Gaussians
    scale_bias: float = -4.5
    opacity_bias: float = -0.85
    depth_init: float = 2.5

    # detail module
    c_detail: int = 8
    k_fraction: float = 0.25
    use_detail: bool = True
    use_frequency: bool = True

    # Gaussian features / rendering
    feature_dim: int = 8
    tile_size: int = 16
    t_cutoff: float = 1e-4

    # optional two-layer CNN over the rendered image + feature map
    use_gs_feature_cnn: bool = False

    # refiner
    c_lat: int = 8
    unet_base: int = 32
    unet_heads: int = 4
    use_refiner: bool = False
    use_feature_guidance: bool = False

    # training schedule
    stage1_steps: int = 2000
    stage2_steps: int = 600
    stage3_steps: int = 400
    lr_backbone: float = 3e-4
    lr_refiner: float = 1e-4
    lr_disc: float = 1e-4
    clip_norm: float = 1.0
    views_per_sample: int = 3   # N-1 input views + 1 target
    freeze_backbone_stage3: bool = False
    pair_noise: float = 0.02    # additive noise when building stage-2 pairs

    # loss weights
    lambda1: float = 1.0
    lambda2: float = 0.05
    lambda3: float = 1.0
    lambda4: float = 0.05
    lambda5: float = 1.0
    lambda_r: float = 1.0
    lambda_d: float = 1.0
    lambda_g: float = 0.05

    # dataset generation
    num_scenes: int = 4
    gaussians_per_scene: int = 96
    views_per_scene: int = 6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not _is_pow2(self.backbone_resolution) or not _is_pow2(self.detail_resolution):
            raise ConfigurationError(
                f"resolutions must be powers of two, got backbone "
                f"{self.backbone_resolution}, detail {self.detail_resolution}")
        if self.detail_resolution != 2 * self.backbone_resolution:
            raise ConfigurationError(
                f"detail_resolution must be twice backbone_resolution, got "
                f"{self.detail_resolution} vs {self.backbone_resolution}")
        if self.tile_size not in TILE_SIZES:
            raise ConfigurationError(
                f"tile_size must be one of {TILE_SIZES}, got {self.tile_size}")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ConfigurationError(
                f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if self.detail_resolution % 8:
            raise ConfigurationError("detail_resolution must divide by 8")
        for name in ("stage1_steps", "stage2_steps", "stage3_steps",
                     "num_scenes", "gaussians_per_scene", "views_per_scene"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.views_per_sample < 2:
            raise ConfigurationError(
                "views_per_sample must be >= 2 (at least one input + target)")
        if self.use_feature_guidance and not self.use_refiner:
            raise ConfigurationError(
                "use_feature_guidance requires use_refiner")

    def to_json(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d):
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return PipelineConfig(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# Cumulative ablation rows; each adds one component to the previous preset.
PRESETS = {
    "base": dict(use_detail=False, use_frequency=False,
                 use_gs_feature_cnn=False, use_refiner=False,
                 use_feature_guidance=False),
    "cnn-dpm": dict(use_detail=True, use_frequency=False,
                    use_gs_feature_cnn=False, use_refiner=False,
                    use_feature_guidance=False),
    "dd-dpm": dict(use_detail=True, use_frequency=True,
                   use_gs_feature_cnn=False, use_refiner=False,
                   use_feature_guidance=False),
    "gs-feature-cnn": dict(use_detail=True, use_frequency=True,
                           use_gs_feature_cnn=True, use_refiner=False,
                           use_feature_guidance=False),
    "sd": dict(use_detail=True, use_frequency=True, use_gs_feature_cnn=False,
               use_refiner=True, use_feature_guidance=False),
    "feature-sd": dict(use_detail=True, use_frequency=True,
                       use_gs_feature_cnn=False, use_refiner=True,
                       use_feature_guidance=True),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return PipelineConfig(**kw)


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
    return PipelineConfig.from_json(data)


def _coerce(field, raw):
    t = field.type if isinstance(field.type, type) else None
    if t is None:
        # dataclass fields carry string annotations under
        # `from __future__ import annotations`
        t = {"int": int, "float": float, "bool": bool, "str": str}.get(
            str(field.type), str)
    if t is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse {raw!r} as bool for {field.name}")
    try:
        return t(raw)
    except ValueError:
        raise ConfigurationError(
            f"cannot parse {raw!r} as {t.__name__} for {field.name}")


def apply_overrides(config, pairs):
    """Apply ["key=value", ...] overrides with field-typed coercion.

    The special key ``preset=NAME`` swaps in the named preset before any
    other override is applied, regardless of argument order.
    """
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key == "preset":
            config = preset(raw.strip())
        elif key not in fields:
            raise ConfigurationError(f"unknown config key {key!r}")
        else:
            updates[key] = _coerce(fields[key], raw.strip())
    return config.replace(**updates) if updates else config
