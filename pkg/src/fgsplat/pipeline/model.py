"""Reconstruction model: backbone + detail branch -> canonical Gaussians.

The model consumes full-resolution input views, runs the transformer trunk
on half-resolution copies (the detail branch sees the originals), and
unions every view's per-pixel Gaussians into one ScenePack expressed in
the first input view's camera frame. Rendering any camera therefore goes
through :func:`relative_camera`, which re-expresses a world-frame camera
relative to that reference view.
"""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..backbone import Backbone
from ..detailmod import DetailModule
from ..diffcore import ops
from ..nn import Conv2d, Module
from ..errors import ContractError
from ..gscene import Camera, unproject_depth
from ..rasterizer import ScenePack, rasterize


def relative_camera(cam, ref):
    """Re-express cam in the coordinate frame whose origin is ref's pose.

    Points x_ref in the reference camera frame map to pixels of ``cam``
    via R_rel @ x_ref + t_rel with R_rel = R @ R_ref^T and
    t_rel = t - R_rel @ t_ref; for cam == ref this is the identity pose.
    """
    r_rel = cam.R @ ref.R.T
    t_rel = cam.t - r_rel @ ref.t
    return Camera(cam.K.copy(), r_rel, t_rel, cam.width, cam.height)


class GsFeatureCnn(Module):
    """Two-layer conv post-process over the rendered image and feature map.

    The second conv starts at zero, so an untrained module is the identity
    on the rendered color.
    """

    def __init__(self, rng, feature_dim, hidden=16):
        self.conv1 = Conv2d(rng, 3 + feature_dim, hidden)
        self.conv2 = Conv2d(rng, hidden, 3, zero_init=True)

    def __call__(self, color_cf, feature_cf):
        h, w = color_cf.shape[1:]
        up = ops.resize_nearest(feature_cf, (h, w))
        x = ops.gelu(self.conv1(ops.concat([color_cf, up], axis=0)))
        return ops.add(color_cf, self.conv2(x))


class ReconModel(Module):
    """Feed-forward multi-view reconstructor configured by PipelineConfig."""

    def __init__(self, rng, config):
        self.config = config
        r = config.backbone_resolution
        self.backbone = Backbone(
            rng, (r, r), patch=config.patch, d_model=config.d_model,
            n_heads=config.n_heads, n_enc=config.n_enc, n_dec=config.n_dec,
            c_detail=config.c_detail, feature_dim=config.feature_dim,
            depth_init=config.depth_init, scale_bias=config.scale_bias,
            opacity_bias=config.opacity_bias)
        if config.use_detail:
            self.detail = DetailModule(rng, config.c_detail,
                                       config.k_fraction,
                                       use_frequency=config.use_frequency)
        else:
            self.detail = None
        if config.use_gs_feature_cnn:
            self.post = GsFeatureCnn(rng, config.feature_dim)
        else:
            self.post = None

    def _check_inputs(self, images, cams):
        if not images or len(images) != len(cams):
            raise ContractError(
                f"{len(images)} images with {len(cams)} cameras")
        d = self.config.detail_resolution
        for i, (img, cam) in enumerate(zip(images, cams)):
            if tuple(img.shape) != (3, d, d):
                raise ContractError(
                    f"input view {i} has shape {tuple(img.shape)}, "
                    f"expected (3, {d}, {d})")
            if (cam.width, cam.height) != (d, d):
                raise ContractError(
                    f"camera {i} is {cam.width}x{cam.height}, expected {d}x{d}")

    def _detail_grid(self, image_hi):
        if self.detail is not None:
            return self.detail(image_hi).grid
        r = self.config.backbone_resolution
        shape = (self.config.c_detail, r // 4, r // 4)
        return dc.Tensor(np.zeros(shape, dtype=dc.default_dtype()))

    def predict_scene(self, images, cams):
        """Input views -> one ScenePack in the first view's camera frame."""
        images = [ops.as_tensor(im) for im in images]
        self._check_inputs(images, cams)
        rel = [relative_camera(c, cams[0]) for c in cams]
        imgs_lo = [ops.avg_pool2d(im, 2) for im in images]
        cams_lo = [c.scaled(0.5) for c in rel]
        feats = self.backbone.encode_views(imgs_lo, cams_lo)
        parts = {k: [] for k in ("mu", "scale", "quat", "opacity",
                                 "color", "feature")}
        for v, feat in enumerate(feats):
            pm = self.backbone.params(feat, self._detail_grid(images[v]),
                                      imgs_lo[v])
            depth = self.backbone.depth(feat)
            h, w = depth.shape
            n = h * w

            def flat(t, channels):
                return ops.transpose(ops.reshape(t, (channels, n)), (1, 0))

            parts["mu"].append(ops.reshape(
                unproject_depth(depth, cams_lo[v]), (n, 3)))
            parts["scale"].append(flat(pm["scale_raw"], 3))
            parts["quat"].append(flat(pm["quat_raw"], 4))
            parts["opacity"].append(ops.reshape(pm["opacity_raw"], (n,)))
            parts["color"].append(flat(pm["color"], 3))
            parts["feature"].append(flat(pm["feature"],
                                         self.config.feature_dim))
        cat = {k: (v[0] if len(v) == 1 else ops.concat(v, axis=0))
               for k, v in parts.items()}
        return ScenePack(cat["mu"], cat["scale"], cat["quat"],
                         cat["opacity"], cat["color"], cat["feature"],
                         np.zeros(3))

    def render_view(self, pack, cam, ref_cam, *, with_features=False):
        """Render the canonical-frame pack from a world-frame camera."""
        want_features = with_features or self.post is not None
        out = rasterize(pack, relative_camera(cam, ref_cam),
                        tile_size=self.config.tile_size,
                        t_cutoff=self.config.t_cutoff,
                        with_features=want_features)
        color_cf = ops.transpose(out.color, (2, 0, 1))
        if self.post is not None:
            feat_cf = ops.transpose(out.feature, (2, 0, 1))
            color_cf = ops.clamp(self.post(color_cf, feat_cf), 0.0, 1.0)
        return out, color_cf

    def render_target(self, images, cams, target_cam, *, with_features=False):
        """Predict a scene from the inputs and render the target camera.

        Returns (pack, render output, color as a (3,H,W) tensor).
        """
        pack = self.predict_scene(images, cams)
        out, color_cf = self.render_view(pack, target_cam, cams[0],
                                         with_features=with_features)
        return pack, out, color_cf


def guidance_maps(model, pack, cams, target_cam, out_target):
    """Channel-first F_g for the target plus each reference view."""
    f_g_target = ops.transpose(out_target.feature, (2, 0, 1))
    f_g_refs = []
    for cam in cams:
        out, _ = model.render_view(pack, cam, cams[0], with_features=True)
        f_g_refs.append(ops.transpose(out.feature, (2, 0, 1)))
    return f_g_target, f_g_refs


def render_and_refine(model, refiner, images, cams, target_cam):
    """Full pipeline for one target view.

    Returns a dict with the ScenePack, the raw render (``i_r``) and, when a
    refiner is supplied, the denoised image (``i_d``); both images are
    (3, H, W) tensors.
    """
    use_guidance = refiner is not None and model.config.use_feature_guidance
    pack, out, i_r = model.render_target(images, cams, target_cam,
                                         with_features=use_guidance)
    result = {"pack": pack, "render": out, "i_r": i_r, "i_d": None}
    if refiner is None:
        return result
    refs = [ops.as_tensor(im) for im in images]
    if use_guidance:
        f_g_target, f_g_refs = guidance_maps(model, pack, cams, target_cam, out)
    else:
        f_g_target, f_g_refs = None, ()
    result["i_d"] = refiner.denoise(i_r, refs, f_g_target=f_g_target,
                                    f_g_refs=f_g_refs)
    return result
