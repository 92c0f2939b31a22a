"""Geometry backbone: a small multi-view transformer with parameter heads.

Per view: the image is patchified into linear token embeddings (positional
table added exactly once), the camera intrinsics are injected as a
broadcast-added token, and a shared encoder stack self-attends. Across
views: decoder blocks alternate per-view self-attention with cross-view
attention over the concatenation of every view's tokens; no view-order
embedding exists, so the decoder is equivariant to view permutations.

Two heads read the decoded features. The depth head upsamples the token
grid back to pixels stage by stage and applies exp, so depths are strictly
positive; centers come from gscene.unproject_depth on the view's own rays.
The parameter head upsamples likewise but concatenates the detail grid at
its 1/8-resolution stage and the raw image at full resolution, and emits
per-pixel pre-activation Gaussian parameters; the color channels are a
residual added to the input pixels.

Images are channel-first (3, H, W); tokens are (P, d_model). Camera
extrinsics never enter the network — only intrinsics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ops
from .diffcore.module import Module, param, zeros_param
from .errors import ConfigurationError, ContractError
from .nn import Conv2d, ConvTranspose2d, Linear, LayerNorm, MultiHeadAttention, \
    Mlp, TransformerBlock

D_MODEL = 128
N_HEADS = 4
N_ENC = 4
N_DEC = 4
PATCH = 16


@dataclass
class TokenSequence:
    """Per-view token matrix plus its patch-grid geometry."""

    tokens: dc.Tensor  # (P, d_model)
    view_id: int
    grid: tuple  # (h_p, w_p)

    def __post_init__(self):
        hp, wp = self.grid
        if self.tokens.shape[0] != hp * wp:
            raise ContractError(
                f"token count {self.tokens.shape[0]} != grid {hp}x{wp}")


@dataclass
class GlobalFeatures:
    """Decoder output for one view, still on the token grid."""

    tokens: dc.Tensor  # (P, d_model)
    grid: tuple


class PatchEmbed(Module):
    """Flattened-patch linear embedding plus a learned positional table."""

    def __init__(self, rng, image_hw, patch, d_model):
        h, w = image_hw
        if h % patch or w % patch:
            raise ContractError(
                f"image {h}x{w} not divisible by patch size {patch}")
        self.patch = patch
        self.grid = (h // patch, w // patch)
        self.proj = Linear(rng, 3 * patch * patch, d_model)
        self.pos = param(rng.normal(size=(self.grid[0] * self.grid[1], d_model))
                         .astype(np.float64) * 0.02)

    def embed_patches(self, image):
        """Pre-positional patch embeddings (P, d_model)."""
        image = ops.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected a (3, H, W) image, got {image.shape}")
        c, h, w = image.shape
        p = self.patch
        if (h // p, w // p) != self.grid:
            raise ContractError(
                f"image {h}x{w} does not match the {self.grid} patch grid")
        x = ops.reshape(image, (c, h // p, p, w // p, p))
        x = ops.transpose(x, (1, 3, 0, 2, 4))  # (hp, wp, c, p, p)
        x = ops.reshape(x, (self.grid[0] * self.grid[1], c * p * p))
        return self.proj(x)

    def __call__(self, image):
        return ops.add(self.embed_patches(image), self.pos)


class DecoderBlock(Module):
    """Per-view self-attention, then cross-view attention over all tokens."""

    def __init__(self, rng, d, n_heads):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm3 = LayerNorm(d)
        self.mlp = Mlp(rng, d, 4 * d)

    def __call__(self, views):
        out = []
        for x in views:
            h = self.norm1(x)
            out.append(ops.add(x, self.self_attn(h, h)))
        normed = [self.norm2(x) for x in out]
        kv = ops.concat(normed, axis=0) if len(normed) > 1 else normed[0]
        out = [ops.add(x, self.cross_attn(n, kv)) for x, n in zip(out, normed)]
        return [ops.add(x, self.mlp(self.norm3(x))) for x in out]


def _upsample_channels(c0, levels):
    """Channel widths for a chain of stride-2 upsampling stages."""
    widths = [c0]
    for _ in range(levels):
        widths.append(max(16, int(widths[-1] * 0.75)))
    return widths


class DepthHead(Module):
    """Token grid -> full-resolution strictly positive depth map."""

    def __init__(self, rng, d_model, patch, depth_init=2.5, c0=64):
        levels = int(np.log2(patch))
        if 2 ** levels != patch:
            raise ConfigurationError(f"patch size {patch} is not a power of two")
        self.proj = Linear(rng, d_model, c0)
        widths = _upsample_channels(c0, levels)
        self.ups = [ConvTranspose2d(rng, widths[i], widths[i + 1])
                    for i in range(levels)]
        self.final = Conv2d(rng, widths[-1], 1)
        self.final.b.data[:] = np.log(depth_init)

    def __call__(self, feat):
        hp, wp = feat.grid
        x = self.proj(feat.tokens)
        x = ops.transpose(ops.reshape(x, (hp, wp, x.shape[1])), (2, 0, 1))
        for up in self.ups:
            x = ops.gelu(up(x))
        raw = ops.clamp(self.final(x), -6.0, 6.0)
        return ops.reshape(ops.exp(raw), raw.shape[1:])


class ParamHead(Module):
    """Token grid + detail grid + image skip -> pre-activation parameters.

    Output channels: 3 log-scales, 4 quaternion, 1 opacity logit, 3 color
    residual (added to the image before returning), D feature. Group biases
    start the head at isotropic pixel-scale Gaussians with identity
    rotation, moderate opacity, and the input image as color.
    """

    def __init__(self, rng, d_model, patch, c_detail, feature_dim, c0=64,
                 scale_bias=-4.5, opacity_bias=-0.85):
        levels = int(np.log2(patch))
        if 2 ** levels != patch:
            raise ConfigurationError(f"patch size {patch} is not a power of two")
        if levels < 2:
            raise ConfigurationError("patch size must be >= 4 for the detail stage")
        self.feature_dim = feature_dim
        self.proj = Linear(rng, d_model, c0)
        widths = _upsample_channels(c0, levels)
        # Detail features arrive at 1/8 of the 2x-resolution detail input,
        # i.e. patch/4 times the token grid; merge where the upsample chain
        # reaches that resolution (-1 = at the token grid itself).
        self.merge_after = levels - 3
        merge_w = widths[self.merge_after + 1]
        self.merge = Conv2d(rng, merge_w + c_detail, merge_w)
        self.ups = [ConvTranspose2d(rng, widths[i], widths[i + 1])
                    for i in range(levels)]
        self.skip = Conv2d(rng, widths[-1] + 3, widths[-1])
        self.final = Conv2d(rng, widths[-1], 11 + feature_dim)
        b = self.final.b.data
        b[0:3] = scale_bias
        b[3:7] = [1.0, 0.0, 0.0, 0.0]
        b[7] = opacity_bias
        b[8:] = 0.0

    def _merge_detail(self, x, detail):
        if detail.shape[1:] != x.shape[1:]:
            raise ContractError(
                f"detail grid {detail.shape} is misaligned with the "
                f"{tuple(x.shape)} head stage")
        return ops.gelu(self.merge(ops.concat([x, detail], axis=0)))

    def __call__(self, feat, detail, image):
        hp, wp = feat.grid
        x = self.proj(feat.tokens)
        x = ops.transpose(ops.reshape(x, (hp, wp, x.shape[1])), (2, 0, 1))
        if self.merge_after == -1:
            x = self._merge_detail(x, detail)
        for i, up in enumerate(self.ups):
            x = ops.gelu(up(x))
            if i == self.merge_after:
                x = self._merge_detail(x, detail)
        image = ops.as_tensor(image)
        if image.shape[1:] != x.shape[1:]:
            raise ContractError(
                f"image {image.shape} does not match head output {tuple(x.shape)}")
        x = ops.gelu(self.skip(ops.concat([x, image], axis=0)))
        out = self.final(x)
        return {
            "scale_raw": out[0:3],
            "quat_raw": out[3:7],
            "opacity_raw": ops.reshape(out[7:8], out.shape[1:]),
            "color": ops.add(image, out[8:11]),
            "feature": out[11:],
        }


class Backbone(Module):
    """Shared-weight per-view encoder + cross-view decoder + heads."""

    def __init__(self, rng, image_hw, patch=PATCH, d_model=D_MODEL,
                 n_heads=N_HEADS, n_enc=N_ENC, n_dec=N_DEC,
                 c_detail=8, feature_dim=8, depth_init=2.5,
                 scale_bias=-4.5, opacity_bias=-0.85):
        self.image_hw = tuple(image_hw)
        self.patch = patch
        self.embed = PatchEmbed(rng, image_hw, patch, d_model)
        self.intr_proj = Linear(rng, 4, d_model)
        self.enc_blocks = [TransformerBlock(rng, d_model, n_heads)
                           for _ in range(n_enc)]
        self.dec_blocks = [DecoderBlock(rng, d_model, n_heads)
                           for _ in range(n_dec)]
        self.depth = DepthHead(rng, d_model, patch, depth_init=depth_init)
        self.params = ParamHead(rng, d_model, patch, c_detail, feature_dim,
                                scale_bias=scale_bias, opacity_bias=opacity_bias)

    def patchify(self, image, view_id=0):
        return TokenSequence(self.embed(image), view_id, self.embed.grid)

    def intrinsics_token(self, cam):
        """1 x d_model token from dimensionless intrinsics [fx/W, fy/H, cx/W, cy/H].

        The normalization is a fixed diagonal rescale folded in front of the
        linear map, so this is still a deterministic linear function of
        (fx, fy, cx, cy).
        """
        vec = np.array([[cam.fx / cam.width, cam.fy / cam.height,
                         cam.cx / cam.width, cam.cy / cam.height]])
        return self.intr_proj(dc.Tensor(vec.astype(dc.default_dtype())))

    def encode(self, seq, intr):
        x = ops.add(seq.tokens, intr)
        for blk in self.enc_blocks:
            x = blk(x)
        return TokenSequence(x, seq.view_id, seq.grid)

    def decode_crossview(self, seqs):
        if not seqs:
            raise ContractError("decode_crossview needs at least one view")
        views = [s.tokens for s in seqs]
        for blk in self.dec_blocks:
            views = blk(views)
        return [GlobalFeatures(t, s.grid) for t, s in zip(views, seqs)]

    def encode_views(self, images, cams):
        """Full trunk for a list of views: patchify + encode + decode."""
        if len(images) != len(cams):
            raise ContractError(
                f"{len(images)} images but {len(cams)} cameras")
        seqs = [self.encode(self.patchify(img, i), self.intrinsics_token(cam))
                for i, (img, cam) in enumerate(zip(images, cams))]
        return self.decode_crossview(seqs)
