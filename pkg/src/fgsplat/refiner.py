"""One-step feature-guided refiner.

A deterministic conv autoencoder (no sampling, no KL term) maps images to a
1/8-resolution latent; a small U-Net denoises that latent in a single
forward pass and the decoder maps the result back to image space. Guidance
enters in two ways: rendered Gaussian feature maps are concatenated to each
view's latent on the channel axis before the U-Net, and the bottleneck runs
joint self-attention over the tokens of every view so reference views can
lend detail to the target.

Two zero-initializations make the untrained refiner exactly transparent:
the first U-Net conv's columns for the guidance channels start at zero, so
the output cannot depend on the feature maps before training, and the final
U-Net conv starts at zero with its output added to the input latent, so the
untrained U-Net is the identity and the whole refiner reduces to
decoder(encoder(target)).
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ops
from .diffcore.module import Module
from .errors import ContractError
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Mlp, MultiHeadAttention

DEFAULT_C_LAT = 8
DEFAULT_UNET_BASE = 32
DEFAULT_UNET_HEADS = 4
LATENT_FACTOR = 8


def _check_image(image, what="image"):
    image = ops.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"{what} must be (3, H, W), got {image.shape}")
    _, h, w = image.shape
    if h % LATENT_FACTOR or w % LATENT_FACTOR:
        raise ContractError(
            f"{what} dims {h}x{w} not divisible by {LATENT_FACTOR}")
    return image


def feature_concat(f_r, f_g):
    """Concatenate a latent with a rendered feature map on the channel axis.

    Both inputs are (C, h, w) grids at the same spatial resolution; the
    output keeps the latent channels first so fused[: C_lat] == f_r.
    """
    f_r, f_g = ops.as_tensor(f_r), ops.as_tensor(f_g)
    if f_r.ndim != 3 or f_g.ndim != 3:
        raise ContractError(
            f"feature_concat expects (C, h, w) grids, got {f_r.shape} and {f_g.shape}")
    if f_r.shape[1:] != f_g.shape[1:]:
        raise ContractError(
            f"latent/feature grids are misaligned: latent {f_r.shape} vs "
            f"feature {f_g.shape}")
    return ops.concat([f_r, f_g], axis=0)


def _pad_to_multiple(x, m):
    """Zero-pad the bottom/right of (C, h, w) so both dims divide by m."""
    c, h, w = x.shape
    ph, pw = (-h) % m, (-w) % m
    if ph:
        x = ops.concat([x, dc.Tensor(np.zeros((c, ph, w)))], axis=1)
    if pw:
        x = ops.concat([x, dc.Tensor(np.zeros((c, h + ph, pw)))], axis=2)
    return x


class LatentEncoder(Module):
    """Three stride-2 conv blocks, 3 -> 32 -> 64 -> c_lat channels.

    Deterministic: the same image always maps to the same latent. The last
    block has no activation so the latent is unconstrained.
    """

    def __init__(self, rng, c_lat=DEFAULT_C_LAT):
        self.c_lat = int(c_lat)
        self.conv1 = Conv2d(rng, 3, 32, stride=2)
        self.conv2 = Conv2d(rng, 32, 64, stride=2)
        self.conv3 = Conv2d(rng, 64, self.c_lat, stride=2)

    def __call__(self, image):
        image = _check_image(image)
        x = ops.gelu(self.conv1(image))
        x = ops.gelu(self.conv2(x))
        return self.conv3(x)


class LatentDecoder(Module):
    """Mirror of the encoder: three stride-2 transposed conv blocks."""

    def __init__(self, rng, c_lat=DEFAULT_C_LAT):
        self.c_lat = int(c_lat)
        self.up1 = ConvTranspose2d(rng, self.c_lat, 64)
        self.up2 = ConvTranspose2d(rng, 64, 32)
        self.up3 = ConvTranspose2d(rng, 32, 3)

    def __call__(self, latent):
        latent = ops.as_tensor(latent)
        if latent.ndim != 3 or latent.shape[0] != self.c_lat:
            raise ContractError(
                f"latent must be ({self.c_lat}, h, w), got {latent.shape}")
        x = ops.gelu(self.up1(latent))
        x = ops.gelu(self.up2(x))
        return self.up3(x)


class GuidedUNet(Module):
    """Two-down/two-up latent U-Net with a cross-view attention bottleneck.

    Input is one fused (c_lat + c_guidance, h, w) grid per view; output is
    one (c_lat, h, w) residual-corrected latent per view. The bottleneck
    flattens every view's grid to tokens and runs one self-attention block
    over the joint token set, which is the only place views interact.

    Grids whose dims do not divide by 4 are zero-padded bottom/right before
    the down path and the residual is cropped back, so any latent produced
    from a divisible-by-8 image is accepted.
    """

    def __init__(self, rng, c_lat=DEFAULT_C_LAT, c_guidance=DEFAULT_C_LAT,
                 base=DEFAULT_UNET_BASE, n_heads=DEFAULT_UNET_HEADS):
        self.c_lat = int(c_lat)
        self.c_guidance = int(c_guidance)
        self.conv_in = Conv2d(rng, self.c_lat + self.c_guidance, base)
        if self.c_guidance:
            # Guidance columns start at exactly zero: before training the
            # output is bitwise independent of the feature maps.
            self.conv_in.w.data[:, self.c_lat:] = 0.0
        self.down1 = Conv2d(rng, base, 2 * base, stride=2)
        self.down2 = Conv2d(rng, 2 * base, 4 * base, stride=2)
        self.norm1 = LayerNorm(4 * base)
        self.attn = MultiHeadAttention(rng, 4 * base, n_heads)
        self.norm2 = LayerNorm(4 * base)
        self.mlp = Mlp(rng, 4 * base, 8 * base)
        self.up1 = ConvTranspose2d(rng, 4 * base, 2 * base)
        self.fuse1 = Conv2d(rng, 4 * base, 2 * base)
        self.up2 = ConvTranspose2d(rng, 2 * base, base)
        self.fuse2 = Conv2d(rng, 2 * base, base)
        self.conv_out = Conv2d(rng, base, self.c_lat, zero_init=True)
        self.forward_count = 0

    def mixed_attention(self, grids, reference_mask=None):
        """Joint self-attention over the tokens of every view's grid.

        grids: list of (C, h, w) tensors, one per view, same shape. Each
        spatial position becomes a C-dim token; queries always come from
        all V*h*w tokens. reference_mask is an optional (V,) bool array
        marking views whose tokens are excluded from the key/value set
        (masking every view but one reproduces per-view attention for that
        view). Returns the attended grids in the same layout.
        """
        v = len(grids)
        if v < 1:
            raise ContractError("mixed_attention needs at least one view")
        c, h, w = grids[0].shape
        toks = [ops.transpose(ops.reshape(g, (c, h * w)), (1, 0)) for g in grids]
        x = ops.concat(toks, axis=0) if v > 1 else toks[0]
        key_mask = None
        if reference_mask is not None:
            reference_mask = np.asarray(reference_mask, dtype=bool)
            if reference_mask.shape != (v,):
                raise ContractError(
                    f"reference_mask shape {reference_mask.shape} does not "
                    f"match {v} views")
            key_mask = np.repeat(~reference_mask, h * w)
        n = self.norm1(x)
        x = ops.add(x, self.attn(n, n, key_mask=key_mask))
        x = ops.add(x, self.mlp(self.norm2(x)))
        out = []
        for i in range(v):
            sl = ops.index(x, slice(i * h * w, (i + 1) * h * w))
            out.append(ops.reshape(ops.transpose(sl, (1, 0)), (c, h, w)))
        return out

    def __call__(self, fused, reference_mask=None):
        self.forward_count += 1
        if not fused:
            raise ContractError("GuidedUNet needs at least one view")
        c_in = self.c_lat + self.c_guidance
        shapes = {tuple(z.shape) for z in map(ops.as_tensor, fused)}
        if len(shapes) != 1:
            raise ContractError(f"fused latents disagree on shape: {sorted(shapes)}")
        fused = [ops.as_tensor(z) for z in fused]
        if fused[0].shape[0] != c_in:
            raise ContractError(
                f"fused latent has {fused[0].shape[0]} channels, expected "
                f"{self.c_lat} latent + {self.c_guidance} guidance")
        _, h, w = fused[0].shape

        enc0, enc1, enc2 = [], [], []
        for z in fused:
            zp = _pad_to_multiple(z, 4)
            e0 = ops.gelu(self.conv_in(zp))
            e1 = ops.gelu(self.down1(e0))
            e2 = ops.gelu(self.down2(e1))
            enc0.append(e0)
            enc1.append(e1)
            enc2.append(e2)

        mids = self.mixed_attention(enc2, reference_mask)

        out = []
        for z, e0, e1, mid in zip(fused, enc0, enc1, mids):
            u1 = ops.gelu(self.fuse1(ops.concat([self.up1(mid), e1], axis=0)))
            u2 = ops.gelu(self.fuse2(ops.concat([self.up2(u1), e0], axis=0)))
            res = self.conv_out(u2)
            res = ops.index(res, (slice(None), slice(0, h), slice(0, w)))
            f_r = ops.index(z, (slice(0, self.c_lat),))
            out.append(ops.add(f_r, res))
        return out


class OneStepRefiner(Module):
    """Encoder + guided U-Net + decoder; one U-Net forward per refinement.

    ``denoise`` encodes the rendered target together with the reference
    input views, concatenates each view's latent with that view's rendered
    Gaussian feature map, runs the U-Net once over all views jointly, and
    decodes only the target-view latent. There is no iterative sampling and
    no timestep conditioning.
    """

    def __init__(self, rng, c_lat=DEFAULT_C_LAT, c_guidance=DEFAULT_C_LAT,
                 base=DEFAULT_UNET_BASE, n_heads=DEFAULT_UNET_HEADS):
        self.encoder = LatentEncoder(rng, c_lat)
        self.unet = GuidedUNet(rng, c_lat, c_guidance, base, n_heads)
        self.decoder = LatentDecoder(rng, c_lat)

    def denoise(self, target, refs=(), f_g_target=None, f_g_refs=(),
                reference_mask=None):
        """Refine one rendered target image. Returns (3, H, W).

        target: rendered target view; refs: reference input views at the
        same resolution; f_g_target / f_g_refs: per-view Gaussian feature
        maps at 1/8 resolution, channel-first, or None for zeros.
        """
        images = [_check_image(target, "target")]
        for i, r in enumerate(refs):
            r = _check_image(r, f"reference {i}")
            if r.shape != images[0].shape:
                raise ContractError(
                    f"reference {i} resolution {r.shape} does not match "
                    f"target {images[0].shape}")
            images.append(r)
        f_g_refs = list(f_g_refs)
        if f_g_target is None and not f_g_refs:
            feats = [None] * len(images)  # no guidance at all -> zeros
        else:
            feats = [f_g_target, *f_g_refs]
            if len(feats) != len(images):
                raise ContractError(
                    f"{len(images) - 1} reference views but {len(feats) - 1} "
                    f"reference feature maps")

        _, h, w = images[0].shape
        hl, wl = h // LATENT_FACTOR, w // LATENT_FACTOR
        cg = self.unet.c_guidance
        fused = []
        for img, fg in zip(images, feats):
            f_r = self.encoder(img)
            if cg == 0:
                fused.append(f_r)
                continue
            if fg is None:
                fg = dc.Tensor(np.zeros((cg, hl, wl)))
            fused.append(feature_concat(f_r, fg))
        latents = self.unet(fused, reference_mask=reference_mask)
        return self.decoder(latents[0])
