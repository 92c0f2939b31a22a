"""Dual-domain detail perception.

Two branches read the full-resolution image (channel-first, (3, H, W) with
power-of-two H and W): a frequency branch that keeps only the top-k spectral
bins under a learned importance score and modulates them with learned
complex weights, and a small stride-8 CNN over the spatial domain. Both are
pooled/strided to 1/8 resolution and fused into a detail feature grid whose
cell (i, j) lines up with backbone token (i, j).

Scores depend only on the normalized bin coordinates, so one selection mask
is shared by all channels of an image. Selection itself is hard and
non-differentiable; gradients reach the score MLP because every retained
bin is scaled by (1 + score), and reach the modulation table through the
complex weights. The modulated spectrum is Hermitian-symmetrized (each bin
averaged with the conjugate of its mirror bin) so the inverse transform is
real for any learned weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import fft, ops
from .diffcore.module import Module, param, zeros_param
from .errors import ConfigurationError, ContractError
from .nn import Conv2d, Linear

DEFAULT_K_FRACTION = 0.25
DEFAULT_C_DETAIL = 8
MOD_SLOTS = 64
POOL_FACTOR = 8


@dataclass
class DetailFeatures:
    """Fused detail grid aligned to the backbone token grid."""

    grid: dc.Tensor  # (C_detail, H_hi/8, W_hi/8)

    def __post_init__(self):
        if not np.all(np.isfinite(self.grid.data)):
            raise ContractError("detail feature grid contains NaN/Inf")


def _mirror_perm(h, w):
    """Flat index of bin (-u, -v) for each bin (u, v) in row-major order."""
    ii = (-np.arange(h)) % h
    jj = (-np.arange(w)) % w
    return (ii[:, None] * w + jj[None, :]).reshape(-1)


class FrequencySelector(Module):
    """Importance-scored top-k spectral gate with per-rank modulation.

    The score MLP maps each bin's normalized (u, v) in [-0.5, 0.5)^2 to a
    scalar; its output layer starts at zero so the initial gate is exactly
    (1 + 0) * (1 + 0i) and the k_fraction=1 configuration is the identity.
    Modulation weights live in a fixed table of MOD_SLOTS complex slots
    indexed by retained rank (rank r of n_keep uses slot
    floor(r * MOD_SLOTS / n_keep)), so the parameter count is independent
    of the image resolution and of k_fraction.
    """

    def __init__(self, rng, k_fraction=DEFAULT_K_FRACTION, hidden=32):
        if not 0.0 < k_fraction <= 1.0:
            raise ConfigurationError(
                f"k_fraction must be in (0, 1], got {k_fraction}")
        self.k_fraction = float(k_fraction)
        self.fc1 = Linear(rng, 2, hidden)
        self.fc2 = Linear(rng, hidden, 1, zero_init=True)
        self.mod_real = param(np.ones(MOD_SLOTS))
        self.mod_imag = zeros_param((MOD_SLOTS,))

    def n_keep(self, h, w):
        n = int(np.ceil(self.k_fraction * h * w))
        if n <= 0:
            raise ConfigurationError(
                f"k_fraction {self.k_fraction} keeps 0 of {h * w} bins")
        return n

    def scores(self, h, w):
        """Importance score per bin, flat (H*W,) in spectrum order."""
        coords = dc.Tensor(fft.fftfreq_grid(h, w).astype(dc.default_dtype()))
        s = self.fc2(ops.gelu(self.fc1(coords)))
        return ops.reshape(s, (h * w,))

    def select(self, h, w):
        """Hard top-k over scores: (flat bin indices, gate tensor).

        The gate is (1 + score) per retained bin; ties in the score break
        toward the lower flat index, so the mask is deterministic.
        """
        s = self.scores(h, w)
        keep = self.n_keep(h, w)
        idx = ops.topk_indices(s, keep)
        gate = ops.add(1.0, ops.take_flat(s, idx))
        return idx, gate


def frequency_filter(selector, image):
    """Spectral top-k filtering of a (3, H, W) image at full resolution.

    Per-channel FFT with one shared selection mask; retained bin at rank r
    is multiplied by gate_r * mod[slot(r)], scattered back into a zero
    spectrum, Hermitian-symmetrized, and inverse-transformed. In the
    identity configuration (every bin retained, zero scores, unit
    modulation) this reproduces the input.
    """
    image = ops.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"frequency_filter expects (3, H, W), got {image.shape}")
    _, h, w = image.shape
    idx, gate = selector.select(h, w)
    slots = (np.arange(idx.size) * MOD_SLOTS) // idx.size
    wr = ops.mul(gate, ops.gather(selector.mod_real, slots, axis=0))
    wi = ops.mul(gate, ops.gather(selector.mod_imag, slots, axis=0))
    mirror = _mirror_perm(h, w)

    chans = []
    for c in range(3):
        z = fft.fft2(image[c])
        zr = ops.take_flat(z.real, idx)
        zi = ops.take_flat(z.imag, idx)
        mr = ops.scatter_flat(ops.sub(ops.mul(zr, wr), ops.mul(zi, wi)), idx, h * w)
        mi = ops.scatter_flat(ops.add(ops.mul(zr, wi), ops.mul(zi, wr)), idx, h * w)
        sym_r = ops.mul(0.5, ops.add(mr, ops.gather(mr, mirror, axis=0)))
        sym_i = ops.mul(0.5, ops.sub(mi, ops.gather(mi, mirror, axis=0)))
        grid = fft.ComplexGrid(ops.reshape(sym_r, (h, w)), ops.reshape(sym_i, (h, w)))
        chans.append(fft.ifft2(grid))
    return ops.stack(chans, axis=0)


def frequency_branch(selector, image):
    """frequency_filter pooled 1/8 to the detail grid resolution."""
    return ops.avg_pool2d(frequency_filter(selector, image), POOL_FACTOR)


class SpatialBranch(Module):
    """Three stride-2 convs (3 -> 16 -> 32 -> C_detail) with gelu."""

    def __init__(self, rng, c_detail=DEFAULT_C_DETAIL):
        self.conv1 = Conv2d(rng, 3, 16, stride=2)
        self.conv2 = Conv2d(rng, 16, 32, stride=2)
        self.conv3 = Conv2d(rng, 32, c_detail, stride=2)

    def __call__(self, image):
        x = ops.gelu(self.conv1(image))
        x = ops.gelu(self.conv2(x))
        return ops.gelu(self.conv3(x))


class DetailModule(Module):
    """DD-DPM: frequency and spatial branches fused to a detail grid.

    With ``use_frequency=False`` the module degrades to its CNN-only
    ablation: the frequency channels of the fusion input are zeros, so the
    fusion weights keep the same shape in every preset.
    """

    def __init__(self, rng, c_detail=DEFAULT_C_DETAIL,
                 k_fraction=DEFAULT_K_FRACTION, use_frequency=True):
        self.c_detail = c_detail
        self.use_frequency = bool(use_frequency)
        self.selector = FrequencySelector(rng, k_fraction)
        self.spatial = SpatialBranch(rng, c_detail)
        self.fuse = Conv2d(rng, 3 + c_detail, c_detail, k=1)

    def __call__(self, image):
        spat = self.spatial(image)
        if self.use_frequency:
            freq = frequency_branch(self.selector, image)
        else:
            freq = dc.Tensor(np.zeros((3,) + tuple(spat.shape[1:]),
                                      dtype=spat.data.dtype))
        return DetailFeatures(ddpm_fuse(freq, spat, self.fuse))


def ddpm_fuse(freq, spat, proj):
    """Concatenate the two detail grids and project with a 1x1 conv."""
    freq, spat = ops.as_tensor(freq), ops.as_tensor(spat)
    if freq.shape[1:] != spat.shape[1:]:
        raise ContractError(
            f"detail grids are misaligned: frequency {freq.shape} vs "
            f"spatial {spat.shape}")
    return proj(ops.concat([freq, spat], axis=0))
