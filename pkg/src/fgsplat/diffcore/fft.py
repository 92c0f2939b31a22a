"""2D FFT on power-of-two grids, differentiable through the tape.

The kernel is an iterative radix-2 Cooley-Tukey transform vectorized over
rows. Convention: the forward transform is unnormalized and the inverse
carries the full 1/(H*W) factor, so a constant grid of value c maps to a DC
bin of c*H*W. Because the DFT is linear, the backward pass of ``fft2`` is
its Hermitian adjoint (an unnormalized inverse transform of the upstream
gradient), and symmetrically for ``ifft2``.

Complex spectra travel as a pair of real tensors (``ComplexGrid``); the
autodiff engine stays real-valued throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, NumericError
from .tensor import Tensor, _op_output, record_op
from . import ops


def _check_pow2(n, axis_name):
    if n < 1 or (n & (n - 1)) != 0:
        raise ConfigurationError(
            f"fft requires power-of-two dimensions; axis {axis_name!r} has size {n}")


def _bit_reverse_perm(n):
    """Bit-reversal permutation of 0..n-1 (n a power of two)."""
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft1d(a, inverse):
    """Radix-2 FFT along the last axis of a complex array. Unnormalized."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    a = a[..., _bit_reverse_perm(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size).astype(a.dtype)
        b = a.reshape(a.shape[:-1] + (n // size, size))
        u = b[..., :half]
        v = b[..., half:] * tw
        a = np.concatenate([u + v, u - v], axis=-1).reshape(a.shape)
        size *= 2
    return a


def _fft2_raw(z, inverse):
    """Unnormalized 2D transform of a complex (H, W) array."""
    z = _fft1d(z, inverse)
    z = _fft1d(z.swapaxes(-1, -2), inverse).swapaxes(-1, -2)
    return np.ascontiguousarray(z)


def _complex_dtype(real_dtype):
    return np.complex128 if real_dtype == np.float64 else np.complex64


@dataclass
class ComplexGrid:
    """A complex (H, W) spectrum as separate real and imaginary tensors."""

    real: Tensor
    imag: Tensor

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self):
        """Plain complex ndarray of the current values."""
        return self.real.data + 1j * self.imag.data

    @staticmethod
    def from_complex(z, requires_grad=False):
        return ComplexGrid(Tensor(z.real.copy(), requires_grad=requires_grad),
                           Tensor(z.imag.copy(), requires_grad=requires_grad))


def fft2(x):
    """Unnormalized 2D DFT of a real (H, W) tensor -> ComplexGrid."""
    x = ops.as_tensor(x)
    if x.ndim != 2:
        raise ConfigurationError(f"fft2 expects a 2D tensor, got shape {x.shape}")
    h, w = x.shape
    _check_pow2(h, "height")
    _check_pow2(w, "width")
    cdtype = _complex_dtype(x.data.dtype)
    z = _fft2_raw(x.data.astype(cdtype), inverse=False)
    out_re = _op_output(np.ascontiguousarray(z.real))
    out_im = _op_output(np.ascontiguousarray(z.imag))

    def bwd(gs):
        gre = gs[0] if gs[0] is not None else np.zeros((h, w), dtype=x.data.dtype)
        gim = gs[1] if gs[1] is not None else np.zeros((h, w), dtype=x.data.dtype)
        g = gre.astype(cdtype) + 1j * gim.astype(cdtype)
        gx = _fft2_raw(g, inverse=True).real.astype(x.data.dtype)
        return ((x, gx),)

    record_op("fft2", (x,), (out_re, out_im), bwd)
    return ComplexGrid(out_re, out_im)


def ifft2(grid):
    """Normalized inverse 2D DFT of a ComplexGrid -> real (H, W) tensor.

    The imaginary residue of the reconstruction is discarded after checking
    that its max magnitude does not exceed 1e-4 * max|Re(x)|.
    """
    re, im = ops.as_tensor(grid.real), ops.as_tensor(grid.imag)
    if re.shape != im.shape:
        raise ConfigurationError(
            f"ifft2 real/imag shape mismatch: {re.shape} vs {im.shape}")
    if re.ndim != 2:
        raise ConfigurationError(f"ifft2 expects 2D grids, got shape {re.shape}")
    h, w = re.shape
    _check_pow2(h, "height")
    _check_pow2(w, "width")
    cdtype = _complex_dtype(re.data.dtype)
    z = _fft2_raw(re.data.astype(cdtype) + 1j * im.data.astype(cdtype), inverse=True) / (h * w)
    residue = float(np.max(np.abs(z.imag))) if z.size else 0.0
    bound = 1e-4 * float(np.max(np.abs(z.real)))
    if residue > bound:
        raise NumericError(
            f"ifft2 imaginary residue {residue:.3e} exceeds 1e-4 * max|x| = {bound:.3e}; "
            "spectrum is not Hermitian")
    out = _op_output(np.ascontiguousarray(z.real.astype(re.data.dtype)))

    def bwd(gs):
        d = _fft2_raw(gs[0].astype(cdtype), inverse=False) / (h * w)
        return ((re, d.real.astype(re.data.dtype)),
                (im, d.imag.astype(im.data.dtype)))

    record_op("ifft2", (re, im), (out,), bwd)
    return out


def fftfreq_grid(h, w):
    """Normalized frequency coordinates (u, v) in [-0.5, 0.5) per bin.

    Returns an (H*W, 2) float array in row-major bin order, matching the
    layout of a flattened spectrum.
    """
    fu = (np.arange(h) + h // 2) % h - h // 2
    fv = (np.arange(w) + w // 2) % w - w // 2
    u = np.repeat(fu / h, w)
    v = np.tile(fv / w, h)
    return np.stack([u, v], axis=1)
