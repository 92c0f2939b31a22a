"""Loss suite and image metrics.

Reconstruction and refinement losses pair MSE with a perceptual distance;
the adversarial pair trains a small discriminator on frozen deep features.
The perceptual distance and the discriminator's feature extractor share one
``PerceptualProxy``: a 4-layer conv stack whose random weights are fixed at
construction and never trained. Random deep features are a serviceable
stand-in for a pretrained perceptual network at this scale, and keeping the
substitution behind one class localizes it.

Sign conventions: ``gan_loss`` returns the discriminator objective exactly
as the algebra defines it, lambda5 * (E[log D(real)] + E[log(1 - D(fake))]),
which the discriminator ascends (the trainer minimizes its negation), and
the non-saturating generator term -lambda5 * E[log D(fake)], which the
generator descends. Probabilities are clamped to [1e-6, 1 - 1e-6] before
any log.

PSNR and SSIM are evaluation metrics on plain arrays; they are not
differentiable and never enter a training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffcore as dc
from .diffcore import ops
from .diffcore.module import Module, conv_init
from .errors import ConfigurationError, ContractError
from .nn import Conv2d, Linear

PROB_EPS = 1e-6
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    """Weights for the individual loss terms and their combination."""

    lambda1: float = 1.0    # MSE in the reconstruction loss
    lambda2: float = 0.05   # perceptual in the reconstruction loss
    lambda3: float = 1.0    # MSE in the refinement loss
    lambda4: float = 0.05   # perceptual in the refinement loss
    lambda5: float = 1.0    # inside the adversarial expectations
    lambda_r: float = 1.0   # reconstruction term in the total
    lambda_d: float = 1.0   # refinement term in the total
    lambda_g: float = 0.05  # adversarial term in the total

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ConfigurationError(
                    f"loss weight {f.name} must be a non-negative finite "
                    f"number, got {v}")


DEFAULT_WEIGHTS = LossWeights()


def _check_pair(a, b, what):
    a, b = ops.as_tensor(a), ops.as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(
            f"{what} expects matching shapes, got {a.shape} vs {b.shape}")
    return a, b


# -- perceptual proxy ------------------------------------------------------

class PerceptualProxy(Module):
    """Frozen random 4-layer conv feature stack with calibrated layer scales.

    Weights are created once from the seed and marked non-trainable, so the
    proxy never appears in an optimizer's parameter list and its state is
    bitwise reproducible. The distance is LPIPS-shaped: features at every
    layer are unit-normalized along the channel axis and compared by MSE,
    and each layer's contribution is divided by its expected value on
    unrelated noise images (computed at construction from the same seed) so
    no single layer dominates.
    """

    CHANNELS = (16, 32, 64, 64)
    STRIDES = (1, 2, 2, 2)

    def __init__(self, seed=0):
        g = np.random.default_rng(seed)
        self.weights = []
        c_prev = 3
        for c, _ in zip(self.CHANNELS, self.STRIDES):
            w = conv_init(g, c, c_prev, 3)
            w.requires_grad = False
            self.weights.append(w)
            c_prev = c
        self._layer_scale = np.ones(len(self.weights))
        self._layer_scale = 1.0 / self._calibrate(g)

    def _calibrate(self, g, pairs=3, size=32):
        with dc.no_grad():
            raw = np.zeros(len(self.weights))
            for _ in range(pairs):
                a = dc.Tensor(g.random((3, size, size)))
                b = dc.Tensor(g.random((3, size, size)))
                raw += [d.item() for d in self._layer_distances(a, b)]
        return raw / pairs

    def features(self, image):
        image = ops.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(
                f"PerceptualProxy expects a (3, H, W) image, got {image.shape}")
        feats = []
        x = image
        for w, s in zip(self.weights, self.STRIDES):
            x = ops.relu(ops.conv2d(x, w, stride=s))
            feats.append(x)
        return feats

    def _layer_distances(self, a, b):
        dists = []
        for fa, fb in zip(self.features(a), self.features(b)):
            na = ops.l2_normalize(fa, axis=0)
            nb = ops.l2_normalize(fb, axis=0)
            dists.append(ops.mean_(ops.square(ops.sub(na, nb))))
        return dists

    def distance(self, a, b):
        """Mean scaled feature-space MSE; symmetric, zero iff features match."""
        a, b = _check_pair(a, b, "perceptual distance")
        dists = self._layer_distances(a, b)
        total = ops.mul(dists[0], float(self._layer_scale[0]))
        for d, s in zip(dists[1:], self._layer_scale[1:]):
            total = ops.add(total, ops.mul(d, float(s)))
        return ops.mul(total, 1.0 / len(dists))


# -- reconstruction / refinement losses ------------------------------------

def loss_r(i_r, i_hat, proxy, weights=DEFAULT_WEIGHTS):
    """Rendered-image loss: lambda1 * MSE + lambda2 * perceptual."""
    i_r, i_hat = _check_pair(i_r, i_hat, "loss_r")
    out = ops.mul(ops.mse(i_r, i_hat), weights.lambda1)
    if weights.lambda2:
        out = ops.add(out, ops.mul(proxy.distance(i_r, i_hat), weights.lambda2))
    return out


def loss_d(i_d, i_hat, proxy, weights=DEFAULT_WEIGHTS):
    """Refined-image loss: lambda3 * MSE + lambda4 * perceptual."""
    i_d, i_hat = _check_pair(i_d, i_hat, "loss_d")
    out = ops.mul(ops.mse(i_d, i_hat), weights.lambda3)
    if weights.lambda4:
        out = ops.add(out, ops.mul(proxy.distance(i_d, i_hat), weights.lambda4))
    return out


def total_loss(l_r, l_d, l_g, weights=DEFAULT_WEIGHTS):
    """Fixed linear combination lambda_r*L_r + lambda_d*L_d + lambda_g*L_g."""
    out = ops.mul(ops.as_tensor(l_r), weights.lambda_r)
    out = ops.add(out, ops.mul(ops.as_tensor(l_d), weights.lambda_d))
    return ops.add(out, ops.mul(ops.as_tensor(l_g), weights.lambda_g))


# -- adversarial pair ------------------------------------------------------

class Discriminator(Module):
    """Probability head over frozen proxy features.

    Reads the deepest proxy feature map, applies two strided convs, pools
    globally, and maps to a single sigmoid probability. Only the head is
    trainable; the extractor inside ``proxy`` stays frozen.
    """

    def __init__(self, rng, proxy):
        self.proxy = proxy
        c = proxy.CHANNELS[-1]
        self.conv1 = Conv2d(rng, c, 32, stride=2)
        self.conv2 = Conv2d(rng, 32, 16, stride=2)
        self.fc = Linear(rng, 16, 1)

    def __call__(self, image):
        f = self.proxy.features(image)[-1]
        h = ops.relu(self.conv1(f))
        h = ops.relu(self.conv2(h))
        pooled = ops.reshape(ops.mean_(h, axis=(1, 2)), (1, 16))
        return ops.reshape(ops.sigmoid(self.fc(pooled)), ())


def _mean_scalar(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def gan_loss(real_batch, fake_batch, disc, weights=DEFAULT_WEIGHTS):
    """Adversarial terms for one batch pair.

    real_batch / fake_batch: non-empty sequences of (3, H, W) images.
    Returns {"discriminator": lambda5 * (E[log D(real)] + E[log(1-D(fake))]),
    "generator": -lambda5 * E[log D(fake)]}. The discriminator ascends its
    term (minimize the negation); the generator descends its term.
    """
    real_batch, fake_batch = list(real_batch), list(fake_batch)
    if not real_batch or not fake_batch:
        raise ContractError("gan_loss needs non-empty real and fake batches")
    d_real = [ops.clamp(disc(i), PROB_EPS, 1.0 - PROB_EPS) for i in real_batch]
    d_fake = [ops.clamp(disc(i), PROB_EPS, 1.0 - PROB_EPS) for i in fake_batch]
    log_real = _mean_scalar([ops.log(p) for p in d_real])
    log_one_minus = _mean_scalar(
        [ops.log(ops.sub(dc.Tensor(1.0), p)) for p in d_fake])
    log_fake = _mean_scalar([ops.log(p) for p in d_fake])
    return {
        "discriminator": ops.mul(ops.add(log_real, log_one_minus),
                                 weights.lambda5),
        "generator": ops.mul(log_fake, -weights.lambda5),
    }


# -- metrics ---------------------------------------------------------------

def _metric_input(x, what):
    if isinstance(x, dc.Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"{what} expects (H, W) or (C, H, W), got {x.shape}")
    return x


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a, b = _metric_input(a, "psnr"), _metric_input(b, "psnr")
    if a.shape != b.shape:
        raise ContractError(f"psnr expects matching shapes, got {a.shape} vs {b.shape}")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    if rmse <= 10.0 ** (-PSNR_CAP / 20.0):
        return PSNR_CAP
    return 20.0 * np.log10(1.0 / rmse)


def _ssim_window():
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), K1/K2 std.

    Channel maps are computed independently and averaged. Images must be at
    least the window size on both axes.
    """
    a, b = _metric_input(a, "ssim"), _metric_input(b, "ssim")
    if a.shape != b.shape:
        raise ContractError(f"ssim expects matching shapes, got {a.shape} vs {b.shape}")
    _, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = _ssim_window()
    c1 = (SSIM_K1) ** 2
    c2 = (SSIM_K2) ** 2

    def local_mean(x):
        v = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
        return np.tensordot(v, win, axes=([3, 4], [0, 1]))

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
