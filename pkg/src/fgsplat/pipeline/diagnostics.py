"""Gradient-fidelity battery: finite differences vs backpropagation.

Three representative differentiable paths are checked: a 3-Gaussian render
loss, the dual-domain detail module, and the one-block guided U-Net. Each
precision uses the recipe its roundoff floor supports: 64-bit runs demand
every coordinate within 1e-4 relative error at eps=1e-5; 32-bit runs use
eps=5e-3 with a 3e-3 two-sided zero floor and demand 95% of coordinates
within 1e-2. The 32-bit configurations pin the two genuinely discontinuous
mechanisms (Gaussian support cutoff, top-k rank reassignment) away from
the FD stencil; the 64-bit step is small enough to check the general case.
"""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..detailmod import MOD_SLOTS, DetailModule
from ..diffcore import ops
from ..gscene import look_at
from ..rasterizer import ScenePack, rasterize
from ..refiner import OneStepRefiner

FLOAT64_EPS, FLOAT64_TOL = 1e-5, 1e-4
FLOAT32_EPS, FLOAT32_TOL, FLOAT32_ZERO_TOL = 5e-3, 1e-2, 3e-3
FLOAT32_MIN_FRACTION = 0.95


def _render_params(seed, smooth_cover):
    r = np.random.default_rng(seed)
    mu = dc.param(r.normal(size=(3, 3)) * np.array([0.25, 0.25, 0.1]))
    if smooth_cover:
        # Support radii beyond the image edge: the q=9 cutoff cannot move
        # across a 32-bit FD stencil.
        scale = dc.param(r.normal(size=(3, 3)) * 0.25 + 0.15)
    else:
        scale = dc.param(r.normal(size=(3, 3)) * 0.2 - 1.6)
    return dict(
        mu=mu, scale=scale,
        quat=dc.param(r.normal(size=(3, 4))),
        opacity=dc.param(r.normal(size=(3,)) * 0.6),
        color=dc.param(r.uniform(0.2, 0.8, size=(3, 3))),
        feature=dc.param(r.normal(size=(3, 2)) * 0.5),
    )


def _render_component(float64):
    cam = look_at((0.1, 0.15, -2.5), (0, 0, 0), (0, -1, 0),
                  30, 30, 11.5, 11.5, 24, 24)
    params = _render_params(7, smooth_cover=not float64)
    r = np.random.default_rng(99)
    wc = dc.Tensor(r.normal(size=(24, 24, 3)))
    wa = dc.Tensor(r.normal(size=(24, 24)))
    wd = dc.Tensor(r.normal(size=(24, 24)))

    def f():
        pack = ScenePack(params["mu"], params["scale"], params["quat"],
                         params["opacity"], params["color"],
                         params["feature"], np.array([0.3, 0.2, 0.1]))
        out = rasterize(pack, cam, t_cutoff=0.0, tile_size=8)
        return (ops.sum_(ops.mul(out.color, wc))
              + ops.sum_(ops.mul(out.alpha, wa))
              + ops.sum_(ops.mul(out.depth, wd)))

    return f, params


def _detail_component(float64):
    mod = DetailModule(np.random.default_rng(23), c_detail=4)
    r = np.random.default_rng(24)
    mod.selector.fc2.w.data[:] = r.normal(size=mod.selector.fc2.w.shape)
    if float64:
        # General modulation; the 1e-5 step stays inside every rank gap.
        mod.selector.mod_real.data[:] = 1.0 + 0.3 * r.normal(size=MOD_SLOTS)
        mod.selector.mod_imag.data[:] = 0.3 * r.normal(size=MOD_SLOTS)
    img = dc.Tensor(np.random.default_rng(18).random((3, 16, 16)))
    w = dc.Tensor(np.random.default_rng(19).normal(size=(4, 2, 2)))

    def f():
        return ops.sum_(ops.mul(mod(img).grid, w))

    return f, dict(mod.named_parameters())


def _unet_component(float64):
    del float64  # smooth everywhere; one recipe serves both precisions
    ref = OneStepRefiner(np.random.default_rng(31), c_lat=2, c_guidance=2,
                         base=4, n_heads=2)
    g = np.random.default_rng(32)
    ref.unet.conv_out.w.data[:] = g.normal(0.0, 0.05,
                                           size=ref.unet.conv_out.w.shape)
    ref.unet.conv_in.w.data[:, 2:] = g.normal(
        0.0, 0.05, size=ref.unet.conv_in.w.data[:, 2:].shape)
    r = np.random.default_rng(33)
    tgt = dc.Tensor(r.random((3, 16, 16)))
    refs = [dc.Tensor(r.random((3, 16, 16)))]
    fg = dc.Tensor(r.normal(size=(2, 2, 2)))
    fgr = [dc.Tensor(r.normal(size=(2, 2, 2)))]
    w = dc.Tensor(r.normal(size=(3, 16, 16)))

    def f():
        return ops.sum_(ops.mul(ref.denoise(tgt, refs, fg, fgr), w))

    return f, dict(ref.named_parameters())


_COMPONENTS = (
    ("render-loss", _render_component),
    ("dd-dpm", _detail_component),
    ("guided-unet", _unet_component),
)


def run_gradcheck(precision="float64", max_coords_per_param=4):
    """Run the battery; returns one result dict per component."""
    float64 = precision == "float64"
    results = []
    for name, build in _COMPONENTS:
        with dc.precision(precision):
            f, params = build(float64)
            if float64:
                report = dc.finite_difference_check(
                    f, params, eps=FLOAT64_EPS,
                    max_coords_per_param=max_coords_per_param)
                fraction = report.fraction_within(FLOAT64_TOL)
                ok = fraction == 1.0
                tol = FLOAT64_TOL
            else:
                report = dc.finite_difference_check(
                    f, params, eps=FLOAT32_EPS, zero_tol=FLOAT32_ZERO_TOL,
                    max_coords_per_param=max_coords_per_param)
                fraction = report.fraction_within(FLOAT32_TOL)
                ok = fraction >= FLOAT32_MIN_FRACTION
                tol = FLOAT32_TOL
        results.append({"name": name, "precision": precision,
                        "fraction": fraction, "tolerance": tol,
                        "ok": ok, "summary": report.summary()})
    return results
