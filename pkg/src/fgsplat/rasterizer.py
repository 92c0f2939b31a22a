"""Differentiable tile-based rasterization of projected Gaussians.

Semantics shared by the tile renderer and the naive oracle:
  - activated opacity sigmoid(o_raw); alpha_i = min(o_i * G_i, 0.99)
  - hard support: a Gaussian contributes only where the Mahalanobis form
    d^T Sigma2d^-1 d <= 9 (the 3-sigma ellipse)
  - strict global front-to-back order: ascending camera depth, ties broken
    by lower Gaussian index (stable sort)
  - color = sum_i c_i alpha_i T_i + bg * T_final with T the exclusive
    transmittance; alpha map = 1 - T_final; expected depth composites the
    camera z like any other payload channel (background depth 0)

The tile path bins Gaussians into fixed screen tiles by the conservative
axis-aligned bounding box of the 3-sigma ellipse and stops traversal per
pixel once T < t_cutoff; the naive path loops over every Gaussian for every
pixel with no tiling and no early termination. With t_cutoff = 0 the two
agree to float accumulation error.

The compositing step is a single custom op with a hand-derived backward
(suffix-sum recurrence over the sorted contributions); everything upstream
(projection, activations) differentiates through the regular tape. Tiles
are data-independent, so the per-tile loop could run on a thread pool; the
implementation is single-threaded for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ops
from .diffcore.tensor import _op_output, record_op
from .errors import ConfigurationError, ContractError
from .gscene import DEFAULT_Z_NEAR, GaussianScene, project_scene_t

ALPHA_MAX = 0.99
SUPPORT_Q = 9.0          # 3-sigma: d^T conic d <= 9
TILE_SIZES = (8, 16, 32)
DEFAULT_T_CUTOFF = 1e-4


@dataclass
class ScenePack:
    """Tensor-valued scene parameters for differentiable rendering."""

    mu: dc.Tensor        # (N,3)
    scale: dc.Tensor     # (N,3) log-scales
    quat: dc.Tensor      # (N,4) unnormalized
    opacity: dc.Tensor   # (N,) logits
    color: dc.Tensor     # (N,3)
    feature: dc.Tensor   # (N,D)
    background: np.ndarray  # (3,) constant

    @staticmethod
    def from_scene(scene, requires_grad=False):
        arrays = scene.to_arrays()
        rg = requires_grad
        return ScenePack(
            dc.Tensor(arrays["mu"], requires_grad=rg),
            dc.Tensor(arrays["scale"], requires_grad=rg),
            dc.Tensor(arrays["quat"], requires_grad=rg),
            dc.Tensor(arrays["opacity"], requires_grad=rg),
            dc.Tensor(arrays["color"], requires_grad=rg),
            dc.Tensor(arrays["feature"], requires_grad=rg),
            np.asarray(scene.background, dtype=np.float32),
        )

    def validate(self):
        n = self.mu.shape[0]
        if self.feature.ndim != 2 or self.feature.shape[0] != n:
            raise ContractError(f"feature array must be (N,D), got {self.feature.shape}")
        for name, t, shape in (("mu", self.mu, (n, 3)), ("scale", self.scale, (n, 3)),
                               ("quat", self.quat, (n, 4)), ("opacity", self.opacity, (n,)),
                               ("color", self.color, (n, 3)),
                               ("feature", self.feature, self.feature.shape)):
            if t.shape != shape:
                raise ContractError(f"scene pack field {name!r} has shape {t.shape}, "
                                    f"expected {shape}")
            if t.data.size == 0:
                continue
            bad = ~np.isfinite(t.data.reshape(n, -1))
            if bad.any():
                idx = int(np.argwhere(bad.any(axis=1))[0, 0])
                raise ContractError(f"NaN/Inf in Gaussian {idx} field {name!r}")


@dataclass
class RenderStats:
    n_gaussians: int
    n_culled: int
    n_singular: int
    tiles_touched: int


@dataclass
class RenderOutput:
    """Rendered maps as tensors (channel-last)."""

    color: dc.Tensor            # (H,W,3)
    alpha: dc.Tensor            # (H,W)
    depth: dc.Tensor            # (H,W)
    feature: dc.Tensor | None   # (H/8,W/8,D) when requested
    stats: RenderStats
    pack: ScenePack | None = None


def _depth_order(z, kept_index):
    """Ascending depth, ties toward the lower original Gaussian index."""
    return np.lexsort((kept_index, z))


def _tile_pairs(mu, radii, h, w, tile_size):
    """Vectorized (gaussian, tile) pair construction from ellipse AABBs.

    mu, radii are already in traversal (depth) order; returned pair lists
    are sorted by tile then traversal position.
    """
    m = mu.shape[0]
    tx_count = (w + tile_size - 1) // tile_size
    ty_count = (h + tile_size - 1) // tile_size
    if m == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                np.zeros(1, np.int64), tx_count, ty_count)
    x0 = mu[:, 0] - radii[:, 0]
    x1 = mu[:, 0] + radii[:, 0]
    y0 = mu[:, 1] - radii[:, 1]
    y1 = mu[:, 1] + radii[:, 1]
    on = (x1 >= 0) & (x0 <= w - 1) & (y1 >= 0) & (y0 <= h - 1)
    tx0 = np.clip(np.floor(x0 / tile_size), 0, tx_count - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1 / tile_size), 0, tx_count - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0 / tile_size), 0, ty_count - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1 / tile_size), 0, ty_count - 1).astype(np.int64)
    nx = np.where(on, tx1 - tx0 + 1, 0)
    ny = np.where(on, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                np.zeros(ty_count * tx_count + 1, np.int64), tx_count, ty_count)
    gidx = np.repeat(np.arange(m, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offs = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_r = np.repeat(np.maximum(nx, 1), counts)
    dx = offs % nx_r
    dy = offs // nx_r
    tile_id = (np.repeat(ty0, counts) + dy) * tx_count + np.repeat(tx0, counts) + dx
    # sort by (tile, traversal position); keys are unique
    key = tile_id * (m + 1) + gidx
    perm = np.argsort(key, kind="stable")
    tile_sorted = tile_id[perm]
    gains = gidx[perm]
    bounds = np.searchsorted(tile_sorted, np.arange(ty_count * tx_count + 1))
    return gains, tile_sorted, bounds, tx_count, ty_count


def composite(mu2d, conic, opac, payload, depth_vals, radii, background,
              image_hw, tile_size, t_cutoff):
    """Tile-based front-to-back compositing as one custom tape op.

    mu2d (M,2), conic (M,3), opac (M,) activated opacities, payload (M,C)
    tensors; depth_vals (M,), radii (M,2) plain arrays driving traversal
    order and binning; background (C,) constant. Returns (image (H,W,C),
    alpha (H,W), tiles_touched).
    """
    h, w = image_hw
    mu2d, conic, opac, payload = map(ops.as_tensor, (mu2d, conic, opac, payload))
    m = mu2d.shape[0]
    c = payload.shape[1]
    dt = payload.data.dtype
    bg = np.asarray(background, dtype=dt)
    if bg.shape != (c,):
        raise ContractError(f"background has {bg.shape[0] if bg.ndim else 0} channels, "
                            f"payload has {c}")

    order = _depth_order(depth_vals, np.arange(m))
    mu_s = mu2d.data[order]
    con_s = conic.data[order]
    op_s = opac.data[order]
    pay_s = payload.data[order]
    rad_s = radii[order]

    gains, tile_sorted, bounds, tx_count, ty_count = _tile_pairs(
        mu_s, rad_s, h, w, tile_size)

    img = np.empty((c, h * w), dtype=dt)
    img[:] = bg[:, None]
    t_fin = np.ones(h * w, dtype=dt)

    def tile_pixels(tid):
        ty, tx = divmod(tid, tx_count)
        ys = np.arange(ty * tile_size, min((ty + 1) * tile_size, h))
        xs = np.arange(tx * tile_size, min((tx + 1) * tile_size, w))
        pix = (ys[:, None] * w + xs[None, :]).reshape(-1)
        px = np.tile(xs.astype(dt), ys.size)
        py = np.repeat(ys.astype(dt), xs.size)
        return pix, px, py

    def tile_forward(glist, px, py):
        dx = px[None, :] - mu_s[glist, 0:1]
        dy = py[None, :] - mu_s[glist, 1:2]
        a = con_s[glist, 0:1]
        b = con_s[glist, 1:2]
        cc = con_s[glist, 2:3]
        qf = a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy
        inside = qf <= SUPPORT_Q
        g = np.exp(-0.5 * qf, dtype=dt)
        araw = op_s[glist][:, None] * g
        alpha = np.where(araw < ALPHA_MAX, araw, dt.type(ALPHA_MAX)) * inside
        t_incl = np.cumprod(1.0 - alpha, axis=0)
        t_excl = np.empty_like(t_incl)
        t_excl[0] = 1.0
        t_excl[1:] = t_incl[:-1]
        mask = t_excl >= t_cutoff
        return dx, dy, qf, inside, g, araw, alpha, t_excl, mask

    nonempty = np.nonzero(bounds[1:] > bounds[:-1])[0]
    for tid in nonempty:
        glist = gains[bounds[tid]:bounds[tid + 1]]
        pix, px, py = tile_pixels(tid)
        _, _, _, _, _, _, alpha, t_excl, mask = tile_forward(glist, px, py)
        wgt = alpha * t_excl * mask
        tf = np.prod(1.0 - alpha * mask, axis=0)
        img[:, pix] = pay_s[glist].T @ wgt + bg[:, None] * tf
        t_fin[pix] = tf

    out_img = _op_output(np.ascontiguousarray(img.T.reshape(h, w, c)))
    out_alpha = _op_output((1.0 - t_fin).reshape(h, w))

    def bwd(gs):
        g_img = gs[0] if gs[0] is not None else np.zeros((h, w, c), dtype=dt)
        g_alpha = gs[1] if gs[1] is not None else np.zeros((h, w), dtype=dt)
        g_img_f = g_img.reshape(h * w, c).T  # (C,P)
        g_alpha_f = g_alpha.reshape(h * w)

        gmu = np.zeros((m, 2), dtype=dt)
        gcon = np.zeros((m, 3), dtype=dt)
        gop = np.zeros(m, dtype=dt)
        gpay = np.zeros((m, c), dtype=dt)

        for tid in nonempty:
            glist = gains[bounds[tid]:bounds[tid + 1]]
            pix, px, py = tile_pixels(tid)
            dx, dy, qf, inside, g, araw, alpha, t_excl, mask = tile_forward(glist, px, py)
            wgt = alpha * t_excl * mask
            tf = np.prod(1.0 - alpha * mask, axis=0)

            up_c = g_img_f[:, pix]                      # (C,Pt)
            up_t = bg @ up_c - g_alpha_f[pix]           # coeff of T_fin
            amat = pay_s[glist] @ up_c                  # (Mt,Pt)
            aw = amat * wgt
            suffix = np.flip(np.cumsum(np.flip(aw, 0), 0), 0) - aw
            dalpha = mask * (amat * t_excl - (suffix + up_t[None, :] * tf[None, :])
                             / (1.0 - alpha))
            ind = inside & (araw < ALPHA_MAX)
            dg_ = dalpha * op_s[glist][:, None] * ind
            dq = -0.5 * g * dg_
            a = con_s[glist, 0:1]
            b = con_s[glist, 1:2]
            cc = con_s[glist, 2:3]
            np.add.at(gop, glist, (dalpha * g * ind).sum(axis=1))
            np.add.at(gcon, glist, np.stack([
                (dq * dx * dx).sum(axis=1),
                (dq * 2.0 * dx * dy).sum(axis=1),
                (dq * dy * dy).sum(axis=1)], axis=1))
            np.add.at(gmu, glist, np.stack([
                (-dq * (2.0 * a * dx + 2.0 * b * dy)).sum(axis=1),
                (-dq * (2.0 * b * dx + 2.0 * cc * dy)).sum(axis=1)], axis=1))
            np.add.at(gpay, glist, wgt @ up_c.T)

        inv = np.empty(m, dtype=np.int64)
        inv[order] = np.arange(m)
        return ((mu2d, gmu[inv]), (conic, gcon[inv]), (opac, gop[inv]),
                (payload, gpay[inv]))

    record_op("composite", (mu2d, conic, opac, payload), (out_img, out_alpha), bwd)
    return out_img, out_alpha, int(gains.size)


def _render_pass(pack, cam, z_near, tile_size, t_cutoff):
    """Project for one camera and composite color plus an expected-depth
    channel (background depth 0)."""
    proj = project_scene_t(pack.mu, pack.scale, pack.quat, cam, z_near=z_near)
    opac = ops.sigmoid(ops.gather(pack.opacity, proj.kept, axis=0))
    pay = ops.gather(pack.color, proj.kept, axis=0)
    pay = ops.concat([pay, ops.reshape(proj.depth, (proj.depth.shape[0], 1))], axis=1)
    bg = np.concatenate([np.asarray(pack.background, dtype=np.float64), [0.0]])
    img, alpha, touched = composite(
        proj.mu2d, proj.conic, opac, pay, proj.depth.data.astype(np.float64),
        proj.radii, bg, (cam.height, cam.width), tile_size, t_cutoff)
    return proj, img, alpha, touched


def rasterize(scene, cam, *, tile_size=16, t_cutoff=DEFAULT_T_CUTOFF,
              with_features=False, feature_scale=1 / 8, z_near=DEFAULT_Z_NEAR):
    """Render a scene (GaussianScene or differentiable ScenePack).

    Returns a RenderOutput whose color/alpha/depth live at the camera
    resolution; when ``with_features`` is set, a second pass renders the
    per-Gaussian feature vectors at ``feature_scale`` resolution through a
    scaled camera.
    """
    if tile_size not in TILE_SIZES:
        raise ConfigurationError(f"tile_size must be one of {TILE_SIZES}, got {tile_size}")
    if t_cutoff < 0:
        raise ConfigurationError(f"t_cutoff must be >= 0, got {t_cutoff}")
    pack = ScenePack.from_scene(scene) if isinstance(scene, GaussianScene) else scene
    pack.validate()

    proj, img34, alpha, touched = _render_pass(pack, cam, z_near, tile_size, t_cutoff)
    color = img34[:, :, 0:3]
    depth = img34[:, :, 3]

    feature = None
    if with_features:
        fcam = cam.scaled(feature_scale)
        fproj = project_scene_t(pack.mu, pack.scale, pack.quat, cam=fcam, z_near=z_near)
        fopac = ops.sigmoid(ops.gather(pack.opacity, fproj.kept, axis=0))
        fpay = ops.gather(pack.feature, fproj.kept, axis=0)
        d = fpay.shape[1]
        fimg, _, _ = composite(
            fproj.mu2d, fproj.conic, fopac, fpay, fproj.depth.data.astype(np.float64),
            fproj.radii, np.zeros(d), (fcam.height, fcam.width), tile_size, t_cutoff)
        feature = fimg

    stats = RenderStats(pack.mu.shape[0], proj.n_culled, proj.n_singular, touched)
    return RenderOutput(color, alpha, depth, feature, stats, pack)


def rasterize_backward(output, grad_color=None, grad_alpha=None, grad_depth=None,
                       grad_feature=None):
    """Per-Gaussian parameter gradients for given output gradients.

    Requires the forward pass to have run with a requires_grad ScenePack on
    a live tape (the saved per-tile state is consumed with it). Returns a
    dict with mu/scale/quat/opacity/color/feature gradient arrays.
    """
    if output.pack is None or not output.pack.mu.requires_grad:
        raise ContractError("rasterize_backward needs a forward pass over a "
                            "requires_grad ScenePack")
    if len(dc.get_tape()) == 0:
        raise ContractError("rasterize_backward: saved forward state is missing "
                            "(tape already consumed)")
    terms = []

    def add_term(t, g):
        if g is not None:
            terms.append(ops.sum_(ops.mul(t, dc.Tensor(np.asarray(g, dtype=t.data.dtype)))))

    add_term(output.color, grad_color)
    add_term(output.alpha, grad_alpha)
    add_term(output.depth, grad_depth)
    if output.feature is not None:
        add_term(output.feature, grad_feature)
    if not terms:
        raise ContractError("rasterize_backward: no output gradients supplied")
    loss = terms[0]
    for t in terms[1:]:
        loss = ops.add(loss, t)
    grads = dc.backward(loss)
    pack = output.pack
    out = {}
    for name in ("mu", "scale", "quat", "opacity", "color", "feature"):
        t = getattr(pack, name)
        g = grads.get(t.node_id)
        out[name] = np.zeros_like(t.data) if g is None else g.data
    return out


def naive_rasterize(scene, cam, *, with_features=False, feature_scale=1 / 8,
                    z_near=DEFAULT_Z_NEAR):
    """Reference renderer: per-pixel loop over all Gaussians, globally
    depth-sorted, no tiling, no early termination. Not differentiable."""
    pack = ScenePack.from_scene(scene) if isinstance(scene, GaussianScene) else scene
    pack.validate()

    def pass_(camera, values_full, bg3, include_depth):
        with dc.no_grad():
            proj = project_scene_t(pack.mu, pack.scale, pack.quat, camera, z_near=z_near)
        opac = 1.0 / (1.0 + np.exp(-pack.opacity.data[proj.kept]))
        vals = values_full[proj.kept]
        dt = vals.dtype
        if include_depth:
            vals = np.concatenate([vals, proj.depth.data.astype(dt)[:, None]], axis=1)
            bg = np.concatenate([bg3.astype(dt), [0.0]]).astype(dt)
        else:
            bg = bg3.astype(dt)
        h, w = camera.height, camera.width
        order = _depth_order(proj.depth.data.astype(np.float64),
                             np.arange(proj.kept.size))
        jj, ii = np.meshgrid(np.arange(w, dtype=dt), np.arange(h, dtype=dt))
        canvas = np.zeros((vals.shape[1], h, w), dtype=dt)
        trans = np.ones((h, w), dtype=dt)
        for row in order:
            mx, my = proj.mu2d.data[row]
            a, b, cc = proj.conic.data[row]
            dx = jj - dt.type(mx)
            dy = ii - dt.type(my)
            qf = a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy
            inside = qf <= SUPPORT_Q
            g = np.exp(-0.5 * qf, dtype=dt)
            araw = opac[row] * g
            alpha = np.where(araw < ALPHA_MAX, araw, dt.type(ALPHA_MAX)) * inside
            wgt = alpha * trans
            canvas += vals[row][:, None, None] * wgt[None]
            trans = trans * (1.0 - alpha)
        canvas += bg[:, None, None] * trans[None]
        return canvas, 1.0 - trans, proj

    canvas, alpha, proj = pass_(cam, pack.color.data, pack.background, True)
    color = np.ascontiguousarray(canvas[:3].transpose(1, 2, 0))
    depth = canvas[3]

    feature = None
    if with_features:
        fcam = cam.scaled(feature_scale)
        fcanvas, _, _ = pass_(fcam, pack.feature.data,
                              np.zeros(pack.feature.shape[1], pack.feature.data.dtype),
                              False)
        feature = dc.Tensor(np.ascontiguousarray(fcanvas.transpose(1, 2, 0)))

    stats = RenderStats(pack.mu.shape[0], proj.n_culled, proj.n_singular, 0)
    return RenderOutput(dc.Tensor(color), dc.Tensor(alpha), dc.Tensor(depth),
                        feature, stats, None)
