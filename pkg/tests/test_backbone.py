"""Backbone tests: patch embedding, intrinsics injection, cross-view
decoding, head geometry, and end-to-end gradient reach."""

import numpy as np
import pytest

from fgsplat import backbone as bb
from fgsplat import detailmod as dm
from fgsplat import diffcore as dc
from fgsplat import gscene, rasterizer
from fgsplat.diffcore import ops
from fgsplat.errors import ContractError


def rng(seed=0):
    return np.random.default_rng(seed)


def small_net(seed=1, image=(32, 32), **kw):
    kw.setdefault("d_model", 32)
    kw.setdefault("n_heads", 2)
    kw.setdefault("n_enc", 1)
    kw.setdefault("n_dec", 1)
    kw.setdefault("c_detail", 4)
    kw.setdefault("feature_dim", 4)
    return bb.Backbone(rng(seed), image, **kw)


def make_camera(width=32, height=32, fx=36.0, eye=(0.1, -0.2, -2.5)):
    return gscene.look_at(eye, (0, 0, 0), (0, -1, 0), fx, fx,
                          (width - 1) / 2, (height - 1) / 2, width, height)


def rand_image(seed=0, hw=(32, 32)):
    return dc.Tensor(rng(seed).uniform(0, 1, size=(3,) + hw).astype(np.float32))


# -- patch embedding ------------------------------------------------------

def test_patch_grid_counts():
    emb = bb.PatchEmbed(rng(0), (256, 256), 16, 64)
    assert emb.grid == (16, 16)
    img = dc.Tensor(np.zeros((3, 256, 256), dtype=np.float32))
    assert emb(img).shape == (256, 64)


def test_indivisible_image_rejected():
    with pytest.raises(ContractError, match="divisible"):
        bb.PatchEmbed(rng(0), (60, 64), 16, 32)


def test_zero_image_tokens_equal_before_positional():
    emb = bb.PatchEmbed(rng(1), (64, 64), 16, 32)
    pre = emb.embed_patches(dc.Tensor(np.zeros((3, 64, 64), dtype=np.float32)))
    np.testing.assert_allclose(pre.data, np.broadcast_to(pre.data[0], pre.shape),
                               atol=1e-7)
    post = emb(dc.Tensor(np.zeros((3, 64, 64), dtype=np.float32)))
    assert np.abs(post.data - post.data[0]).max() > 1e-4  # positional only


def test_swapping_patches_swaps_prepositional_tokens():
    emb = bb.PatchEmbed(rng(2), (64, 64), 16, 32)
    img = rand_image(3, (64, 64)).data.copy()
    swapped = img.copy()
    swapped[:, 0:16, 0:16], swapped[:, 16:32, 32:48] = \
        img[:, 16:32, 32:48], img[:, 0:16, 0:16].copy()
    a = emb.embed_patches(dc.Tensor(img)).data
    b = emb.embed_patches(dc.Tensor(swapped)).data
    # patch (0,0) is token 0; patch (1,2) is token 6 on the 4x4 grid
    np.testing.assert_allclose(b[0], a[6], atol=1e-7)
    np.testing.assert_allclose(b[6], a[0], atol=1e-7)
    others = [i for i in range(16) if i not in (0, 6)]
    np.testing.assert_allclose(b[others], a[others], atol=1e-7)


# -- encoder --------------------------------------------------------------

def test_identical_views_encode_identically():
    net = small_net()
    cam = make_camera()
    img = rand_image(4)
    a = net.encode(net.patchify(img, 0), net.intrinsics_token(cam))
    b = net.encode(net.patchify(img, 1), net.intrinsics_token(cam))
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


def test_no_per_view_parameter_copies():
    net = small_net()
    names = [n for n, _ in net.named_parameters()]
    assert not any("view" in n for n in names)
    assert len(names) == len(set(names))


def test_changing_fx_changes_every_token():
    net = small_net()
    img = rand_image(5)
    seq = net.patchify(img, 0)
    a = net.encode(seq, net.intrinsics_token(make_camera(fx=36.0)))
    seq2 = net.patchify(img, 0)
    b = net.encode(seq2, net.intrinsics_token(make_camera(fx=54.0)))
    row_diff = np.abs(a.tokens.data - b.tokens.data).max(axis=1)
    assert np.all(row_diff > 0)


def test_intrinsics_token_deterministic():
    net = small_net()
    cam = make_camera()
    t1 = net.intrinsics_token(cam).data
    t2 = net.intrinsics_token(cam).data
    np.testing.assert_array_equal(t1, t2)


def test_encoder_block_gradcheck():
    with dc.precision("float64"):
        from fgsplat.nn import TransformerBlock
        blk = TransformerBlock(rng(6), 16, 2)
        x = dc.Tensor(rng(7).normal(size=(4, 16)))
        wgt = dc.Tensor(rng(8).normal(size=(4, 16)))

        def f():
            return ops.sum_(ops.mul(blk(x), wgt))

        # The key-projection bias shifts every score in a row by the same
        # amount and softmax is invariant to that, so its gradient is
        # analytically zero; zero_tol must sit above the ~1e-10 roundoff
        # both measurements leave behind.
        report = dc.finite_difference_check(f, dict(blk.named_parameters()),
                                            eps=1e-5, zero_tol=1e-8,
                                            max_coords_per_param=6)
        assert report.fraction_within(1e-4) == 1.0, report.summary()


# -- decoder --------------------------------------------------------------

def encoded_views(net, n, seed=10):
    cams = [make_camera(eye=(0.3 * i, -0.1, -2.5)) for i in range(n)]
    imgs = [rand_image(seed + i) for i in range(n)]
    return [net.encode(net.patchify(img, i), net.intrinsics_token(cam))
            for i, (img, cam) in enumerate(zip(imgs, cams))]


def test_single_view_decodes():
    net = small_net()
    out = net.decode_crossview(encoded_views(net, 1))
    assert len(out) == 1 and out[0].tokens.shape == (4, 32)


def test_empty_view_list_rejected():
    with pytest.raises(ContractError, match="at least one view"):
        small_net().decode_crossview([])


def test_view_permutation_equivariance():
    net = small_net(n_dec=2)
    seqs = encoded_views(net, 3)
    fwd = net.decode_crossview(seqs)
    perm = [2, 0, 1]
    out = net.decode_crossview([seqs[i] for i in perm])
    for dst, src in enumerate(perm):
        np.testing.assert_allclose(out[dst].tokens.data, fwd[src].tokens.data,
                                   atol=1e-5)


def test_cross_view_information_exchange():
    # Decoding a view together with a partner must differ from decoding it
    # alone (the cross-attention ablation), and from its encoder output.
    net = small_net()
    seqs = encoded_views(net, 2)
    joint = net.decode_crossview(seqs)[0].tokens.data
    alone = net.decode_crossview(seqs[:1])[0].tokens.data
    assert np.abs(joint - alone).max() > 1e-4
    assert np.abs(joint - seqs[0].tokens.data).max() > 1e-4


# -- heads ----------------------------------------------------------------

def test_depth_head_positive_and_full_resolution():
    net = small_net()
    feats = net.encode_views([rand_image(11)], [make_camera()])
    depth = net.depth(feats[0])
    assert depth.shape == (32, 32)
    assert depth.data.min() > 0
    # extreme tokens still give positive finite depth (clamped exponent)
    wild = bb.GlobalFeatures(dc.Tensor(np.full((4, 32), 50.0, np.float32)),
                             (2, 2))
    d2 = net.depth(wild)
    assert np.isfinite(d2.data).all() and d2.data.min() > 0


def test_unprojected_centers_lie_on_pixel_rays():
    net = small_net()
    cam = make_camera()
    feats = net.encode_views([rand_image(12)], [cam])
    depth = net.depth(feats[0])
    pts = gscene.unproject_depth(depth, cam).data  # (H, W, 3)
    cam_pts = pts @ cam.R.T + cam.t
    px = cam.fx * cam_pts[..., 0] / cam_pts[..., 2] + cam.cx
    py = cam.fy * cam_pts[..., 1] / cam_pts[..., 2] + cam.cy
    jj, ii = np.meshgrid(np.arange(32), np.arange(32))
    assert np.abs(px - jj).max() <= 1e-4
    assert np.abs(py - ii).max() <= 1e-4


def test_param_head_shapes_and_gaussian_count():
    # The detail module reads the 2x-resolution image; its 1/8 grid lands
    # at 1/4 of the backbone resolution inside the head.
    net = small_net()
    hi = rand_image(13, (64, 64))
    img = ops.avg_pool2d(hi, 2)
    feats = net.encode_views([img], [make_camera()])
    det = dm.DetailModule(rng(14), c_detail=4)(hi)
    pm = net.params(feats[0], det.grid, img)
    assert pm["scale_raw"].shape == (3, 32, 32)
    assert pm["quat_raw"].shape == (4, 32, 32)
    assert pm["opacity_raw"].shape == (32, 32)
    assert pm["color"].shape == (3, 32, 32)
    assert pm["feature"].shape == (4, 32, 32)  # one Gaussian per pixel


def test_param_head_consumes_detail():
    net = small_net()
    img = rand_image(15)
    feats = net.encode_views([img], [make_camera()])
    zeros = dc.Tensor(np.zeros((4, 8, 8), dtype=np.float32))
    base = net.params(feats[0], zeros, img)
    det = dc.Tensor(rng(16).normal(size=(4, 8, 8)).astype(np.float32))
    full = net.params(feats[0], det, img)
    assert np.abs(base["color"].data - full["color"].data).max() > 1e-6


def test_param_head_misaligned_detail_rejected():
    net = small_net()
    img = rand_image(17)
    feats = net.encode_views([img], [make_camera()])
    bad = dc.Tensor(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ContractError, match="misaligned"):
        net.params(feats[0], bad, img)


def test_color_starts_near_input_image():
    # residual parameterization: the color head output is image + residual
    net = small_net()
    hi = rand_image(18, (64, 64))
    img = ops.avg_pool2d(hi, 2)
    feats = net.encode_views([img], [make_camera()])
    det = dm.DetailModule(rng(19), c_detail=4)(hi)
    pm = net.params(feats[0], det.grid, img)
    assert np.abs(pm["color"].data - img.data).mean() < 0.5


# -- end-to-end gradient reach --------------------------------------------

def test_render_loss_reaches_score_mlp():
    net = small_net(seed=20)
    dmod = dm.DetailModule(rng(21), c_detail=4, k_fraction=0.25)
    dmod.selector.fc2.w.data[:] = rng(22).normal(size=dmod.selector.fc2.w.shape)
    cam = make_camera()
    hi = rand_image(23, (64, 64))
    img = ops.avg_pool2d(hi, 2)

    feats = net.encode_views([img], [cam])
    det = dmod(hi)
    pm = net.params(feats[0], det.grid, img)
    depth = net.depth(feats[0])

    n = 32 * 32
    sel = np.arange(0, n, 64)  # a 16-Gaussian subsample keeps the test fast
    mu = ops.gather(ops.reshape(gscene.unproject_depth(depth, cam), (n, 3)),
                    sel, axis=0)

    def pick(t, channels):
        return ops.gather(ops.transpose(ops.reshape(t, (channels, n)), (1, 0)),
                          sel, axis=0)

    pack = rasterizer.ScenePack(
        mu, pick(pm["scale_raw"], 3), pick(pm["quat_raw"], 4),
        ops.gather(ops.reshape(pm["opacity_raw"], (n,)), sel, axis=0),
        pick(pm["color"], 3), pick(pm["feature"], 4), np.zeros(3))
    out = rasterizer.rasterize(pack, cam, tile_size=8)
    grads = dc.backward(ops.sum_(ops.square(out.color)))

    names = dict(net.named_parameters())
    dnames = dict(dmod.named_parameters())
    for key, table in (("embed.proj.w", names), ("intr_proj.w", names),
                       ("depth.final.w", names), ("params.final.w", names)):
        g = grads.get(table[key].node_id)
        assert g is not None and np.abs(g.data).max() > 0, key
    score_grad = grads.get(dnames["selector.fc2.w"].node_id)
    assert score_grad is not None and np.abs(score_grad.data).max() > 0
    mod_grad = grads.get(dnames["selector.mod_real"].node_id)
    assert mod_grad is not None and np.abs(mod_grad.data).max() > 0
