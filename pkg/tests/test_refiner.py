"""Refiner tests: autoencoder shape/determinism contracts, zero-init
transparency, mixed-attention identities (V=1, duplicated views, masking),
the one-forward-per-image counter, and finite-difference gradient checks in
both precisions."""

import numpy as np
import pytest

import fgsplat.diffcore as dc
from fgsplat import refiner as rf
from fgsplat.diffcore import ops
from fgsplat.errors import ContractError


def rng(seed):
    return np.random.default_rng(seed)


def small_refiner(seed=1, c_lat=4, c_guidance=4, base=8, n_heads=2):
    return rf.OneStepRefiner(rng(seed), c_lat=c_lat, c_guidance=c_guidance,
                             base=base, n_heads=n_heads)


def rand_image(h, w, seed):
    return dc.Tensor(rng(seed).random((3, h, w)))


def wake_unet(unet, seed=90, scale=0.05):
    """Overwrite the two zero-init weight groups with small random values.

    At initialization the U-Net interior and the guidance channels carry no
    gradient (their outputs are multiplied by exact zeros); tests that need
    every path live randomize them first, as training would.
    """
    g = rng(seed)
    unet.conv_out.w.data[:] = g.normal(0.0, scale, size=unet.conv_out.w.shape)
    if unet.c_guidance:
        unet.conv_in.w.data[:, unet.c_lat:] = g.normal(
            0.0, scale, size=unet.conv_in.w.data[:, unet.c_lat:].shape)


# -- encoder / decoder ----------------------------------------------------

def test_latent_is_eighth_resolution():
    enc = rf.LatentEncoder(rng(0), c_lat=4)
    lat = enc(rand_image(32, 48, seed=3))
    assert lat.shape == (4, 4, 6)


def test_encoder_deterministic():
    enc = rf.LatentEncoder(rng(0), c_lat=4)
    img = rand_image(16, 16, seed=4)
    a = enc(img)
    b = enc(dc.Tensor(img.data.copy()))
    assert np.array_equal(a.data, b.data)


def test_encoder_rejects_indivisible():
    enc = rf.LatentEncoder(rng(0))
    with pytest.raises(ContractError, match="divisible"):
        enc(dc.Tensor(np.zeros((3, 20, 32))))


def test_encoder_rejects_bad_channels():
    enc = rf.LatentEncoder(rng(0))
    with pytest.raises(ContractError, match=r"\(3, H, W\)"):
        enc(dc.Tensor(np.zeros((1, 16, 16))))


def test_decoder_inverts_resolution():
    dec = rf.LatentDecoder(rng(0), c_lat=4)
    img = dec(dc.Tensor(rng(1).normal(size=(4, 3, 5))))
    assert img.shape == (3, 24, 40)


def test_decoder_rejects_wrong_channels():
    dec = rf.LatentDecoder(rng(0), c_lat=4)
    with pytest.raises(ContractError, match="latent"):
        dec(dc.Tensor(np.zeros((5, 4, 4))))


def test_encoder_gradcheck_float64():
    with dc.precision("float64"):
        enc = rf.LatentEncoder(rng(5), c_lat=2)
        img = dc.Tensor(rng(6).random((3, 16, 16)))
        wgt = rng(7).normal(size=(2, 2, 2))

        def f():
            return ops.sum_(ops.mul(enc(img), dc.Tensor(wgt)))

        report = dc.finite_difference_check(f, dict(enc.named_parameters()),
                                            eps=1e-5, max_coords_per_param=8)
        assert report.fraction_within(1e-4) == 1.0, report.summary()


# -- feature concatenation ------------------------------------------------

def test_feature_concat_shapes_and_order():
    f_r = dc.Tensor(rng(0).normal(size=(8, 4, 4)))
    f_g = dc.Tensor(rng(1).normal(size=(8, 4, 4)))
    fused = rf.feature_concat(f_r, f_g)
    assert fused.shape == (16, 4, 4)
    assert np.array_equal(fused.data[:8], f_r.data)
    assert np.array_equal(fused.data[8:], f_g.data)


def test_feature_concat_spatial_mismatch_reports_both_shapes():
    with pytest.raises(ContractError, match=r"\(8, 4, 4\).*\(8, 5, 4\)"):
        rf.feature_concat(np.zeros((8, 4, 4)), np.zeros((8, 5, 4)))


# -- zero-init transparency ----------------------------------------------

def test_untrained_refiner_is_autoencoder():
    # conv_out starts at zero and its output is a residual, so the whole
    # untrained U-Net is the identity on F_r regardless of refs and F_g.
    ref = small_refiner(seed=2)
    tgt = rand_image(32, 32, seed=10)
    out = ref.denoise(tgt, [rand_image(32, 32, seed=11)],
                      dc.Tensor(rng(12).random((4, 4, 4))),
                      [dc.Tensor(rng(13).random((4, 4, 4)))])
    with dc.no_grad():
        plain = ref.decoder(ref.encoder(tgt))
    assert np.array_equal(out.data, plain.data)


def test_zero_init_guidance_invariance():
    # Guidance columns of conv_in are exact zeros, so every product with
    # F_g is exactly 0.0 and the sums are bitwise unchanged: randomizing
    # F_g cannot move the output before training. conv_out is woken so the
    # U-Net interior (where guidance would act) contributes.
    ref = small_refiner(seed=3)
    ref.unet.conv_out.w.data[:] = rng(91).normal(0.0, 0.05,
                                                 size=ref.unet.conv_out.w.shape)
    tgt = rand_image(32, 32, seed=14)
    refs = [rand_image(32, 32, seed=15)]
    outs = []
    for seed in (20, 21, 22):
        fg = dc.Tensor(rng(seed).normal(size=(4, 4, 4)))
        fgr = [dc.Tensor(rng(seed + 50).normal(size=(4, 4, 4)))]
        outs.append(ref.denoise(tgt, refs, fg, fgr).data)
        dc.get_tape().clear()
    zero = ref.denoise(tgt, refs, None, [None]).data
    for o in outs:
        assert np.max(np.abs(o - zero)) <= 1e-6
        assert np.array_equal(o, zero)


def test_zero_f_g_matches_no_guidance_unet():
    # A guided U-Net fed zero features equals a guidance-free U-Net built
    # from the same weights (the extra conv_in columns are dropped).
    guided = rf.GuidedUNet(rng(4), c_lat=4, c_guidance=4, base=8, n_heads=2)
    plain = rf.GuidedUNet(rng(5), c_lat=4, c_guidance=0, base=8, n_heads=2)
    for (name, pg), (_, pp) in zip(sorted(guided.named_parameters()),
                                   sorted(plain.named_parameters())):
        if name == "conv_in.w":
            pp.data[:] = pg.data[:, :4]
        else:
            pp.data[:] = pg.data
    f_r = dc.Tensor(rng(6).normal(size=(4, 8, 8)))
    fused = rf.feature_concat(f_r, dc.Tensor(np.zeros((4, 8, 8))))
    a = guided([fused])[0]
    b = plain([f_r])[0]
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


# -- mixed attention ------------------------------------------------------

def bottleneck_reference(unet, grid):
    """Plain single-view self-attention block with the U-Net's weights."""
    c, h, w = grid.shape
    x = ops.transpose(ops.reshape(grid, (c, h * w)), (1, 0))
    n = unet.norm1(x)
    x = ops.add(x, unet.attn(n, n))
    x = ops.add(x, unet.mlp(unet.norm2(x)))
    return ops.reshape(ops.transpose(x, (1, 0)), (c, h, w))


def test_mixed_attention_v1_equals_plain_self_attention():
    unet = rf.GuidedUNet(rng(7), c_lat=4, c_guidance=4, base=8, n_heads=2)
    grid = dc.Tensor(rng(8).normal(size=(32, 4, 4)))
    mixed = unet.mixed_attention([grid])[0]
    plain = bottleneck_reference(unet, grid)
    assert np.max(np.abs(mixed.data - plain.data)) <= 1e-6


def test_mixed_attention_duplicated_views_renormalize():
    # With V identical views every key appears V times with the same score;
    # softmax weights scale by 1/V and the value sum restores the V=1
    # output exactly (up to roundoff).
    with dc.precision("float64"):
        unet = rf.GuidedUNet(rng(9), c_lat=4, c_guidance=4, base=8, n_heads=2)
        grid = dc.Tensor(rng(10).normal(size=(32, 4, 4)))
        single = unet.mixed_attention([grid])[0]
        trio = unet.mixed_attention([grid, grid, grid])
        for out in trio:
            np.testing.assert_allclose(out.data, single.data, atol=1e-10)


def test_mixed_attention_mask_reproduces_per_view():
    unet = rf.GuidedUNet(rng(11), c_lat=4, c_guidance=4, base=8, n_heads=2)
    grids = [dc.Tensor(rng(20 + i).normal(size=(32, 4, 4))) for i in range(3)]
    masked = unet.mixed_attention(grids, reference_mask=[False, True, True])
    solo = unet.mixed_attention([grids[0]])[0]
    assert np.max(np.abs(masked[0].data - solo.data)) <= 1e-6


def test_mixed_attention_mask_shape_error():
    unet = rf.GuidedUNet(rng(12), c_lat=4, c_guidance=4, base=8, n_heads=2)
    grids = [dc.Tensor(np.zeros((32, 4, 4))) for _ in range(2)]
    with pytest.raises(ContractError, match="reference_mask"):
        unet.mixed_attention(grids, reference_mask=[True, False, False])


def test_mixed_attention_needs_a_view():
    unet = rf.GuidedUNet(rng(13), c_lat=4, c_guidance=4, base=8, n_heads=2)
    with pytest.raises(ContractError, match="at least one view"):
        unet.mixed_attention([])


def test_reference_view_influences_target():
    ref = small_refiner(seed=14)
    wake_unet(ref.unet, seed=92)
    tgt = rand_image(32, 32, seed=30)
    out_a = ref.denoise(tgt, [rand_image(32, 32, seed=31)]).data
    dc.get_tape().clear()
    out_b = ref.denoise(tgt, [rand_image(32, 32, seed=32)]).data
    assert np.max(np.abs(out_a - out_b)) > 1e-6


# -- one-step property and plumbing ---------------------------------------

def test_exactly_one_unet_forward_per_image():
    ref = small_refiner(seed=15)
    tgt = rand_image(16, 16, seed=33)
    refs = [rand_image(16, 16, seed=34), rand_image(16, 16, seed=35)]
    assert ref.unet.forward_count == 0
    ref.denoise(tgt, refs)
    assert ref.unet.forward_count == 1
    dc.get_tape().clear()
    ref.denoise(tgt, refs)
    assert ref.unet.forward_count == 2


def test_v1_single_image_restoration():
    ref = small_refiner(seed=16)
    out = ref.denoise(rand_image(16, 16, seed=36))
    assert out.shape == (3, 16, 16)
    assert ref.unet.forward_count == 1


def test_resolution_preserved_with_padding():
    # 24x24 gives a 3x3 latent; the U-Net pads it to 4x4 internally and
    # crops back, so the output resolution still matches the input.
    ref = small_refiner(seed=17)
    out = ref.denoise(rand_image(24, 24, seed=37))
    assert out.shape == (3, 24, 24)


def test_denoise_rejects_mismatched_reference():
    ref = small_refiner(seed=18)
    with pytest.raises(ContractError, match="resolution"):
        ref.denoise(rand_image(16, 16, seed=38), [rand_image(32, 32, seed=39)])


def test_denoise_rejects_missing_features():
    ref = small_refiner(seed=19)
    with pytest.raises(ContractError, match="feature"):
        ref.denoise(rand_image(16, 16, seed=40),
                    [rand_image(16, 16, seed=41)],
                    dc.Tensor(np.zeros((4, 2, 2))), [])


def test_denoise_rejects_misaligned_features():
    ref = small_refiner(seed=20)
    with pytest.raises(ContractError, match="misaligned"):
        ref.denoise(rand_image(16, 16, seed=42), [],
                    dc.Tensor(np.zeros((4, 3, 3))))


def test_unet_rejects_wrong_channel_count():
    unet = rf.GuidedUNet(rng(21), c_lat=4, c_guidance=4, base=8, n_heads=2)
    with pytest.raises(ContractError, match="channels"):
        unet([dc.Tensor(np.zeros((5, 4, 4)))])


def test_unet_rejects_disagreeing_shapes():
    unet = rf.GuidedUNet(rng(22), c_lat=4, c_guidance=0, base=8, n_heads=2)
    with pytest.raises(ContractError, match="disagree"):
        unet([dc.Tensor(np.zeros((4, 4, 4))), dc.Tensor(np.zeros((4, 8, 8)))])


# -- gradient checks ------------------------------------------------------

def denoise_loss(ref, h=16, w=16, seed=50):
    tgt = dc.Tensor(rng(seed).random((3, h, w)))
    refs = [dc.Tensor(rng(seed + 1).random((3, h, w)))]
    cg = ref.unet.c_guidance
    fg = dc.Tensor(rng(seed + 2).normal(size=(cg, h // 8, w // 8)))
    fgr = [dc.Tensor(rng(seed + 3).normal(size=(cg, h // 8, w // 8)))]
    wgt = rng(seed + 4).normal(size=(3, h, w))

    def f():
        out = ref.denoise(tgt, refs, fg, fgr)
        return ops.sum_(ops.mul(out, dc.Tensor(wgt)))

    return f


def test_refiner_gradcheck_float64():
    # 16x16 images give a 2x2 latent, so this also differentiates through
    # the internal pad-to-4 path.
    with dc.precision("float64"):
        ref = rf.OneStepRefiner(rng(23), c_lat=2, c_guidance=2, base=4,
                                n_heads=2)
        wake_unet(ref.unet, seed=93)
        f = denoise_loss(ref)
        report = dc.finite_difference_check(f, dict(ref.named_parameters()),
                                            eps=1e-5, max_coords_per_param=4)
        assert report.fraction_within(1e-4) == 1.0, report.summary()


def test_refiner_gradcheck_float32():
    # The refiner is smooth everywhere (convs, gelu, softmax), so the
    # 32-bit check needs no special configuration beyond waking the
    # zero-init weights; eps/zero_tol follow the float32 recipe.
    ref = rf.OneStepRefiner(rng(24), c_lat=2, c_guidance=2, base=4, n_heads=2)
    wake_unet(ref.unet, seed=94)
    f = denoise_loss(ref, seed=60)
    report = dc.finite_difference_check(f, dict(ref.named_parameters()),
                                        eps=5e-3, zero_tol=3e-3,
                                        max_coords_per_param=4)
    assert report.fraction_within(1e-2) >= 0.95, report.summary()
