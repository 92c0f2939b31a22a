"""Pipeline tests: synthetic data determinism and oracles, config plumbing,
checkpoint persistence, stage training contracts, evaluation identities,
and CLI exit codes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

import fgsplat.diffcore as dc
from fgsplat import losses as ls
from fgsplat import pipeline as pl
from fgsplat.diffcore import ops
from fgsplat.diffcore.module import Adam
from fgsplat.errors import ConfigurationError, ContractError, NumericError
from fgsplat.gscene import (Camera, GaussianPrimitive, GaussianScene,
                            load_splf)
import importlib

from fgsplat.pipeline import cli as pcli
from fgsplat.pipeline import train as ptr

# the package re-exports the evaluate() function under the same name as
# the submodule, so fetch the module itself for monkeypatching
pev = importlib.import_module("fgsplat.pipeline.evaluate")
from fgsplat.rasterizer import naive_rasterize
from PIL import Image


def rng(seed):
    return np.random.default_rng(seed)


def small_config(**overrides):
    base = dict(backbone_resolution=32, detail_resolution=64, patch=8,
                d_model=48, n_heads=4, n_enc=2, n_dec=2,
                c_lat=4, unet_base=8, unet_heads=2,
                stage1_steps=3, stage2_steps=3, stage3_steps=2,
                num_scenes=2, views_per_scene=3, gaussians_per_scene=64)
    base.update(overrides)
    return pl.preset("feature-sd", **base)


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def module_bytes(module):
    return b"".join(t.data.tobytes()
                    for _, t in sorted(module.named_tensors()))


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    cfg = small_config()
    root = tmp_path_factory.mktemp("data") / "ds"
    pl.synth_dataset(root, cfg.seed, cfg.num_scenes, cfg.gaussians_per_scene,
                     cfg.views_per_scene, cfg.detail_resolution,
                     cfg.detail_resolution, cfg.feature_dim)
    return root


@pytest.fixture(scope="module")
def dataset(dataset_dir):
    return pl.load_dataset(dataset_dir)


@pytest.fixture(scope="module")
def stage1(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return pl.train_stage1(small_config(), dataset, out_dir=out)


# -- synthetic data --------------------------------------------------------

def test_synth_same_seed_byte_identical(dataset_dir, tmp_path):
    cfg = small_config()
    other = tmp_path / "again"
    pl.synth_dataset(other, cfg.seed, cfg.num_scenes,
                     cfg.gaussians_per_scene, cfg.views_per_scene,
                     cfg.detail_resolution, cfg.detail_resolution,
                     cfg.feature_dim)
    assert tree_hash(other) == tree_hash(dataset_dir)


def test_synth_view_count_and_layout(dataset_dir):
    sdir = dataset_dir / "scene_000"
    assert len(list((sdir / "images").glob("*.png"))) == 3
    with open(sdir / "cameras.json") as f:
        assert len(json.load(f)) == 3
    assert (sdir / "scene.splf").exists()


def test_rerender_from_splf_matches_png(dataset_dir):
    # The stored PNG is only 8-bit quantization away from a fresh naive
    # render of the serialized scene.
    sdir = dataset_dir / "scene_000"
    scene = load_splf(sdir / "scene.splf")
    with open(sdir / "cameras.json") as f:
        cam = Camera.from_json(json.load(f)[1])
    out = naive_rasterize(scene, cam)
    png = np.asarray(Image.open(sdir / "images" / "view_001.png"),
                     dtype=np.float64) / 255.0
    assert np.abs(out.color.data - png).max() <= 1.0 / 255.0 + 1e-9


def test_all_cameras_see_half_the_gaussians(dataset):
    for rec in dataset:
        scene = rec.load_scene()
        for cam in rec.cameras:
            assert pl.synth.visible_fraction(scene, cam) >= 0.5


def test_synth_counts_validated(tmp_path):
    with pytest.raises(ContractError, match="num_scenes"):
        pl.synth_dataset(tmp_path / "x", 0, 0, 8, 2, 64, 64)
    with pytest.raises(ContractError, match="views_per_scene"):
        pl.synth_dataset(tmp_path / "x", 0, 1, 8, 0, 64, 64)


def test_visibility_exhaustion_rejected():
    # Every Gaussian far behind the arc: no camera placement can see it.
    prims = [GaussianPrimitive(np.array([0.0, 0.0, -60.0 - i]),
                               np.full(3, -2.0), np.array([1.0, 0, 0, 0]),
                               1.0, np.full(3, 0.5), np.zeros(2))
             for i in range(4)]
    scene = GaussianScene(prims, 2)
    with pytest.raises(ContractError, match="visibility"):
        pl.make_cameras(rng(0), scene, 3, 32, 32, max_attempts=3)


def test_load_dataset_rejects_non_dataset(tmp_path):
    with pytest.raises(ContractError, match="dataset.json"):
        pl.load_dataset(tmp_path)


# -- config ----------------------------------------------------------------

def test_presets_cover_ablation_rows():
    assert list(pl.PRESETS) == ["base", "cnn-dpm", "dd-dpm",
                                "gs-feature-cnn", "sd", "feature-sd"]
    base = pl.preset("base")
    assert not base.use_detail and not base.use_refiner
    assert pl.preset("cnn-dpm").use_detail
    assert not pl.preset("cnn-dpm").use_frequency
    assert pl.preset("dd-dpm").use_frequency
    assert pl.preset("gs-feature-cnn").use_gs_feature_cnn
    assert pl.preset("sd").use_refiner
    assert not pl.preset("sd").use_feature_guidance
    assert pl.preset("feature-sd").use_feature_guidance


def test_config_detail_must_be_twice_backbone():
    with pytest.raises(ConfigurationError, match="twice"):
        pl.PipelineConfig(backbone_resolution=64, detail_resolution=256)


def test_config_resolution_power_of_two():
    with pytest.raises(ConfigurationError, match="powers of two"):
        pl.PipelineConfig(backbone_resolution=48, detail_resolution=96)


def test_config_json_roundtrip():
    cfg = small_config(seed=9)
    again = pl.PipelineConfig.from_json(cfg.to_json())
    assert again == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigurationError, match="unknown"):
        pl.PipelineConfig.from_json({"no_such_field": 1})


def test_apply_overrides_coerces_types():
    cfg = pl.apply_overrides(pl.PipelineConfig(),
                             ["stage1_steps=7", "lr_backbone=1e-3",
                              "use_detail=false"])
    assert cfg.stage1_steps == 7
    assert cfg.lr_backbone == pytest.approx(1e-3)
    assert cfg.use_detail is False


def test_apply_overrides_preset_swap_applies_first():
    cfg = pl.apply_overrides(pl.PipelineConfig(),
                             ["stage1_steps=5", "preset=sd"])
    assert cfg.use_refiner and cfg.stage1_steps == 5


def test_apply_overrides_unknown_key():
    with pytest.raises(ConfigurationError, match="unknown"):
        pl.apply_overrides(pl.PipelineConfig(), ["bogus=1"])


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="config"):
        pl.load_config(tmp_path / "missing.json")


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = small_config()
    model = ptr.build_model(cfg)
    before = module_bytes(model)
    path = pl.save_checkpoint(tmp_path / "m.ckpt", {"model": model},
                              cfg.to_json())
    other = ptr.build_model(small_config(seed=99))
    assert module_bytes(other) != before
    restored_cfg = pl.load_checkpoint(path, {"model": other})
    assert module_bytes(other) == before
    assert restored_cfg == cfg.to_json()


def test_checkpoint_manifest_mismatch(tmp_path):
    cfg = small_config()
    model = ptr.build_model(cfg)
    path = pl.save_checkpoint(tmp_path / "m.ckpt", {"model": model})
    with pytest.raises(ContractError, match="manifest"):
        pl.load_checkpoint(path, {"model": model,
                                  "refiner": ptr.build_refiner(cfg)})


def test_checkpoint_detects_corruption(tmp_path):
    model = ptr.build_model(small_config())
    path = pl.save_checkpoint(tmp_path / "m.ckpt", {"model": model})
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ContractError, match="digest"):
        pl.load_checkpoint(path, {"model": model})


def test_checkpoint_peek(tmp_path):
    cfg = small_config()
    model = ptr.build_model(cfg)
    path = pl.save_checkpoint(tmp_path / "m.ckpt", {"model": model},
                              cfg.to_json())
    assert pl.peek_config(path) == cfg.to_json()
    names = pl.peek_names(path)
    assert all(n.startswith("model/") for n in names)
    assert len(names) == len(list(model.named_tensors()))


def test_load_bundle_rebuilds_from_snapshot(tmp_path, stage1):
    path = stage1["checkpoint"]
    bundle = pl.load_bundle(path)
    assert module_bytes(bundle["model"]) == module_bytes(stage1["model"])
    assert bundle["config"].detail_resolution == 64


# -- cameras and model geometry -------------------------------------------

def test_relative_camera_identity(dataset):
    cam = dataset[0].cameras[0]
    rel = pl.relative_camera(cam, cam)
    np.testing.assert_allclose(rel.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rel.t, np.zeros(3), atol=1e-12)


def test_relative_camera_reprojects_world_points(dataset):
    # Mapping a world point into the reference frame and projecting with
    # the relative camera lands on the same pixel as the original camera.
    def project(c, x):
        x_cam = c.R @ x + c.t
        return (c.K @ x_cam)[:2] / x_cam[2]

    ref, cam = dataset[0].cameras[0], dataset[0].cameras[2]
    rel = pl.relative_camera(cam, ref)
    g = rng(3)
    for _ in range(5):
        x = g.normal(size=3) * 0.4
        x_ref = ref.R @ x + ref.t
        np.testing.assert_allclose(project(cam, x), project(rel, x_ref),
                                   atol=1e-9)


def test_predict_scene_gaussian_count(dataset):
    cfg = small_config()
    model = ptr.build_model(cfg)
    rec = dataset[0]
    with dc.no_grad():
        pack = model.predict_scene(rec.images[:2], rec.cameras[:2])
    per_view = cfg.backbone_resolution ** 2
    assert pack.mu.shape == (2 * per_view, 3)
    assert pack.feature.shape == (2 * per_view, cfg.feature_dim)


def test_predict_scene_validates_inputs(dataset):
    cfg = small_config()
    model = ptr.build_model(cfg)
    rec = dataset[0]
    with pytest.raises(ContractError, match="cameras"):
        model.predict_scene(rec.images[:2], rec.cameras[:1])
    with pytest.raises(ContractError, match="expected"):
        model.predict_scene([rec.images[0][:, :32, :32]], rec.cameras[:1])


def test_base_preset_runs_without_detail(dataset):
    cfg = small_config()
    cfg = pl.preset("base", **{k: getattr(cfg, k) for k in
                               ("backbone_resolution", "detail_resolution",
                                "patch", "d_model", "n_heads", "n_enc",
                                "n_dec")})
    model = ptr.build_model(cfg)
    assert model.detail is None
    rec = dataset[0]
    with dc.no_grad():
        _, _, color = model.render_target(rec.images[:2], rec.cameras[:2],
                                          rec.cameras[2])
    assert color.shape == (3, 64, 64)


def test_gs_feature_cnn_identity_at_init(dataset):
    cfg = small_config(use_gs_feature_cnn=True)
    model = ptr.build_model(cfg)
    rec = dataset[0]
    with dc.no_grad():
        pack = model.predict_scene(rec.images[:2], rec.cameras[:2])
        out, color = model.render_view(pack, rec.cameras[2], rec.cameras[0])
    expected = np.clip(out.color.data.transpose(2, 0, 1), 0.0, 1.0)
    np.testing.assert_array_equal(color.data, expected)
    model.post.conv2.w.data[:] = 0.05
    with dc.no_grad():
        _, color2 = model.render_view(pack, rec.cameras[2], rec.cameras[0])
    assert np.abs(color2.data - expected).max() > 1e-4


# -- view sampling ---------------------------------------------------------

def test_sample_views_holdout_regime():
    inputs, target = pl.sample_views(rng(0), 6, 3)
    assert len(inputs) == 2 and target not in inputs


def test_sample_views_overfit_regime():
    inputs, target = pl.sample_views(rng(0), 2, 3)
    assert sorted(inputs) == [0, 1] and target in inputs


def test_select_inputs_excludes_target():
    assert pev.select_inputs(4, 2, 3) == [0, 1]
    assert pev.select_inputs(2, 0, 3) == [1]
    assert pev.select_inputs(1, 0, 3) == [0]


# -- training stages -------------------------------------------------------

def test_stage1_losses_replay_bitwise(dataset, stage1):
    again = pl.train_stage1(small_config(), dataset)
    assert again["losses"] == stage1["losses"]


def test_stage1_zero_steps_equals_init(dataset, tmp_path):
    cfg = small_config(stage1_steps=0)
    result = pl.train_stage1(cfg, dataset, out_dir=tmp_path)
    assert result["losses"] == []
    assert module_bytes(result["model"]) == module_bytes(ptr.build_model(cfg))


def test_stage1_step0_loss_matches_independent_recompute(dataset, stage1):
    cfg = small_config()
    srng = np.random.default_rng([cfg.seed, ptr._STAGE1, 0])
    rec = dataset[int(srng.integers(len(dataset)))]
    inputs, target = pl.sample_views(srng, rec.n_views, cfg.views_per_sample)
    model = ptr.build_model(cfg)
    res = pl.render_and_refine(model, None,
                               [rec.images[i] for i in inputs],
                               [rec.cameras[i] for i in inputs],
                               rec.cameras[target])
    loss = ls.loss_r(res["i_r"], dc.Tensor(rec.images[target]),
                     ptr.build_proxy(cfg), pl.weights_from(cfg))
    assert float(loss.data) == stage1["losses"][0]


def test_stage1_writes_csv(stage1):
    text = stage1["csv"].read_text().splitlines()
    assert text[0] == "step,loss"
    assert len(text) == 1 + small_config().stage1_steps


def test_stage1_numeric_abort_names_step(dataset, monkeypatch):
    def bad_loss(*a, **k):
        return dc.Tensor(np.float32(np.nan))
    monkeypatch.setattr(ptr, "loss_r", bad_loss)
    with pytest.raises(NumericError, match="step 0"):
        pl.train_stage1(small_config(stage1_steps=2), dataset)


def test_stage2_never_touches_backbone(dataset, stage1):
    before = module_bytes(stage1["model"])
    pl.train_stage2(small_config(), dataset, stage1["model"])
    assert module_bytes(stage1["model"]) == before


def test_stage2_zero_steps_refiner_equals_init(dataset, stage1):
    cfg = small_config(stage2_steps=0)
    result = pl.train_stage2(cfg, dataset, stage1["model"])
    assert module_bytes(result["refiner"]) == \
        module_bytes(ptr.build_refiner(cfg))


def test_stage2_requires_refiner_enabled(dataset, stage1):
    with pytest.raises(ContractError, match="use_refiner"):
        pl.train_stage2(small_config(use_refiner=False,
                                     use_feature_guidance=False),
                        dataset, stage1["model"])


def test_stage2_updates_refiner(dataset, stage1):
    cfg = small_config()
    result = pl.train_stage2(cfg, dataset, stage1["model"])
    assert module_bytes(result["refiner"]) != \
        module_bytes(ptr.build_refiner(cfg))
    assert len(result["losses"]) == cfg.stage2_steps


def test_stage3_trains_all_modules(dataset, stage1):
    cfg = small_config()
    model = pl.load_bundle(stage1["checkpoint"])["model"]
    refiner = ptr.build_refiner(cfg)
    m0, r0 = module_bytes(model), module_bytes(refiner)
    result = pl.train_stage3_joint(cfg, dataset, model, refiner)
    assert module_bytes(model) != m0
    assert module_bytes(refiner) != r0
    assert len(result["losses"]) == cfg.stage3_steps


def test_stage3_freeze_backbone(dataset, stage1):
    cfg = small_config(freeze_backbone_stage3=True)
    model = pl.load_bundle(stage1["checkpoint"])["model"]
    m0 = module_bytes(model)
    pl.train_stage3_joint(cfg, dataset, model, ptr.build_refiner(cfg))
    assert module_bytes(model) == m0


def test_discriminator_learns_frozen_pairs(dataset, stage1):
    # Sanity oracle: with the generator frozen, discriminator accuracy on
    # the fixed real/fake pools passes 0.5 within 200 steps.
    cfg = small_config()
    pairs = ptr.build_pairs(cfg, dataset, stage1["model"])
    proxy = ptr.build_proxy(cfg)
    disc = ptr.build_discriminator(cfg, proxy)
    weights = pl.weights_from(cfg)
    opt = Adam(disc.named_parameters(), lr=cfg.lr_disc,
               clip_norm=cfg.clip_norm)
    reals = [dc.Tensor(p["clean"]) for p in pairs[:3]]
    fakes = [dc.Tensor(p["noisy"]) for p in pairs[:3]]
    for _ in range(200):
        term = ls.gan_loss(reals, fakes, disc, weights)["discriminator"]
        opt.step(dc.backward(ops.neg(term)))
    with dc.no_grad():
        correct = [float(disc(r).data) > 0.5 for r in reals]
        correct += [float(disc(f).data) < 0.5 for f in fakes]
    assert np.mean(correct) > 0.5


# -- evaluation ------------------------------------------------------------

def test_evaluate_gt_against_itself(dataset, monkeypatch):
    def perfect(model, refiner, images, cams, target_cam):
        for rec in dataset:
            for v, cam in enumerate(rec.cameras):
                if cam is target_cam:
                    return {"i_r": dc.Tensor(rec.images[v]), "i_d": None}
        raise AssertionError("unknown target camera")

    monkeypatch.setattr(pev, "render_and_refine", perfect)
    report = pev.evaluate(small_config(), dataset, model=None)
    for row in report["rows"]:
        assert row["psnr"] == 100.0
        assert row["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert report["aggregate"]["psnr"] == 100.0


def test_evaluate_report_matches_schema(dataset, stage1, tmp_path):
    import jsonschema
    cfg = small_config()
    refiner = ptr.build_refiner(cfg)
    report = pev.evaluate(cfg, dataset, stage1["model"], refiner=refiner)
    path = pev.write_report(tmp_path / "report.json", report)
    with open(Path(__file__).resolve().parents[1]
              / "docs" / "metrics_schema.json") as f:
        schema = json.load(f)
    jsonschema.validate(json.loads(path.read_text()), schema)
    assert {"psnr_refined", "ssim_refined",
            "perceptual_refined"} <= set(report["rows"][0])


def test_evaluate_aggregate_is_mean_of_rows(dataset, stage1):
    report = pev.evaluate(small_config(), dataset, stage1["model"])
    for key, value in report["aggregate"].items():
        assert value == pytest.approx(
            np.mean([r[key] for r in report["rows"]]), rel=1e-12)
    assert report["count"] == len(report["rows"])


def test_evaluate_deterministic(dataset, stage1):
    a = pev.evaluate(small_config(), dataset, stage1["model"])
    b = pev.evaluate(small_config(), dataset, stage1["model"])
    assert a == b


# -- CLI -------------------------------------------------------------------

def test_cli_synth_and_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(small_config(num_scenes=1).to_json()))
    code = pcli.main(["synth-data", "--config", str(cfg_path),
                      "--out", str(tmp_path / "ds")])
    assert code == 0
    assert (tmp_path / "ds" / "scene_000" / "scene.splf").exists()


def test_cli_contract_error_is_exit_2(tmp_path, capsys):
    code = pcli.main(["train-recon", "--data", str(tmp_path / "nope"),
                      "--out", str(tmp_path / "out")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_cli_bad_override_is_exit_2(tmp_path, capsys):
    code = pcli.main(["synth-data", "--out", str(tmp_path / "ds"),
                      "--set", "tile_size=13"])
    assert code == 2


def test_cli_numeric_error_is_exit_3(monkeypatch, capsys):
    def failing(precision):
        return [{"name": "render-loss", "precision": precision,
                 "fraction": 0.0, "tolerance": 1e-4, "ok": False,
                 "summary": "synthetic failure"}]
    monkeypatch.setattr(pcli, "run_gradcheck", failing)
    code = pcli.main(["gradcheck"])
    assert code == 3
    assert "numeric error" in capsys.readouterr().err


def test_cli_gradcheck_passes():
    assert pcli.main(["gradcheck"]) == 0


def test_cli_render_writes_png(dataset_dir, stage1, tmp_path):
    out = tmp_path / "view.png"
    code = pcli.main(["render", "--ckpt", str(stage1["checkpoint"]),
                      "--data", str(dataset_dir),
                      "--scene", "0", "--view", "1", "--out", str(out)])
    assert code == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (64, 64, 3)


def test_cli_eval_writes_report(dataset_dir, stage1, tmp_path):
    out = tmp_path / "metrics.json"
    code = pcli.main(["eval", "--ckpt", str(stage1["checkpoint"]),
                      "--data", str(dataset_dir), "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["count"] == 6
