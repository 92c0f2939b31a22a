"""Synthetic scene and dataset generation.

Each scene is a textured Gaussian cluster floating above a flat ground
plane, photographed by cameras on a jittered arc that all face the cluster.
Ground-truth images come from the naive reference renderer, so the stored
PNGs are oracle-grade up to 8-bit quantization. Everything derives from one
seeded generator per scene: the same seed always produces byte-identical
directories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import diffcore as dc
from ..errors import ContractError
from ..gscene import (Camera, GaussianPrimitive, GaussianScene, load_splf,
                      look_at, save_splf)
from ..rasterizer import ScenePack, naive_rasterize, project_scene_t

MIN_VISIBLE_FRACTION = 0.5
_ARC_DEGREES = 40.0
_RADIUS = 2.6


def make_scene(rng, n_gaussians, feature_dim):
    """Random textured cluster plus a ground plane; n_gaussians total."""
    if n_gaussians <= 0:
        raise ContractError(f"scene needs > 0 Gaussians, got {n_gaussians}")
    plane_n = min(36, n_gaussians // 3)
    cluster_n = n_gaussians - plane_n
    prims = []

    centers = rng.normal(0.0, 0.4, size=(3, 3)) * np.array([1.0, 0.6, 0.7])
    phases = rng.uniform(0, 2 * np.pi, size=3)
    freq = rng.uniform(5.0, 9.0)
    for i in range(cluster_n):
        c = centers[i % len(centers)]
        mu = c + rng.normal(0.0, 0.18, size=3)
        log_scale = rng.normal(-2.9, 0.35, size=3)
        quat = rng.normal(size=4)
        color = np.clip(0.5 + 0.3 * np.sin(freq * mu[0] + freq * mu[1]
                                           + phases)
                        + rng.normal(0.0, 0.08, size=3), 0.05, 0.95)
        prims.append(GaussianPrimitive(
            mu, log_scale, quat, float(rng.uniform(0.8, 2.5)), color,
            rng.normal(0.0, 0.5, size=feature_dim)))

    if plane_n:
        side = int(np.ceil(np.sqrt(plane_n)))
        xs = np.linspace(-0.9, 0.9, side)
        tone = rng.uniform(0.25, 0.75, size=3)
        for i in range(plane_n):
            gx, gz = xs[i % side], xs[i // side]
            mu = np.array([gx, 0.62, gz]) + rng.normal(0, 0.01, size=3)
            checker = 0.18 if (i % side + i // side) % 2 else -0.12
            color = np.clip(tone + checker + rng.normal(0, 0.03, size=3),
                            0.05, 0.95)
            prims.append(GaussianPrimitive(
                mu, np.array([-1.5, -3.5, -1.5]), np.array([1.0, 0, 0, 0]),
                2.2, color, rng.normal(0.0, 0.5, size=feature_dim)))

    return GaussianScene(prims, feature_dim)


def visible_fraction(scene, cam):
    """Fraction of Gaussians whose projected center lands inside the image."""
    pack = ScenePack.from_scene(scene)
    with dc.no_grad():
        proj = project_scene_t(pack.mu, pack.scale, pack.quat, cam)
    if proj.kept.size == 0:
        return 0.0
    mu2d = proj.mu2d.data
    inside = ((mu2d[:, 0] >= 0) & (mu2d[:, 0] <= cam.width - 1)
              & (mu2d[:, 1] >= 0) & (mu2d[:, 1] <= cam.height - 1))
    return float(inside.sum()) / len(scene)


def make_cameras(rng, scene, n_views, width, height, max_attempts=25):
    """Jittered arc of cameras, each seeing >= 50% of the Gaussians."""
    if n_views <= 0:
        raise ContractError(f"need > 0 views, got {n_views}")
    fx = 1.15 * width
    fy = 1.15 * height
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    base = np.linspace(-_ARC_DEGREES, _ARC_DEGREES, n_views)
    for _ in range(max_attempts):
        cams = []
        for i in range(n_views):
            theta = np.deg2rad(base[i] + rng.uniform(-4.0, 4.0))
            r = _RADIUS + rng.uniform(-0.2, 0.2)
            eye = (r * np.sin(theta), -0.15 + rng.uniform(-0.1, 0.1),
                   -r * np.cos(theta))
            target = rng.normal(0.0, 0.04, size=3)
            cams.append(look_at(eye, target, (0.0, -1.0, 0.0),
                                fx, fy, cx, cy, width, height))
        if all(visible_fraction(scene, c) >= MIN_VISIBLE_FRACTION
               for c in cams):
            return cams
    raise ContractError(
        f"could not place {n_views} cameras with >= "
        f"{MIN_VISIBLE_FRACTION:.0%} visibility in {max_attempts} attempts")


def _to_png_bytes(color_hw3):
    arr = np.clip(color_hw3 * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def _write_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write("\n")


def synth_dataset(root, seed, num_scenes, gaussians_per_scene, views_per_scene,
                  width, height, feature_dim=8):
    """Generate a dataset directory; deterministic in all arguments.

    Layout: root/dataset.json plus one scene_NNN/ directory per scene with
    images/view_NNN.png, cameras.json, and the ground-truth scene.splf.
    """
    for name, v in (("num_scenes", num_scenes),
                    ("gaussians_per_scene", gaussians_per_scene),
                    ("views_per_scene", views_per_scene)):
        if v <= 0:
            raise ContractError(f"{name} must be > 0, got {v}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "dataset.json", {
        "seed": int(seed), "num_scenes": int(num_scenes),
        "gaussians_per_scene": int(gaussians_per_scene),
        "views_per_scene": int(views_per_scene),
        "width": int(width), "height": int(height),
        "feature_dim": int(feature_dim),
    })
    for s in range(num_scenes):
        rng = np.random.default_rng([int(seed), s])
        scene = make_scene(rng, gaussians_per_scene, feature_dim)
        cams = make_cameras(rng, scene, views_per_scene, width, height)
        sdir = root / f"scene_{s:03d}"
        (sdir / "images").mkdir(parents=True, exist_ok=True)
        save_splf(sdir / "scene.splf", scene)
        _write_json(sdir / "cameras.json", [c.to_json() for c in cams])
        for v, cam in enumerate(cams):
            out = naive_rasterize(scene, cam)
            img = _to_png_bytes(out.color.data)
            img.save(sdir / "images" / f"view_{v:03d}.png")
    return root


@dataclass
class SceneRecord:
    """One loaded scene: float images in [0,1], cameras, and the GT scene."""

    name: str
    images: list      # (3, H, W) float32 arrays, channel-first
    cameras: list     # Camera per view
    splf_path: Path

    def load_scene(self):
        return load_splf(self.splf_path)

    @property
    def n_views(self):
        return len(self.images)


def load_dataset(root):
    """Read back a synth_dataset directory into SceneRecords."""
    root = Path(root)
    if not (root / "dataset.json").exists():
        raise ContractError(f"{root} is not a dataset (missing dataset.json)")
    records = []
    for sdir in sorted(root.glob("scene_*")):
        with open(sdir / "cameras.json") as f:
            cams = [Camera.from_json(d) for d in json.load(f)]
        images = []
        for v in range(len(cams)):
            png = sdir / "images" / f"view_{v:03d}.png"
            arr = np.asarray(Image.open(png), dtype=np.float32) / 255.0
            images.append(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        records.append(SceneRecord(sdir.name, images, cams, sdir / "scene.splf"))
    if not records:
        raise ContractError(f"dataset at {root} contains no scenes")
    return records
