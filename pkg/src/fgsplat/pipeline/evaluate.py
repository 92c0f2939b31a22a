"""Evaluation runs: per-view metric rows plus their aggregate.

Every view of every scene is treated as a held-out target rendered from
the remaining views (deterministic index-order selection, no sampling).
Rows report psnr/ssim/perceptual for the raw render, plus ``*_refined``
columns when a refiner is present. The aggregate is the plain mean of the
rows, recomputable by an independent pass; the JSON layout is documented
in docs/metrics_schema.json.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..errors import ContractError
from ..losses import psnr, ssim
from .model import render_and_refine
from .train import build_proxy


def select_inputs(n_views, target, views_per_sample):
    """Reference views for a target: first others in index order."""
    others = [i for i in range(n_views) if i != target]
    n_in = max(1, views_per_sample - 1)
    if not others:
        return [target]
    return others[:n_in]


def _metrics(img_cf, gt_cf, proxy):
    return {
        "psnr": float(psnr(img_cf, gt_cf)),
        "ssim": float(ssim(img_cf, gt_cf)),
        "perceptual": float(proxy.distance(
            dc.Tensor(img_cf), dc.Tensor(gt_cf)).data),
    }


def evaluate(config, dataset, model, refiner=None):
    """Run the model over every (scene, view) pair; returns the report."""
    if not dataset:
        raise ContractError("evaluate needs a non-empty dataset")
    proxy = build_proxy(config)
    rows = []
    for rec in dataset:
        for v in range(rec.n_views):
            inputs = select_inputs(rec.n_views, v, config.views_per_sample)
            with dc.no_grad():
                res = render_and_refine(model, refiner,
                                        [rec.images[i] for i in inputs],
                                        [rec.cameras[i] for i in inputs],
                                        rec.cameras[v])
            gt = rec.images[v]
            row = {"scene": rec.name, "view": v}
            row.update(_metrics(res["i_r"].data, gt, proxy))
            if res["i_d"] is not None:
                refined = _metrics(res["i_d"].data, gt, proxy)
                row.update({f"{k}_refined": val
                            for k, val in refined.items()})
            rows.append(row)
    return {"rows": rows, "aggregate": aggregate_rows(rows),
            "count": len(rows)}


def aggregate_rows(rows):
    """Mean of every numeric metric column across rows."""
    if not rows:
        raise ContractError("cannot aggregate an empty row list")
    keys = [k for k in rows[0] if k not in ("scene", "view")]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def write_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return path
