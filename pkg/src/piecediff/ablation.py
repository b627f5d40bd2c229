"""Ablation runner: retrain under toggled settings and compare evaluation metrics."""

import csv
import json
import os
import time

from .config import with_overrides
from .evaluate import evaluate
from .train import train

VARIANTS_2D = {
    "base": [],
    "gcn": ["denoiser.backend=gcn"],
    "nonequivariant_encoder": ["encoder.variant=nonequivariant"],
    "invariant_encoder": ["encoder.variant=invariant"],
    "single_step": ["denoiser.single_step=true"],
}
VARIANTS_3D = dict(VARIANTS_2D, chamfer=["loss.w_cd=1.0"])


def prune_variants(rates=(0.0, 0.2, 0.6, 0.8)):
    return {f"prune_{r:g}": ["graph.sparse=true", f"graph.sparsifier.prune_fraction={r}"] for r in rates}


def ablate(instances, cfg, variants=None, out_dir=None, eval_seeds=None, log=print):
    """Train one model per variant on ``instances`` and evaluate it on the same set.

    ``variants`` maps a name to a list of dotted overrides applied on top of ``cfg``.
    """
    if variants is None:
        variants = VARIANTS_2D if cfg.task == "puzzle2d" else VARIANTS_3D
    rows = []
    for name, overrides in variants.items():
        vcfg = with_overrides(cfg, overrides)
        t0 = time.monotonic()
        state = train(instances, vcfg)
        minutes = (time.monotonic() - t0) / 60.0
        state.model.eval()
        report = evaluate(instances, state.model, vcfg, seeds=eval_seeds)
        row = {"variant": name, "overrides": " ".join(overrides), "epochs": state.epoch,
               "train_minutes": round(minutes, 3), "final_loss": state.history[-1]["loss"]}
        for key in ("direct_comparison", "part_accuracy", "rmse_rotation_deg", "rmse_translation"):
            if key in report.metrics:
                row[key] = report.metrics[key]["mean"]
                row[key + "_std"] = report.metrics[key]["std"]
        rows.append(row)
        log(json.dumps(row))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fields = sorted({k for r in rows for k in r}, key=lambda k: (k != "variant", k))
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    return rows
