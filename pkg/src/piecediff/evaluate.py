"""Run the sampler over a dataset and aggregate metrics across seeds."""

import numpy as np

from . import metrics as M
from .data import with_missing
from .errors import ConfigError
from .sampler import solve


def score_instance(inst, trans, rots):
    """Metrics for one instance given predicted translations and rotation reps (full-size arrays)."""
    mask = np.asarray(inst.present, dtype=bool)
    gt_t = np.asarray(inst.gt_translations, dtype=np.float64)
    gt_r = np.asarray(inst.gt_rotations, dtype=np.float64)
    rec = {
        "evaluated_pieces": int(mask.sum()),
        "rmse_rotation_deg": M.rmse_rotation_deg(gt_r[mask], rots[mask]),
        "rmse_translation": M.rmse_translation(gt_t[mask], trans[mask]),
    }
    if inst.dim == 2:
        dc, info = M.direct_comparison(gt_t, gt_r, np.nan_to_num(trans), np.nan_to_num(rots, nan=1.0),
                                       inst.n, mask=mask, return_details=True)
        rec["direct_comparison"] = dc
        rec["collisions"] = info["collisions"]
    else:
        rec["part_accuracy"] = M.part_accuracy(inst.fragments[mask], trans[mask], rots[mask],
                                               gt_t[mask], gt_r[mask])
    return rec


def evaluate(instances, predictor, cfg, seeds=None, missing=None, predictor_factory=None):
    """Solve every instance once per seed; metrics are averaged per seed, then mean/std over seeds.

    ``missing`` removes that fraction of pieces (seeded per run) before solving.
    """
    task = cfg.task
    for inst in instances:
        if inst.kind != task:
            raise ConfigError(f"dataset holds {inst.kind} instances but the config task is {task}")
    seeds = cfg.eval.seeds if seeds is None else seeds
    missing = cfg.eval.missing if missing is None else missing
    per_seed = {}
    records = []
    for seed in seeds:
        recs = []
        for i, inst in enumerate(instances):
            if missing:
                inst = with_missing(inst, missing, seed * 7919 + i)
            sol = solve(inst, predictor, cfg, seed=seed * 104729 + i)
            rec = score_instance(inst, sol.translations, sol.rotations)
            rec.update(index=i, seed=int(seed))
            recs.append(rec)
        records.extend(recs)
        for key in ("rmse_rotation_deg", "rmse_translation", "direct_comparison", "part_accuracy"):
            vals = [r[key] for r in recs if key in r]
            if vals:
                per_seed.setdefault(key, []).append(float(np.mean(vals)))
    report = M.EvalReport(task)
    for key, vals in per_seed.items():
        report.metrics[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
        setattr(report, key, float(np.mean(vals)))
    report.instances = records
    return report
