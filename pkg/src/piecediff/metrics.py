"""Training losses and evaluation metrics.

Rotations are passed as representation vectors: ``(M, 2)`` [cos, sin] in 2D or
``(M, 4)`` unit quaternions in 3D; ``(M, n, n)`` matrices are accepted too.
The losses work on numpy arrays and on torch tensors (differentiably).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import DimensionError, EmptyInputError

CHAMFER_CONVENTION = "symmetric sum of mean squared nearest-neighbour distances"
PA_THRESHOLD = 0.01


def rep_to_matrix(r):
    """Rotation representation -> matrix, numpy or torch."""
    # (M, n, n) stacks or a lone 3x3 are already matrices; (M, 2) is always read as angle vectors
    if (r.ndim == 3 and r.shape[-1] == r.shape[-2]) or r.shape[-2:] == (3, 3):
        return r
    if isinstance(r, torch.Tensor):
        if r.shape[-1] == 2:
            c, s = r[..., 0], r[..., 1]
            return torch.stack([c, -s, s, c], dim=-1).reshape(r.shape[:-1] + (2, 2))
        w, x, y, z = r.unbind(-1)
        return torch.stack([
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1).reshape(r.shape[:-1] + (3, 3))
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] == 2:
        return geo.angle2d_to_matrix(r)
    return geo.quat_to_matrix(r)


def _masked_mean(per_piece, mask):
    if mask is None:
        return per_piece.mean()
    if isinstance(per_piece, torch.Tensor):
        m = torch.as_tensor(mask, dtype=per_piece.dtype)
        return (per_piece * m).sum() / m.sum().clamp_min(1.0)
    m = np.asarray(mask, dtype=np.float64)
    return float((per_piece * m).sum() / max(m.sum(), 1.0))


def loss_translation(gt, pred, mask=None):
    """Mean squared L2 distance between translations over (unmasked) pieces."""
    if gt.shape != pred.shape:
        raise DimensionError(f"translation shapes differ: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    return _masked_mean(((gt - pred) ** 2).sum(-1), mask)


def loss_rotation(gt, pred, mask=None):
    """Mean squared Frobenius norm of ``R_gt^T R_pred - I``."""
    if gt.shape[0] != pred.shape[0]:
        raise DimensionError("piece count mismatch")
    Rg, Rp = rep_to_matrix(gt), rep_to_matrix(pred)
    if isinstance(Rp, torch.Tensor):
        Rg = torch.as_tensor(Rg, dtype=Rp.dtype)
        eye = torch.eye(Rp.shape[-1], dtype=Rp.dtype)
        diff = Rg.transpose(-1, -2) @ Rp - eye
    else:
        diff = np.swapaxes(Rg, -1, -2) @ Rp - np.eye(Rp.shape[-1])
    return _masked_mean((diff ** 2).sum((-2, -1)), mask)


def chamfer_distance(P, Q):
    """Symmetric Chamfer distance: mean_P min_Q |p-q|^2 + mean_Q min_P |p-q|^2 (KD-tree)."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyInputError("empty point cloud")
    _, iq = cKDTree(Q).query(P)
    _, ip = cKDTree(P).query(Q)
    d_pq = ((P - Q[iq]) ** 2).sum(-1)
    d_qp = ((Q - P[ip]) ** 2).sum(-1)
    return float(d_pq.mean() + d_qp.mean())


def chamfer_torch(P, Q):
    """Differentiable Chamfer distance for batched clouds ``(B, N, 3)``; returns ``(B,)``."""
    d = torch.cdist(P, Q) ** 2
    return d.min(-1).values.mean(-1) + d.min(-2).values.mean(-1)


def pose_cloud(cloud, rotation, translation):
    """Apply rotation (rep or matrix) then translation to a centered cloud."""
    R = rep_to_matrix(np.asarray(rotation, dtype=np.float64))
    return np.asarray(cloud) @ R.T + np.asarray(translation)


def part_accuracy(pieces, pred_trans, pred_rot, gt_trans, gt_rot, threshold=PA_THRESHOLD, mask=None,
                  return_per_piece=False):
    """Fraction of pieces whose posed Chamfer distance to the ground truth is below ``threshold``."""
    cds = np.array([chamfer_distance(pose_cloud(c, pr, pt), pose_cloud(c, gr, gt))
                    for c, pt, pr, gt, gr in zip(pieces, pred_trans, pred_rot, gt_trans, gt_rot)])
    ok = cds < threshold
    if mask is not None:
        ok = ok[np.asarray(mask, dtype=bool)]
    frac = float(ok.mean()) if len(ok) else 0.0
    return (frac, cds) if return_per_piece else frac


def rotation_errors_rad(gt, pred):
    Rg, Rp = rep_to_matrix(np.asarray(gt, dtype=np.float64)), rep_to_matrix(np.asarray(pred, dtype=np.float64))
    if Rg.shape[-1] == 2:
        rel = np.swapaxes(Rg, -1, -2) @ Rp
        return np.abs(np.arctan2(rel[..., 1, 0], rel[..., 0, 0]))
    return geo.rotation_angle(np.swapaxes(Rg, -1, -2) @ Rp)


def rmse_rotation_deg(gt, pred, mask=None):
    e = rotation_errors_rad(gt, pred)
    if mask is not None:
        e = e[np.asarray(mask, dtype=bool)]
    return float(np.degrees(np.sqrt(np.mean(e ** 2)))) if len(e) else 0.0


def rmse_translation(gt, pred, mask=None):
    e = ((np.asarray(gt, dtype=np.float64) - np.asarray(pred, dtype=np.float64)) ** 2).sum(-1)
    if mask is not None:
        e = e[np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(e))) if len(e) else 0.0


def cell_centers(n):
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def snap_translation(xy, n):
    """Nearest lattice cell index per axis on the [-1, 1] board; ties go to the lower index."""
    idx = np.ceil((np.asarray(xy, dtype=np.float64) + 1.0) * n / 2.0) - 1
    return np.clip(idx, 0, n - 1).astype(np.int64)


def snap_rotation(r):
    """Nearest multiple of pi/2 as an index in 0..3; ties go to the smaller angle."""
    theta = geo.angle2d_theta(r)
    return np.mod(np.ceil(theta / (np.pi / 2) - 0.5), 4).astype(np.int64)


def direct_comparison(gt_trans, gt_rot, pred_trans, pred_rot, n, mask=None, return_details=False):
    """Fraction of pieces whose snapped cell and snapped quarter turn both match."""
    gc, pc = snap_translation(gt_trans, n), snap_translation(pred_trans, n)
    gk, pk = snap_rotation(gt_rot), snap_rotation(pred_rot)
    ok = np.all(gc == pc, axis=-1) & (gk == pk)
    keep = np.ones(len(ok), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    frac = float(ok[keep].mean()) if keep.any() else 0.0
    if not return_details:
        return frac
    cells = pc[keep][:, 0] * n + pc[keep][:, 1]
    collisions = int(len(cells) - len(np.unique(cells)))
    return frac, {"correct": ok, "collisions": collisions}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["convention", "task", "num_instances", "metrics", "instances"],
    "properties": {
        "convention": {
            "type": "object",
            "required": ["chamfer", "pa_threshold", "rmse_translation_scale"],
        },
        "task": {"enum": ["puzzle2d", "frag3d"]},
        "num_instances": {"type": "integer", "minimum": 0},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mean", "std"],
                "properties": {"mean": {"type": "number"}, "std": {"type": "number", "minimum": 0},
                               "values": {"type": "array", "items": {"type": "number"}}},
            },
        },
        "instances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "evaluated_pieces"],
                "properties": {
                    "rmse_rotation_deg": {"type": "number", "minimum": 0},
                    "rmse_translation": {"type": "number", "minimum": 0},
                    "part_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "direct_comparison": {"type": "number", "minimum": 0, "maximum": 1},
                    "evaluated_pieces": {"type": "integer", "minimum": 0},
                    "collisions": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


@dataclass
class EvalReport:
    task: str
    rmse_rotation_deg: float = 0.0
    rmse_translation: float = 0.0          # board / object units; multiply by 100 for the x1e-2 view
    part_accuracy: float = float("nan")    # 3D only
    direct_comparison: float = float("nan")  # 2D only
    metrics: dict = field(default_factory=dict)   # name -> {"mean", "std", "values"}
    instances: list = field(default_factory=list)

    def to_dict(self):
        return {
            "convention": {"chamfer": CHAMFER_CONVENTION, "pa_threshold": PA_THRESHOLD,
                           "rmse_translation_scale": "reported x1e-2 in tables; stored in raw units"},
            "task": self.task,
            "num_instances": len(self.instances),
            "metrics": {k: {"mean": float(v["mean"]), "std": float(v["std"]),
                            "values": [float(x) for x in v.get("values", [])]} for k, v in self.metrics.items()},
            "instances": self.instances,
            "summary": {k: v for k, v in asdict(self).items() if k not in ("metrics", "instances", "task")
                        and v == v},
        }

    def to_json(self, path=None):
        s = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s
