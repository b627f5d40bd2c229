"""Shared builders and oracles for the test suite."""

import math

import numpy as np
import torch

from piecediff import geometry as geo
from piecediff.denoiser import Denoiser, DenoiserConfig, collate
from piecediff.graph import SparsifierConfig, build_complete, sparsify
from piecediff.metrics import cell_centers, loss_rotation, loss_translation


def small_denoiser(seed, dim=3, feat_dim=6, backend="attention", dtype=torch.float64, T=50):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(layers=2, hidden=8, heads=2, time_dim=4, backend=backend, max_virtual=2)
    rot_dim = 2 if dim == 2 else 4
    return Denoiser(feat_dim, dim, rot_dim, cfg, T).to(dtype)


def small_graph(seed, M=4, dim=3, feat_dim=6, virtual=2):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((M, feat_dim))
    trans = rng.standard_normal((M, dim))
    rot = rng.standard_normal((M, 2)) if dim == 2 else geo.matrix_to_quat(geo.random_rotation(rng, M))
    g = build_complete(feats, trans, rot)
    if virtual:
        g = sparsify(g, SparsifierConfig(prune_fraction=0.5, virtual_count=virtual, seed=seed))
    gt_t = rng.uniform(-1, 1, (M, dim))
    gt_r = geo.angle2d_from_theta(rng.uniform(0, 2 * np.pi, M)) if dim == 2 else \
        geo.matrix_to_quat(geo.random_rotation(rng, M))
    return g, gt_t, gt_r


def composite_loss(model, batch, gt_t, gt_r):
    s, r, _ = model(batch)
    dtype = s.dtype
    return loss_translation(torch.as_tensor(gt_t, dtype=dtype), s) + \
        loss_rotation(torch.as_tensor(gt_r, dtype=dtype), r)


def finite_difference_check(model, batch, gt_t, gt_r, step=1e-5, zero_floor=1e-5):
    """Per-tensor relative error between autograd and central differences.

    Returns ``{name: rel_err}``; the relative error is measured against the
    larger of the two gradient norms, floored at ``zero_floor``. The floor
    matters for tensors whose exact gradient is zero, e.g. the key bias
    (adding a constant to all scores of a query leaves its softmax unchanged):
    there both estimates are round-off (~1e-10) and the error is absolute.
    """
    model.zero_grad()
    loss = composite_loss(model, batch, gt_t, gt_r)
    loss.backward()
    errs = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = composite_loss(model, batch, gt_t, gt_r).item()
                flat[i] = old - step
                dn = composite_loss(model, batch, gt_t, gt_r).item()
                flat[i] = old
                nflat[i] = (up - dn) / (2 * step)
            scale = max(analytic.norm().item(), numeric.norm().item(), zero_floor)
            errs[name] = (analytic - numeric).norm().item() / scale
    return errs


def gradient_check_instance(seed, dim=3):
    model = small_denoiser(seed, dim=dim)
    # non-zero virtual rows so every tensor gets a generic gradient
    with torch.no_grad():
        model.virtual_features.normal_(0, 0.5, generator=torch.Generator().manual_seed(seed))
    g, gt_t, gt_r = small_graph(seed, dim=dim)
    batch = collate([g], [17], torch.float64)
    return model, batch, gt_t, gt_r


def brute_chamfer(P, Q):
    d = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(-1)
    return float(d.min(1).mean() + d.min(0).mean())


def jitter_instance(n, rng, frac=0.999):
    """Ground-truth lattice poses plus a predicted copy jittered strictly inside the snapping cells."""
    centers = cell_centers(n)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    gt_t = np.stack([centers[jj.ravel()], centers[ii.ravel()]], axis=1)
    k = rng.integers(0, 4, n * n)
    gt_r = geo.Z4[k]
    half = 1.0 / n
    pred_t = gt_t + rng.uniform(-half, half, gt_t.shape) * frac
    dtheta = rng.uniform(-math.pi / 4, math.pi / 4, n * n) * frac
    pred_r = geo.angle2d_from_theta(k * math.pi / 2 + dtheta) * rng.uniform(0.1, 3.0, (n * n, 1))
    return gt_t, gt_r, pred_t, pred_r
