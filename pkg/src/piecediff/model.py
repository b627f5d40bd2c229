"""Encoder + denoiser bundle and the clean-pose predictors used by the sampler."""

from dataclasses import replace

import numpy as np
import torch
import torch.nn as nn

from . import geometry as geo
from .denoiser import Denoiser, collate
from .encoders import make_encoder, patches_to_tensor
from .graph import build_complete, sparsify


class AssemblyModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.dim = cfg.dim
        self.encoder = make_encoder(cfg.dim, cfg.encoder)
        rot_dim = 2 if cfg.dim == 2 else 4
        self.denoiser = Denoiser(self.encoder.out_dim, cfg.dim, rot_dim, cfg.denoiser, cfg.schedule.T)

    def encode(self, instances, active):
        """Features for the active pieces of each instance (list of ``(K_i, d)`` tensors)."""
        dtype = next(self.parameters()).dtype
        if self.dim == 2:
            # group by patch size so each conv call sees one shape
            by_size = {}
            for i, (inst, idx) in enumerate(zip(instances, active)):
                by_size.setdefault(inst.patches.shape[1], []).append((i, idx))
            out = [None] * len(instances)
            for _, group in sorted(by_size.items()):
                x = patches_to_tensor(np.concatenate([instances[i].patches[idx] for i, idx in group]), dtype)
                f = self.encoder(x)
                start = 0
                for i, idx in group:
                    out[i] = f[start:start + len(idx)]
                    start += len(idx)
            return out
        x = torch.as_tensor(np.concatenate([inst.fragments[idx] for inst, idx in zip(instances, active)]),
                            dtype=dtype)
        f = self.encoder(x)
        return list(torch.split(f, [len(idx) for idx in active]))


def active_indices(inst):
    return np.flatnonzero(np.asarray(inst.present, dtype=bool))


def rotation_input(rot, dim):
    """Denoiser rotation slot: raw 2-vector in 2D, canonical quaternion of a matrix in 3D."""
    if dim == 2:
        return np.asarray(rot, dtype=np.float64)
    return geo.matrix_to_quat(rot)


def make_graph(features, trans, rot_in, graph_cfg, seed):
    g = build_complete(features, trans, rot_in)
    if graph_cfg.sparse:
        g = sparsify(g, graph_cfg.sparsifier, seed=seed)
    return g


class NetworkPredictor:
    """Wraps an ``AssemblyModel`` for the sampler: caches features and the graph per instance."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg

    def prepare(self, inst, active, seed):
        with torch.no_grad():
            self.features = self.model.encode([inst], [active])[0]
        self.active = active
        # fixed topology at inference; only the poses change between steps
        self.graph = make_graph(self.features, None, None, self.cfg.graph, self.cfg.graph.sparsifier.seed)

    def __call__(self, trans_t, rot_t, t):
        dim = self.cfg.dim
        g = replace(self.graph, translations=trans_t, rotations=rotation_input(rot_t, dim))
        dtype = next(self.model.parameters()).dtype
        with torch.no_grad():
            s, r, _ = self.model.denoiser(collate([g], [t], dtype))
        s = s.double().numpy()
        r = r.double().numpy()
        if dim == 3:
            r = geo.quat_to_matrix(r)
        return s, r


class OraclePredictor:
    """Always returns the ground-truth clean pose (sampler check independent of learning)."""

    def prepare(self, inst, active, seed):
        self.s0 = np.asarray(inst.gt_translations, dtype=np.float64)[active]
        if inst.dim == 2:
            self.r0 = np.asarray(inst.gt_rotations, dtype=np.float64)[active]
        else:
            self.r0 = geo.quat_to_matrix(inst.gt_rotations[active])

    def __call__(self, trans_t, rot_t, t):
        return self.s0.copy(), self.r0.copy()
