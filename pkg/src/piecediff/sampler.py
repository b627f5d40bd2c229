"""Reverse-chain sampler: from prior noise to assembled poses."""

from dataclasses import dataclass

import numpy as np

from . import diffusion as dif
from . import geometry as geo
from .errors import DivergenceError
from .model import NetworkPredictor, active_indices


@dataclass
class Solution:
    translations: np.ndarray   # (K, n); NaN rows for missing pieces
    rotations: np.ndarray      # (K, 2) [cos, sin] or (K, 4) quaternions; NaN rows for missing pieces
    present: np.ndarray
    degenerate: np.ndarray     # 2D rows whose readout vector collapsed to zero


def sample_prior(rng, K, dim):
    trans = rng.standard_normal((K, dim))
    if dim == 2:
        rot = rng.standard_normal((K, 2))
    else:
        rot = geo.random_rotation(rng, K)
    return trans, rot


def _finite(name, x, t):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {name} at t={t}")


def solve(instance, predictor, cfg, seed=0, sched=None):
    """Denoise one instance; ``predictor`` is a model, a ``NetworkPredictor`` or an oracle.

    The predictor maps ``(trans_t, rot_t, t)`` to clean-pose estimates
    ``(s0_hat, r0_hat)`` (2-vectors in 2D, rotation matrices in 3D).
    """
    if not hasattr(predictor, "prepare"):
        predictor = NetworkPredictor(predictor, cfg)
    sc = cfg.schedule
    sched = sched or dif.schedule_new(sc.T, sc.beta_start, sc.beta_end)
    dim = instance.dim
    active = active_indices(instance)
    K = len(active)
    rng = np.random.default_rng(seed)
    predictor.prepare(instance, active, seed)
    trans, rot = sample_prior(rng, K, dim)

    if cfg.denoiser.single_step:
        trans, rot = predictor(trans, rot, sched.T)
    else:
        steps = sched.timesteps(sc.stride)
        for i, t in enumerate(steps):
            prev = steps[i + 1] if i + 1 < len(steps) else 0
            s0, r0 = predictor(trans, rot, t)
            eps = dif.x0_to_eps(trans, s0, t, sched)
            trans = dif.reverse_step_euclidean(trans, eps, t, sched, prev_t=prev, stochastic=sc.stochastic, rng=rng)
            if dim == 2:
                eps_r = dif.x0_to_eps(rot, r0, t, sched)
                rot = dif.reverse_step_euclidean(rot, eps_r, t, sched, prev_t=prev, stochastic=sc.stochastic, rng=rng)
            elif sc.rotation_step == "printed":
                eps_r = dif.rotation_x0_to_eps(rot, r0, t, sched)
                rot = dif.reverse_step_rotation(rot, eps_r, t, sched)
            else:
                rot = dif.reverse_step_rotation_posterior(rot, r0, t, sched, prev_t=prev)
            _finite("translation", trans, t)
            _finite("rotation", rot, t)

    degenerate = np.zeros(K, dtype=bool)
    if dim == 2:
        rot, degenerate = dif.project_rotation_2d(rot)
    else:
        rot = geo.matrix_to_quat(rot)
    N = instance.num_pieces
    out_t = np.full((N, dim), np.nan)
    out_r = np.full((N, rot.shape[1]), np.nan)
    out_t[active] = trans
    out_r[active] = rot
    deg = np.zeros(N, dtype=bool)
    deg[active] = degenerate
    return Solution(out_t, out_r, np.asarray(instance.present, dtype=bool).copy(), deg)
