"""Noise schedules and forward/reverse chains for translations and rotations.

Timesteps are 1-based: ``t = 1..T``; ``alpha_bar(0)`` is defined as 1.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def a(self, t):
        self._check_t(t)
        return float(self.alpha[t - 1])

    def b(self, t):
        self._check_t(t)
        return float(self.beta[t - 1])

    def abar(self, t):
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def timesteps(self, stride=1):
        """Descending sampling sequence T, T-stride, ..., ending at 1."""
        if stride < 1:
            raise ConfigError("stride must be >= 1")
        seq = list(range(self.T, 0, -stride))
        if seq[-1] != 1:
            seq.append(1)
        return seq


def schedule_new(T=300, beta_start=1e-4, beta_end=0.02):
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(T, dtype=np.float64) * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Euclidean chain


def forward_euclidean(x0, t, z, sched):
    x0, z = _same_shape(x0, z)
    ab = sched.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def _guard(ab):
    if ab >= 1.0:
        raise ZeroDivisionError("alpha_bar_t == 1: noise is undefined")


def x0_to_eps(x_t, x0_hat, t, sched):
    x_t, x0_hat = _same_shape(x_t, x0_hat)
    ab = sched.abar(t)
    _guard(ab)
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def eps_to_x0(x_t, eps, t, sched):
    x_t, eps = _same_shape(x_t, eps)
    ab = sched.abar(t)
    _guard(ab)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def reverse_step_euclidean(x_t, eps_hat, t, sched, prev_t=None, stochastic=False, rng=None):
    """One reverse step ``t -> prev_t`` (default ``t - 1``).

    For ``prev_t = t - 1`` this is ``(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``;
    larger jumps use the same form with ``alpha_t`` replaced by ``abar_t / abar_prev``.
    ``stochastic`` adds posterior noise (DDPM ablation); the default is deterministic.
    """
    x_t, eps_hat = _same_shape(x_t, eps_hat)
    prev_t = t - 1 if prev_t is None else prev_t
    if not 0 <= prev_t < t:
        raise ValueError(f"prev_t={prev_t} must lie in [0, {t})")
    ab = sched.abar(t)
    a = sched.a(t) if prev_t == t - 1 else ab / sched.abar(prev_t)
    out = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if stochastic and prev_t > 0:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        var = (1.0 - sched.abar(prev_t)) / (1.0 - ab) * (1.0 - a)
        out = out + np.sqrt(var) * rng.standard_normal(out.shape)
    return out


# ---------------------------------------------------------------------------
# SO(3) chain


def forward_rotation_so3(r0, t, rng, sched, return_noise=False):
    """Sample ``R_t ~ IGSO3(lambda(sqrt(abar_t), r0), 1 - abar_t)``.

    ``r0`` may be a stack ``(M, 3, 3)``; one draw per entry. With
    ``return_noise`` also returns the right-multiplied noise rotation N,
    so ``R_t = lambda(sqrt(abar_t), r0) @ N``.
    """
    r0 = geo.check_rotation(r0)
    ab = sched.abar(t)
    mean = geo.geodesic_scale(np.sqrt(ab), r0)
    eps2 = 1.0 - ab
    if eps2 <= 0:
        return (mean, np.broadcast_to(np.eye(3), mean.shape).copy()) if return_noise else mean
    return geo.igso3_sample(mean, eps2, rng, return_noise=return_noise)


def rotation_x0_to_eps(R_t, R0_hat, t, sched):
    """Rotation noise ``lambda(1/sqrt(1 - abar_t), lambda(sqrt(abar_t), R0_hat)^T R_t)``."""
    ab = sched.abar(t)
    _guard(ab)
    mean = geo.geodesic_scale(np.sqrt(ab), R0_hat)
    resid = np.swapaxes(mean, -1, -2) @ geo.check_rotation(R_t)
    return geo.geodesic_scale(1.0 / np.sqrt(1.0 - ab), resid)


def reverse_step_rotation(R_t, eps_rot_hat, t, sched):
    """Rotation reverse step with the printed coefficients:
    ``lambda(sqrt(abar_{t-1}) / alpha_t, R_t) @ lambda((1 - abar_{t-1}) / sqrt(abar_t), eps)^T``.
    """
    ab = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    a = sched.a(t)
    left = geo.geodesic_scale(np.sqrt(ab_prev) / a, R_t)
    right = geo.geodesic_scale((1.0 - ab_prev) / np.sqrt(ab), eps_rot_hat)
    return left @ np.swapaxes(right, -1, -2)


def reverse_step_rotation_posterior(R_t, R0_hat, t, sched, prev_t=None):
    """Geodesic analogue of the Euclidean posterior-mean step.

    ``x_s = sqrt(abar_s) x0 + k (x_t - sqrt(abar_t) x0)`` with
    ``k = sqrt(abar_t / abar_s) (1 - abar_s) / (1 - abar_t)`` becomes
    ``lambda(sqrt(abar_s), R0) @ lambda(k, lambda(sqrt(abar_t), R0)^T R_t)``.
    At ``prev_t = 0`` it returns ``R0_hat``.
    """
    prev_t = t - 1 if prev_t is None else prev_t
    ab = sched.abar(t)
    _guard(ab)
    ab_s = sched.abar(prev_t)
    k = np.sqrt(ab / ab_s) * (1.0 - ab_s) / (1.0 - ab)
    mean_t = geo.geodesic_scale(np.sqrt(ab), R0_hat)
    resid = np.swapaxes(mean_t, -1, -2) @ geo.check_rotation(R_t)
    return geo.geodesic_scale(np.sqrt(ab_s), R0_hat) @ geo.geodesic_scale(k, resid)


# ---------------------------------------------------------------------------
# 2D rotation chain on the raw [cos, sin] vector


def forward_rotation_2d(r0, t, z, sched):
    return forward_euclidean(r0, t, z, sched)


def project_rotation_2d(v):
    """Read a diffused 2-vector back onto the circle; returns ``(unit, degenerate)``."""
    return geo.angle2d_project(v)
