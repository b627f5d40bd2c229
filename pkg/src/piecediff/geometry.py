"""Rotation representations, SO(3) Lie-group maps and the isotropic Gaussian on SO(3).

All rotation-matrix functions accept a single ``(3, 3)`` matrix or a stack
``(..., 3, 3)``; quaternions are ``(..., 4)`` arrays in ``(w, x, y, z)`` order.
"""

import functools
import math
import warnings

import numpy as np

from .errors import DomainError, InvalidRotationError

QUAT_NORM_TOL = 1e-6
ROT_TOL = 1e-6
PI_BRANCH_TOL = 1e-6

# IGSO(3) angle-marginal discretisation
IGSO3_GRID = 4096
L_MAX_SMALL = 2000
L_MAX_LARGE = 200
SMALL_EPS2 = 0.05

# the four quarter turns as [cos, sin]
Z4 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


class BranchAmbiguityWarning(RuntimeWarning):
    """Raised (as a warning) when a rotation angle sits on the pi cut of the log map."""


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidRotationError("zero-norm quaternion")
    return q / n


def quat_canonical(q):
    """Flip sign so that w >= 0 (ties broken by x >= 0, then y, then z)."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.ones(q.shape[:-1])
    decided = np.zeros(q.shape[:-1], dtype=bool)
    for k in range(4):
        comp = q[..., k]
        pick = ~decided & (comp != 0)
        sign = np.where(pick & (comp < 0), -1.0, sign)
        decided |= pick
    return q * sign[..., None]


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidRotationError("zero-norm quaternion")
    # always renormalise: float32 network outputs are only unit to ~1e-7
    q = q / n
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Shepperd's method: branch on the largest of (w, x, y, z); canonical sign."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=-1)
    branch = np.argmax(cand, axis=-1)
    q = np.empty((m.shape[0], 4))
    for b in range(4):
        idx = branch == b
        if not np.any(idx):
            continue
        r = m[idx]
        if b == 0:
            s = 2.0 * np.sqrt(np.maximum(1.0 + tr[idx], 0.0))
            q[idx] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                               (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], -1)
        elif b == 1:
            s = 2.0 * np.sqrt(np.maximum(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2], 0.0))
            q[idx] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], -1)
        elif b == 2:
            s = 2.0 * np.sqrt(np.maximum(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2], 0.0))
            q[idx] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                               0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], -1)
        else:
            s = 2.0 * np.sqrt(np.maximum(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1], 0.0))
            q[idx] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], -1)
    q = quat_canonical(q / np.linalg.norm(q, axis=-1, keepdims=True))
    return q.reshape(R.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# rotation matrices


def is_rotation(R, tol=1e-8):
    R = np.asarray(R, dtype=np.float64)
    eye = np.eye(R.shape[-1])
    orth = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - eye, axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(orth <= tol) and np.all(np.abs(det - 1.0) <= tol))


def check_rotation(R, tol=ROT_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise InvalidRotationError(f"expected (..., 3, 3), got {R.shape}")
    if not np.all(np.isfinite(R)) or not is_rotation(R, tol):
        raise InvalidRotationError("matrix is not in SO(3)")
    return R


def hat(v):
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([z, -w, y, w, z, -x, -y, x, z], axis=-1).reshape(v.shape[:-1] + (3, 3))


def matrix_exp(v):
    """Rodrigues formula with Taylor coefficients near zero."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = hat(v)
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(th) / th)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(th)) / (th * th))
    return np.eye(3) + a * K + b * (K @ K)


def _quat_log(q):
    """Axis-angle of a unit quaternion; stable at 0 and at pi."""
    q = quat_canonical(q)
    w = q[..., 0]
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    # angle / sin(angle/2) with sin(angle/2) = s
    small = s < 1e-8
    # small s implies w ~ 1 for a unit quaternion with w >= 0
    w_safe = np.where(small, w, 1.0)
    scale = np.where(small, 2.0 / w_safe * (1.0 - s * s / (3.0 * w_safe ** 2)),
                     angle / np.where(small, 1.0, s))
    return xyz * scale[..., None], angle


def matrix_log(R, check=True):
    if check:
        R = check_rotation(R)
    v, _ = _quat_log(matrix_to_quat(R))
    return v


def rotation_angle(R):
    """Rotation angle in [0, pi]."""
    q = matrix_to_quat(np.asarray(R, dtype=np.float64))
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def geodesic_scale(gamma, R):
    """Fractional rotation exp(gamma * log R) along the geodesic from the identity."""
    R = check_rotation(R)
    v = matrix_log(R, check=False)
    angle = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(angle - np.pi) < PI_BRANCH_TOL):
        warnings.warn("rotation angle at pi; log branch is ambiguous", BranchAmbiguityWarning, stacklevel=2)
    gamma = np.asarray(gamma, dtype=np.float64)
    return matrix_exp(gamma[..., None] * v if gamma.ndim else gamma * v)


def geodesic_distance(R1, R2):
    R1 = check_rotation(R1)
    R2 = check_rotation(R2)
    return rotation_angle(np.swapaxes(R1, -1, -2) @ R2)


def random_rotation(rng, size=None):
    """Uniform rotations via Shoemake's subgroup algorithm."""
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    u1, u2, u3 = rng.random((3,) + shape)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.stack([a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2),
                  b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)], axis=-1)
    return quat_to_matrix(q)


def random_unit_vectors(rng, size):
    v = rng.standard_normal((size, 3))
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(n < 1e-12):  # pragma: no cover - measure-zero event
        bad = n[:, 0] < 1e-12
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


# ---------------------------------------------------------------------------
# isotropic Gaussian on SO(3)


def _igso3_lmax(eps2):
    return L_MAX_SMALL if eps2 < SMALL_EPS2 else L_MAX_LARGE


def _series_converged(eps2):
    l = _igso3_lmax(eps2)
    return l * (l + 1) * eps2 >= 40.0


def _igso3_series(omega, eps2, l_max):
    omega = np.asarray(omega, dtype=np.float64)
    flat = omega.reshape(-1)
    out = np.zeros_like(flat)
    ls = np.arange(l_max + 1, dtype=np.float64)
    weights = (2 * ls + 1) * np.exp(-ls * (ls + 1) * eps2)
    keep = weights > 1e-300
    ls, weights = ls[keep], weights[keep]
    half = flat / 2.0
    sin_half = np.sin(half)
    near0 = np.abs(sin_half) < 1e-10
    # chunk over omega to bound memory for large grids
    for start in range(0, flat.size, 512):
        sl = slice(start, start + 512)
        w_ = flat[sl][:, None]
        ratio = np.sin((ls + 0.5) * w_) / np.where(near0[sl], 1.0, sin_half[sl])[:, None]
        ratio = np.where(near0[sl][:, None], 2 * ls + 1, ratio)
        out[sl] = ratio @ weights
    return out.reshape(omega.shape)


def _igso3_small_eps(omega, eps2):
    # leading term of the heat-kernel asymptotics for the character sum
    eps = math.sqrt(eps2)
    omega = np.asarray(omega, dtype=np.float64)
    sin_half = np.sin(omega / 2.0)
    ratio = np.where(np.abs(sin_half) < 1e-12, 2.0, omega / np.where(np.abs(sin_half) < 1e-12, 1.0, sin_half))
    return math.sqrt(math.pi) * eps ** -3 * math.exp(eps2 / 4.0) * np.exp(-(omega ** 2) / (4.0 * eps2)) * ratio / 2.0


def igso3_pdf(omega, eps2):
    """Density of the rotation angle omega under IGSO(3) with variance parameter eps2.

    Uses the truncated character series; when the truncation cannot
    resolve the kernel (eps2 very small) the small-eps closed form is used.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if eps2 <= 0 or not np.isfinite(eps2):
        raise DomainError(f"eps2 must be positive, got {eps2}")
    if np.any(omega < 0) or np.any(omega > np.pi) or not np.all(np.isfinite(omega)):
        raise DomainError("omega must lie in [0, pi]")
    if _series_converged(eps2):
        s = _igso3_series(omega, eps2, _igso3_lmax(eps2))
    else:
        s = _igso3_small_eps(omega, eps2)
    f = (1.0 - np.cos(omega)) / np.pi * s
    return np.maximum(f, 0.0)


@functools.lru_cache(maxsize=512)
def _igso3_cdf_table(eps2):
    grid = np.linspace(0.0, np.pi, IGSO3_GRID)
    pdf = igso3_pdf(grid, eps2)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
    if cdf[-1] <= 0:
        # kernel narrower than one grid cell: all mass in the first cell
        cdf = np.concatenate([[0.0], np.ones(IGSO3_GRID - 1)])
    cdf = cdf / cdf[-1]
    grid.setflags(write=False)
    cdf.setflags(write=False)
    return grid, cdf


def igso3_sample_angle(eps2, rng, size):
    if eps2 <= 0:
        raise DomainError(f"eps2 must be positive, got {eps2}")
    grid, cdf = _igso3_cdf_table(float(eps2))
    u = rng.random(size)
    return np.interp(u, cdf, grid)


def igso3_sample(mean, eps2, rng, size=None, return_noise=False):
    """Draw ``mean @ exp(omega * axis)`` with a uniform axis and omega from the IGSO(3) marginal.

    With ``size`` given, returns a stack of ``size`` samples around the same mean;
    otherwise ``mean`` may itself be a stack and one sample is drawn per entry.
    """
    mean = check_rotation(mean)
    if size is None:
        n = int(np.prod(mean.shape[:-2], dtype=np.int64)) if mean.ndim > 2 else 1
        shape = mean.shape[:-2]
    else:
        n = int(size)
        shape = (n,)
    omega = igso3_sample_angle(eps2, rng, n)
    axis = random_unit_vectors(rng, n)
    noise = matrix_exp(omega[:, None] * axis).reshape(shape + (3, 3))
    out = mean @ noise
    if return_noise:
        return out, noise
    return out


# ---------------------------------------------------------------------------
# 2D rotations as [cos, sin]


def angle2d_project(v):
    """Project 2-vectors onto the unit circle; zero vectors map to angle 0.

    Returns ``(unit, degenerate)`` where ``degenerate`` flags the zero inputs.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = n[..., 0] < 1e-12
    unit = np.where(degenerate[..., None], np.array([1.0, 0.0]), v / np.where(degenerate[..., None], 1.0, n))
    return unit, degenerate


def _ensure_unit2(a):
    a = np.asarray(a, dtype=np.float64)
    off = np.abs(np.linalg.norm(a, axis=-1) - 1.0) > QUAT_NORM_TOL
    if np.any(off):
        a, _ = angle2d_project(a)
    return a, off


def angle2d_compose(a, b, return_flag=False):
    (a, fa), (b, fb) = _ensure_unit2(a), _ensure_unit2(b)
    c = a[..., 0] * b[..., 0] - a[..., 1] * b[..., 1]
    s = a[..., 1] * b[..., 0] + a[..., 0] * b[..., 1]
    out = np.stack([c, s], axis=-1)
    if return_flag:
        return out, np.logical_or(fa, fb)
    return out


def angle2d_to_matrix(a):
    a, _ = _ensure_unit2(a)
    c, s = a[..., 0], a[..., 1]
    return np.stack([c, -s, s, c], axis=-1).reshape(a.shape[:-1] + (2, 2))


def angle2d_from_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def angle2d_theta(a):
    a = np.asarray(a, dtype=np.float64)
    return np.mod(np.arctan2(a[..., 1], a[..., 0]), 2 * np.pi)


def z4_element(k):
    return Z4[np.mod(np.asarray(k), 4)]
