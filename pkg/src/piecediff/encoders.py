"""Rotation-equivariant piece encoders.

2D: a shared conv stack applied to the four quarter-turn copies of a patch;
the pooled outputs are stacked as four blocks in rotation order, so a raster
``rot90`` of the input cyclically shifts the blocks.

3D: a vector-channel network over centered point clouds. Every hidden
feature is a set of 3-vectors mixed only by linear maps across channels,
cross products and norm-gated rescaling, so rotating the cloud rotates each
output channel.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, EmptyInputError

VARIANTS = ("equivariant", "invariant", "nonequivariant")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 128  # 2D feature size (4 blocks); ignored in 3D
    vector_channels: int = 42  # 3D output channels -> d = 3 * 42 = 126
    conv_channels: int = 32
    hidden_channels: int = 32
    variant: str = "equivariant"


def center_piece(points):
    """Translate a cloud so its centroid is at the origin; returns ``(centered, centroid)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyInputError("empty point cloud")
    c = pts.mean(axis=0)
    return pts - c, c


def patches_to_tensor(patches, dtype=torch.float32):
    """``(B, P, P, 3)`` uint8 or [0, 1] float patches -> ``(B, 3, P, P)`` tensor."""
    arr = np.asarray(patches)
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[3] != 3:
        raise DimensionError(f"patches must be (B, P, P, 3) square, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def rot90(x, k=1):
    """Counter-clockwise quarter turns of ``(B, C, P, P)`` images, matching ``np.rot90`` on (H, W)."""
    return torch.rot90(x, k, dims=(2, 3)).contiguous()


class ConvStack(nn.Module):
    def __init__(self, out_dim, channels=32):
        super().__init__()
        self.c1 = nn.Conv2d(3, channels, 3, padding=1)
        self.c2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.c3 = nn.Conv2d(channels, 2 * channels, 3, padding=1)
        self.proj = nn.Linear(2 * channels, out_dim)

    def forward(self, x):
        x = F.max_pool2d(F.silu(self.c1(x)), 2)
        x = F.silu(self.c2(x))
        if min(x.shape[-2:]) >= 2:
            x = F.max_pool2d(x, 2)
        x = F.silu(self.c3(x))
        return self.proj(x.mean(dim=(2, 3)))


class PatchEncoderC4(nn.Module):
    """Z4-equivariant patch encoder; ``variant`` selects the ablations."""

    def __init__(self, cfg=EncoderConfig()):
        super().__init__()
        if cfg.dim % 4:
            raise DimensionError("2D feature dim must be divisible by 4")
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        self.cfg = cfg
        self.variant = cfg.variant
        block = cfg.dim // 4
        self.stack = ConvStack(cfg.dim if cfg.variant == "nonequivariant" else block, cfg.conv_channels)
        self.out_dim = block if cfg.variant == "invariant" else cfg.dim

    def forward(self, x):
        if x.shape[-1] != x.shape[-2]:
            raise DimensionError("patch must be square")
        if self.variant == "nonequivariant":
            return self.stack(x)
        # one call per orientation so that identical rotated inputs see identical batches
        blocks = [self.stack(rot90(x, k)) for k in range(4)]
        if self.variant == "invariant":
            return torch.stack(blocks, 0).mean(0)
        return torch.cat(blocks, dim=-1)


class VNLinear(nn.Module):
    """Linear map across vector channels: ``(..., C_in, 3) -> (..., C_out, 3)``."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in))
        bound = np.sqrt(6.0 / (c_in + c_out))
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, v):
        return torch.einsum("oc,...cd->...od", self.weight, v)


class VNGate(nn.Module):
    """``v -> v * sigmoid(a |v| + b)`` per channel; rescales without rotating."""

    def __init__(self, channels):
        super().__init__()
        self.a = nn.Parameter(torch.ones(channels))
        self.b = nn.Parameter(torch.zeros(channels))

    def forward(self, v):
        n = torch.sqrt((v * v).sum(-1) + 1e-12)
        return v * torch.sigmoid(self.a * n + self.b).unsqueeze(-1)


class CloudEncoderVN(nn.Module):
    """SO(3)-equivariant point-cloud encoder with vector channels; output flattened channel-major."""

    def __init__(self, cfg=EncoderConfig(), num_points=1000):
        super().__init__()
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        self.cfg = cfg
        self.variant = cfg.variant
        self.num_points = num_points
        h, out = cfg.hidden_channels, cfg.vector_channels
        if cfg.variant == "nonequivariant":
            self.mlp = nn.Sequential(nn.Linear(3, 4 * h), nn.SiLU(), nn.Linear(4 * h, 4 * h), nn.SiLU())
            self.head = nn.Linear(8 * h, 3 * out)
        else:
            self.lin1 = VNLinear(1, h)
            self.gate1 = VNGate(h)
            self.n_cross = min(8, h)
            self.lin2 = VNLinear(2 * h + self.n_cross, h)
            self.gate2 = VNGate(h)
            self.lin3 = VNLinear(2 * h, out)
        self.out_dim = out if cfg.variant == "invariant" else 3 * out

    def vector_features(self, x):
        """``(B, N, 3)`` centered clouds -> ``(B, C, 3)`` equivariant channels."""
        v = self.gate1(self.lin1(x.unsqueeze(-2)))              # (B, N, h, 3)
        g = v.mean(dim=1, keepdim=True)                         # (B, 1, h, 3)
        gb = g.expand_as(v)
        cross = torch.cross(x.unsqueeze(-2).expand(-1, -1, self.n_cross, -1), gb[..., : self.n_cross, :], dim=-1)
        v2 = self.gate2(self.lin2(torch.cat([v, gb, cross], dim=-2)))
        pooled = torch.cat([v2.mean(dim=1), g[:, 0]], dim=-2)    # (B, 2h, 3)
        return self.lin3(pooled)

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != 3 or x.shape[1] != self.num_points:
            raise DimensionError(f"expected (B, {self.num_points}, 3) clouds, got {tuple(x.shape)}")
        if self.variant == "nonequivariant":
            f = self.mlp(x)
            return self.head(torch.cat([f.mean(1), f.amax(1)], dim=-1))
        c = self.vector_features(x)
        if self.variant == "invariant":
            return torch.sqrt((c * c).sum(-1) + 1e-12)
        return c.reshape(c.shape[0], -1)


def group_act(g, h):
    """Apply a group element to features.

    ``g`` is an int (quarter turns, acting on 4-block 2D features) or a 3x3
    rotation (acting on flattened 3-vector channels as ``c -> R c``).
    Works on numpy arrays or torch tensors of shape ``(..., d)``.
    """
    is_torch = isinstance(h, torch.Tensor)
    if np.isscalar(g) or (isinstance(g, np.ndarray) and g.ndim == 0):
        d = h.shape[-1]
        if d % 4:
            raise DimensionError("2D features need 4 equal blocks")
        k = int(g) % 4
        blocks = h.reshape(h.shape[:-1] + (4, d // 4))
        # rot90 of the input maps block j to block j + 1 of the original
        rolled = torch.roll(blocks, -k, dims=-2) if is_torch else np.roll(blocks, -k, axis=-2)
        return rolled.reshape(h.shape)
    R = g
    d = h.shape[-1]
    if d % 3:
        raise DimensionError("3D features need 3-vector channels")
    c = h.reshape(h.shape[:-1] + (d // 3, 3))
    if is_torch:
        R = torch.as_tensor(np.asarray(R), dtype=h.dtype)
        return (c @ R.T).reshape(h.shape)
    return (c @ np.asarray(R).T).reshape(h.shape)


def make_encoder(dim, cfg=EncoderConfig()):
    """Encoder for 2D patches (``dim == 2``) or 3D clouds (``dim == 3``)."""
    if dim == 2:
        return PatchEncoderC4(cfg)
    if dim == 3:
        return CloudEncoderVN(cfg)
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def degrade_to_noneq(encoder, variant="nonequivariant"):
    """Fresh encoder of the same kind with the ablation ``variant``."""
    cfg = EncoderConfig(**{**encoder.cfg.__dict__, "variant": variant})
    return type(encoder)(cfg) if isinstance(encoder, PatchEncoderC4) else CloudEncoderVN(cfg, encoder.num_points)
