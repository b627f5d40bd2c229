"""Attention message-passing network predicting clean poses from noisy ones.

Several graphs are evaluated together as one disjoint union (``GraphBatch``).
Node input is ``[h, s_t, r_t, time_embed(t)]``; virtual nodes get a learned
feature row and zero pose slots. Outputs are reported for real nodes only.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, DomainError

BACKENDS = ("attention", "gcn")


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    hidden: int = 256
    heads: int = 8
    time_dim: int = 64
    backend: str = "attention"
    single_step: bool = False
    ffn_mult: int = 2
    max_virtual: int = 8
    edge_chunk: int = 1 << 17

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.layers < 1 or self.time_dim < 2:
            raise ConfigError("need layers >= 1 and time_dim >= 2")


def time_embed(t, T, dim, dtype=torch.float32):
    """Sinusoidal embedding of ``t / T``; ``t`` an int or integer tensor."""
    tt = torch.as_tensor(t)
    if torch.any(tt < 1) or torch.any(tt > T):
        raise DomainError(f"timestep outside [1, {T}]")
    pos = tt.to(torch.float64) / T * 1000.0
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


def glorot_(linear):
    fan_out, fan_in = linear.weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    nn.init.uniform_(linear.weight, -bound, bound)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)
    return linear


def segment_softmax(scores, dst, num_nodes):
    """Softmax of ``(E, H)`` edge scores grouped by destination node."""
    H = scores.shape[1]
    idx = dst.unsqueeze(1).expand(-1, H)
    mx = torch.full((num_nodes, H), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, idx, scores, reduce="amax", include_self=True)
    ex = torch.exp(scores - mx.detach()[dst])
    denom = torch.zeros((num_nodes, H), dtype=scores.dtype).index_add(0, dst, ex)
    return ex / denom[dst]


class AttentionLayer(nn.Module):
    """Multi-head dot-product attention over in-neighbours (self included), gated residual, FFN."""

    def __init__(self, hidden, heads, backend="attention", ffn_mult=2, edge_chunk=1 << 17):
        super().__init__()
        self.hidden, self.heads, self.backend = hidden, heads, backend
        self.dh = hidden // heads
        self.edge_chunk = edge_chunk
        self.norm1 = nn.LayerNorm(hidden)
        self.q = glorot_(nn.Linear(hidden, hidden))
        self.k = glorot_(nn.Linear(hidden, hidden))
        self.v = glorot_(nn.Linear(hidden, hidden))
        self.o = glorot_(nn.Linear(hidden, hidden))
        self.gate = glorot_(nn.Linear(3 * hidden, 1))
        self.norm2 = nn.LayerNorm(hidden)
        self.ff1 = glorot_(nn.Linear(hidden, ffn_mult * hidden))
        self.ff2 = glorot_(nn.Linear(ffn_mult * hidden, hidden))

    def attention_weights(self, x, src, dst):
        n = x.shape[0]
        if self.backend == "gcn":
            deg = torch.zeros(n, dtype=x.dtype).index_add(0, dst, torch.ones_like(dst, dtype=x.dtype))
            return (1.0 / deg[dst]).unsqueeze(1).expand(-1, self.heads)
        hn = self.norm1(x)
        q = self.q(hn).view(n, self.heads, self.dh)
        k = self.k(hn).view(n, self.heads, self.dh)
        scale = 1.0 / math.sqrt(self.dh)
        if torch.is_grad_enabled() or len(src) <= self.edge_chunk:
            scores = (q[dst] * k[src]).sum(-1) * scale
        else:
            scores = torch.cat([(q[dst[i:i + self.edge_chunk]] * k[src[i:i + self.edge_chunk]]).sum(-1) * scale
                                for i in range(0, len(src), self.edge_chunk)])
        return segment_softmax(scores, dst, n)

    def forward(self, x, src, dst, return_attention=False):
        n = x.shape[0]
        alpha = self.attention_weights(x, src, dst)
        v = self.v(self.norm1(x)).view(n, self.heads, self.dh)
        if torch.is_grad_enabled() or len(src) <= self.edge_chunk:
            agg = torch.zeros_like(v).index_add(0, dst, alpha.unsqueeze(-1) * v[src])
        else:
            agg = torch.zeros_like(v)
            for i in range(0, len(src), self.edge_chunk):
                s, d = src[i:i + self.edge_chunk], dst[i:i + self.edge_chunk]
                agg.index_add_(0, d, alpha[i:i + self.edge_chunk].unsqueeze(-1) * v[s])
        m = self.o(agg.reshape(n, self.hidden))
        beta = torch.sigmoid(self.gate(torch.cat([m, x, m - x], dim=-1)))
        x = beta * x + (1.0 - beta) * m
        x = x + self.ff2(F.silu(self.ff1(self.norm2(x))))
        if return_attention:
            return x, alpha
        return x


@dataclass
class GraphBatch:
    """Disjoint union of assembly graphs prepared for one forward pass."""

    features: torch.Tensor       # (R, d) real-node features
    translations: torch.Tensor   # (R, n) noisy translations
    rotations: torch.Tensor      # (R, r) noisy rotation reps
    t_real: torch.Tensor         # (R,)
    real_index: torch.Tensor     # (R,) positions in the full node array
    virt_index: torch.Tensor     # (V,)
    virt_slot: torch.Tensor      # (V,)
    t_virt: torch.Tensor         # (V,)
    src: torch.Tensor
    dst: torch.Tensor
    num_total: int
    graph_of_real: torch.Tensor  # (R,)
    num_graphs: int


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def collate(graphs, timesteps, dtype=torch.float32):
    """Stack ``AssemblyGraph`` objects (features / noisy poses filled in) with one timestep each."""
    feats, trans, rots, t_real, real_idx, virt_idx, virt_slot, t_virt = [], [], [], [], [], [], [], []
    srcs, dsts, gid = [], [], []
    offset = 0
    for gi, (g, t) in enumerate(zip(graphs, timesteps)):
        M, V = g.num_nodes, g.virtual_count
        feats.append(_as_tensor(g.node_features, dtype))
        trans.append(_as_tensor(g.translations, dtype))
        rots.append(_as_tensor(g.rotations, dtype))
        t_real.append(torch.full((M,), int(t), dtype=torch.long))
        real_idx.append(torch.arange(offset, offset + M))
        virt_idx.append(torch.arange(offset + M, offset + M + V))
        virt_slot.append(torch.arange(V))
        t_virt.append(torch.full((V,), int(t), dtype=torch.long))
        s, d = g.directed_edges(self_loops=True)
        srcs.append(torch.as_tensor(s) + offset)
        dsts.append(torch.as_tensor(d) + offset)
        gid.append(torch.full((M,), gi, dtype=torch.long))
        offset += M + V
    return GraphBatch(torch.cat(feats), torch.cat(trans), torch.cat(rots), torch.cat(t_real),
                      torch.cat(real_idx), torch.cat(virt_idx), torch.cat(virt_slot), torch.cat(t_virt),
                      torch.cat(srcs), torch.cat(dsts), offset, torch.cat(gid), len(graphs))


def normalize_rotation(raw):
    """Project raw head outputs onto the unit circle / unit quaternions (w >= 0).

    Returns ``(rotation, degenerate)``; degenerate rows fall back to identity.
    """
    norm = raw.norm(dim=-1, keepdim=True)
    degenerate = norm[:, 0] < 1e-12
    ident = torch.zeros_like(raw)
    ident[:, 0] = 1.0
    unit = raw / torch.where(degenerate.unsqueeze(1), torch.ones_like(norm), norm)
    unit = torch.where(degenerate.unsqueeze(1), ident, unit)
    if raw.shape[-1] == 4:
        sign = torch.where(unit[:, :1] < 0, -1.0, 1.0).to(unit.dtype).detach()
        unit = unit * sign
    return unit, degenerate


class Denoiser(nn.Module):
    def __init__(self, feat_dim, trans_dim, rot_dim, cfg=DenoiserConfig(), T=300):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.feat_dim, self.trans_dim, self.rot_dim = feat_dim, trans_dim, rot_dim
        self.virtual_features = nn.Parameter(torch.zeros(cfg.max_virtual, feat_dim))
        self.inp = glorot_(nn.Linear(feat_dim + trans_dim + rot_dim + cfg.time_dim, cfg.hidden))
        self.layers = nn.ModuleList(
            AttentionLayer(cfg.hidden, cfg.heads, cfg.backend, cfg.ffn_mult, cfg.edge_chunk)
            for _ in range(cfg.layers))
        self.out_norm = nn.LayerNorm(cfg.hidden)
        self.trans_head = glorot_(nn.Linear(cfg.hidden, trans_dim))
        self.rot_head = glorot_(nn.Linear(cfg.hidden, rot_dim))

    def node_inputs(self, b):
        dtype = self.inp.weight.dtype
        real = torch.cat([b.features.to(dtype), b.translations.to(dtype), b.rotations.to(dtype),
                          time_embed(b.t_real, self.T, self.cfg.time_dim, dtype)], dim=-1)
        x = torch.zeros((b.num_total, real.shape[1]), dtype=dtype).index_copy(0, b.real_index, real)
        if len(b.virt_index):
            if int(b.virt_slot.max()) >= self.cfg.max_virtual:
                raise ConfigError(f"more than {self.cfg.max_virtual} virtual nodes")
            pose0 = torch.zeros((len(b.virt_index), self.trans_dim + self.rot_dim), dtype=dtype)
            virt = torch.cat([self.virtual_features[b.virt_slot], pose0,
                              time_embed(b.t_virt, self.T, self.cfg.time_dim, dtype)], dim=-1)
            x = x.index_copy(0, b.virt_index, virt)
        return x

    def forward(self, b, return_all=False):
        """Returns ``(translation, rotation, degenerate)`` for real nodes.

        With ``return_all`` the raw per-node (real and virtual) head outputs
        are returned as well, for masking checks.
        """
        h = self.inp(self.node_inputs(b))
        for i, layer in enumerate(self.layers):
            h = layer(h, b.src, b.dst)
            if not torch.isfinite(h).all():
                raise DivergenceError(f"non-finite activation after layer {i}")
        h = self.out_norm(h)
        trans_all = self.trans_head(h)
        rot_all = self.rot_head(h)
        trans = trans_all[b.real_index]
        rot, degenerate = normalize_rotation(rot_all[b.real_index])
        if return_all:
            return trans, rot, degenerate, (trans_all, rot_all)
        return trans, rot, degenerate


def gradient(model, loss):
    """Reverse-mode gradients of ``loss`` w.r.t. every named parameter."""
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    out = {}
    for (n, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {n}")
        out[n] = g
    return out
