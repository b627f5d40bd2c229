"""Piece graphs: complete construction, expander-style sparsification and virtual nodes."""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, EmptyInputError


@dataclass(frozen=True)
class SparsifierConfig:
    prune_fraction: float = 0.8
    virtual_count: int = 8
    expander_degree: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ConfigError(f"prune_fraction must be in [0, 1), got {self.prune_fraction}")
        if self.virtual_count < 0:
            raise ConfigError("virtual_count must be >= 0")
        if self.expander_degree < 1:
            raise ConfigError("expander_degree must be >= 1")


@dataclass(frozen=True)
class AssemblyGraph:
    """Real nodes ``0..M-1`` followed by ``virtual_count`` virtual nodes.

    ``edges`` holds the undirected real-real pairs (i < j); every virtual
    node is wired to every real node.
    """

    num_nodes: int
    node_features: object
    translations: object = None
    rotations: object = None
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    virtual_count: int = 0
    virtual_features: object = None
    sparsified: bool = False

    @property
    def total_nodes(self):
        return self.num_nodes + self.virtual_count

    @property
    def virtual_edges(self):
        if self.virtual_count == 0:
            return np.zeros((0, 2), dtype=np.int64)
        real = np.arange(self.num_nodes, dtype=np.int64)
        virt = self.num_nodes + np.arange(self.virtual_count, dtype=np.int64)
        r, v = np.meshgrid(real, virt, indexing="ij")
        return np.stack([r.ravel(), v.ravel()], axis=1)

    def all_edges(self):
        return np.concatenate([self.edges, self.virtual_edges], axis=0)

    def directed_edges(self, self_loops=True):
        """``(src, dst)`` index arrays with both directions and optional self loops."""
        e = self.all_edges()
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        if self_loops:
            loop = np.arange(self.total_nodes, dtype=np.int64)
            src = np.concatenate([src, loop])
            dst = np.concatenate([dst, loop])
        return src, dst


def complete_edges(M):
    i, j = np.triu_indices(M, k=1)
    return np.stack([i, j], axis=1).astype(np.int64)


def build_complete(features, translations=None, rotations=None):
    """Complete graph over pieces; features may be an ``(M, d)`` array or a list of vectors."""
    if isinstance(features, (list, tuple)):
        if len(features) == 0:
            raise EmptyInputError("no pieces")
        dims = {np.shape(f)[-1] for f in features}
        if len(dims) != 1:
            raise DimensionError(f"mixed feature dimensions {sorted(dims)}")
        features = np.stack([np.asarray(f) for f in features])
    M = int(features.shape[0])
    if M == 0:
        raise EmptyInputError("no pieces")
    for name, arr in (("translations", translations), ("rotations", rotations)):
        if arr is not None and arr.shape[0] != M:
            raise DimensionError(f"{name} has {arr.shape[0]} rows for {M} pieces")
    return AssemblyGraph(M, features, translations, rotations, complete_edges(M))


def retained_edge_count(M, prune_fraction):
    total = M * (M - 1) // 2
    return int(np.floor((1.0 - prune_fraction) * total + 0.5))


def _expander_edges(M, degree, rng):
    """Edges of ``degree`` random Hamiltonian cycles in priority order, deduplicated.

    The first ``M - 1`` entries form a Hamiltonian path, so any prefix of
    at least that length spans the real nodes.
    """
    if M < 2:
        return np.zeros((0, 2), dtype=np.int64)
    seen = set()
    ordered = []
    for _ in range(degree):
        perm = rng.permutation(M)
        pairs = list(zip(perm[:-1], perm[1:]))
        if M > 2:
            pairs.append((perm[-1], perm[0]))
        for a, b in pairs:
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                ordered.append(key)
    return np.asarray(ordered, dtype=np.int64).reshape(-1, 2)


def sparsify(g, cfg, seed=None):
    """Prune the complete real-node edge set and attach virtual star nodes.

    Retains ``round((1 - prune_fraction) * M(M-1)/2)`` real edges taken from
    the union of ``expander_degree`` random Hamiltonian cycles and topped up
    uniformly at random. Deterministic in ``(g, cfg, seed)``.
    """
    if g.sparsified:
        raise ConfigError("graph is already sparsified")
    M = g.num_nodes
    if len(g.edges) != M * (M - 1) // 2:
        raise ConfigError("sparsify expects a complete graph")
    keep = retained_edge_count(M, cfg.prune_fraction)
    if cfg.virtual_count == 0 and keep < M - 1:
        raise ConfigError(f"{keep} retained edges cannot connect {M} nodes without virtual nodes")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    cand = _expander_edges(M, cfg.expander_degree, rng)
    if keep <= len(cand):
        edges = cand[:keep]
    else:
        # top up with uniformly drawn edges not already present
        full = complete_edges(M)
        code = cand[:, 0] * M + cand[:, 1]
        mask = np.ones(len(full), dtype=bool)
        mask[np.searchsorted(full[:, 0] * M + full[:, 1], code)] = False
        rest = np.flatnonzero(mask)
        extra = full[np.sort(rng.choice(rest, size=keep - len(cand), replace=False))]
        edges = np.concatenate([cand, extra], axis=0)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    vfeat = None
    if cfg.virtual_count:
        d = g.node_features.shape[1]
        vfeat = np.zeros((cfg.virtual_count, d))
    return replace(g, edges=edges[order], virtual_count=cfg.virtual_count,
                   virtual_features=vfeat, sparsified=True)


def edge_memory_estimate(g):
    return int(len(g.edges) + g.num_nodes * g.virtual_count)


def is_connected(g):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    n = g.total_nodes
    if n <= 1:
        return True
    e = g.all_edges()
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp == 1


def export_edges_csv(g, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "kind"])
        for a, b in g.edges:
            w.writerow([int(a), int(b), "real"])
        for a, b in g.virtual_edges:
            w.writerow([int(a), int(b), "virtual"])
