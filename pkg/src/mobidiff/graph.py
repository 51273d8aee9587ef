"""Geographic proximity graph over visited cells and its learned embeddings.

Nodes are visited grid cells; each connects to its k nearest visited cells,
with a Gaussian kernel turning center distance into a similarity weight.
Embeddings are trained by edge-sampling SGD with negative sampling: one half
of each vector captures direct edge similarity, the other half captures
similarity of neighborhood structure through per-node context vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import GridSpec, cell_centers_km


@dataclass
class SpatialGraph:
    """Undirected weighted graph over visited cells."""

    nodes: list[int]
    edges: list[tuple[int, int, float]]  # (u, v, weight), u < v, deduplicated
    n_cells: int
    bandwidth_m: float

    def __post_init__(self) -> None:
        seen = set()
        for u, v, w in self.edges:
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if w <= 0:
                raise ValueError(f"edge ({u}, {v}) must have positive weight")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)


@dataclass(frozen=True)
class LineConfig:
    """Embedding training settings."""

    d: int = 128
    k_neighbors: int = 8
    n_negative: int = 5
    n_epochs: int = 50
    learning_rate: float = 0.025
    kernel_bandwidth: float | None = None  # meters; None derives it from the graph
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 2 or self.d % 2 != 0:
            raise ValueError("embedding dimension must be even and at least 2")
        if min(self.k_neighbors, self.n_negative, self.n_epochs) < 1:
            raise ValueError("k_neighbors, n_negative and n_epochs must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def build_spatial_graph(grid: GridSpec, visited: set[int], k: int,
                        bandwidth_m: float | None = None) -> SpatialGraph:
    """Connect every visited cell to its k nearest visited cells.

    Weights are exp(-dist^2 / (2 sigma^2)) on center distance, with sigma the
    median nearest-neighbor distance unless an explicit bandwidth is given.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    nodes = sorted(visited)
    if any(not 0 <= c < grid.n_cells for c in nodes):
        raise ValueError("visited set contains a cell outside the grid")
    if len(nodes) < 2:
        raise ValueError("need at least two visited cells to build a graph")

    centers = cell_centers_km(grid)[nodes] * 1000.0
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)

    if bandwidth_m is None:
        bandwidth_m = float(np.median(dist.min(axis=1)))
    if bandwidth_m <= 0:
        raise ValueError("kernel bandwidth must be positive")

    k_eff = min(k, len(nodes) - 1)
    pairs = set()
    for i in range(len(nodes)):
        for j in np.argsort(dist[i], kind="stable")[:k_eff]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    edges = [(nodes[i], nodes[j],
              float(np.exp(-dist[i, j] ** 2 / (2.0 * bandwidth_m ** 2))))
             for i, j in sorted(pairs)]
    return SpatialGraph(nodes=nodes, edges=edges, n_cells=grid.n_cells,
                        bandwidth_m=bandwidth_m)


def neighbor_distribution(g: SpatialGraph, u: int) -> dict[int, float]:
    """Incident edge weights of u keyed by neighbor; zero entries are omitted."""
    if u not in set(g.nodes):
        raise ValueError(f"node {u} is not in the graph")
    out: dict[int, float] = {}
    for a, b, w in g.edges:
        if a == u:
            out[b] = w
        elif b == u:
            out[a] = w
    return out


def train_line(g: SpatialGraph, cfg: LineConfig,
               return_history: bool = False):
    """Learn node embeddings from direct-edge and shared-neighborhood similarity.

    Returns an (n_cells + 1, d) table: row 0 is reserved, row c + 1 holds the
    embedding of cell c as [direct-edge half | neighborhood half], and rows of
    never-visited cells stay zero.
    """
    index = {c: i for i, c in enumerate(g.nodes)}
    n = len(g.nodes)
    degree = np.zeros(n)
    for u, v, w in g.edges:
        degree[index[u]] += w
        degree[index[v]] += w
    if (degree == 0).any():
        isolated = [g.nodes[i] for i in np.flatnonzero(degree == 0)]
        raise ValueError(f"nodes without edges cannot be embedded: {isolated}")

    # directed copies for sampling, probability proportional to edge weight
    src = np.empty(2 * len(g.edges), dtype=np.int64)
    dst = np.empty(2 * len(g.edges), dtype=np.int64)
    w_edge = np.empty(2 * len(g.edges))
    for i, (u, v, w) in enumerate(g.edges):
        src[2 * i], dst[2 * i], w_edge[2 * i] = index[u], index[v], w
        src[2 * i + 1], dst[2 * i + 1], w_edge[2 * i + 1] = index[v], index[u], w
    edge_cdf = np.cumsum(w_edge / w_edge.sum())
    noise_cdf = np.cumsum(degree ** 0.75 / (degree ** 0.75).sum())

    rng = np.random.default_rng(cfg.seed)
    half = cfg.d // 2
    first = rng.uniform(-0.5, 0.5, size=(n, half)) / half
    second = rng.uniform(-0.5, 0.5, size=(n, half)) / half
    context = np.zeros((n, half))

    samples_per_epoch = max(256, src.size)
    total = cfg.n_epochs * samples_per_epoch
    done = 0
    history = []

    for epoch in range(cfg.n_epochs):
        picks = np.searchsorted(edge_cdf, rng.random(samples_per_epoch))
        negs = np.searchsorted(noise_cdf, rng.random((samples_per_epoch, cfg.n_negative)))
        epoch_loss = 0.0
        for s in range(samples_per_epoch):
            lr = cfg.learning_rate * max(0.01, 1.0 - done / total)
            u, v = src[picks[s]], dst[picks[s]]

            # direct-edge half: pull endpoint vectors together
            fu, fv = first[u], first[v]
            p = expit(fu @ fv)
            epoch_loss -= np.log(max(p, 1e-12))
            grad_u = (1.0 - p) * fv
            grad_v = (1.0 - p) * fu
            for j in negs[s]:
                if j == u or j == v:
                    continue
                q = expit(fu @ first[j])
                epoch_loss -= np.log(max(1.0 - q, 1e-12))
                grad_u -= q * first[j]
                first[j] = first[j] - lr * q * fu
            first[u] = fu + lr * grad_u
            first[v] = fv + lr * grad_v

            # neighborhood half: align vertex vectors with context vectors
            su, cv = second[u], context[v]
            p2 = expit(su @ cv)
            grad_su = (1.0 - p2) * cv
            context[v] = cv + lr * (1.0 - p2) * su
            for j in negs[s]:
                if j == u or j == v:
                    continue
                q2 = expit(su @ context[j])
                grad_su -= q2 * context[j]
                context[j] = context[j] - lr * q2 * su
            second[u] = su + lr * grad_su

            done += 1
        if not (np.isfinite(first).all() and np.isfinite(second).all()
                and np.isfinite(context).all()):
            raise RuntimeError(f"non-finite embedding values at epoch {epoch}")
        history.append(epoch_loss / samples_per_epoch)

    table = np.zeros((g.n_cells + 1, cfg.d))
    for cell, i in index.items():
        table[cell + 1, :half] = first[i]
        table[cell + 1, half:] = second[i]
    return (table, history) if return_history else table


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_embeddings(path: str, table: np.ndarray) -> None:
    """Write `n_rows d` header, then one space-separated row per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.shape[0]} {table.shape[1]}\n")
        for row in table:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_embeddings(path: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected 'n_rows d' header")
        n_rows, d = int(header[0]), int(header[1])
        table = np.empty((n_rows, d))
        for i in range(n_rows):
            row = fh.readline().split()
            if len(row) != d:
                raise ValueError(f"{path}: row {i} has {len(row)} values, expected {d}")
            table[i] = [float(v) for v in row]
    return table


def write_graph(path: str, g: SpatialGraph) -> None:
    """Debug dump: one `u v w` triple per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, v, w in g.edges:
            fh.write(f"{u} {v} {w:.17g}\n")
