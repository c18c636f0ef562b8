"""Spatial graphs over feature grids, and the graph convolution built on them.

Every cell of an H x W feature grid becomes a node. Node vectors are the
cell features plus a fixed 2D sinusoidal positional code (the code also
participates in the distance used for neighbour search). Edges connect each
node to its k nearest neighbours by L2 distance, ties broken by lower node
id, never to itself. The directed k-NN adjacency is symmetrized with
max(A, A^T) and normalized as D^{-1/2} (A + I) D^{-1/2} with D the degree
matrix of A + I.

Graph construction is not differentiated: adjacency matrices enter the tape
as constants, gradients flow through node features only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, apply_activation, clip01, constant, matmul, mul
from .layers import ParamRegistry, sincos_1d

__all__ = [
    "SpatialGraph",
    "GraphBatch",
    "GraphConvLayer",
    "grid_position_encoding",
    "knn_neighbor_lists",
    "build_graph",
    "build_graph_batch",
    "normalize_adjacency",
    "aggregate",
    "gated_update",
    "graph_conv",
    "graph_conv_batch",
    "graph_conv_layer",
]


@dataclass
class SpatialGraph:
    """Immutable k-NN graph over one feature grid."""

    node_features: np.ndarray        # (N, C) float32, positional code included
    positions: np.ndarray            # (N, 2) int32 (row, col), row-major order
    k: int                           # requested neighbour count
    neighbor_lists: np.ndarray       # (N, min(k, N-1)) int32, sorted by (distance, id)
    adjacency_normalized: np.ndarray  # (N, N) float32, symmetric
    aggregation_weights: np.ndarray  # (N, N) float32, adjacency masked to the directed k-NN edges

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


@dataclass
class GraphBatch:
    """Stacked per-sample graphs for a batched forward pass."""

    node_features: np.ndarray        # (B, N, C)
    neighbor_lists: np.ndarray       # (B, N, k_eff)
    adjacency_normalized: np.ndarray  # (B, N, N)
    aggregation_weights: np.ndarray  # (B, N, N)
    height: int
    width: int
    k: int

    def sample(self, b: int) -> SpatialGraph:
        n = self.node_features.shape[1]
        rows, cols = np.divmod(np.arange(n, dtype=np.int32), self.width)
        return SpatialGraph(
            node_features=self.node_features[b],
            positions=np.stack([rows, cols], axis=1),
            k=self.k,
            neighbor_lists=self.neighbor_lists[b],
            adjacency_normalized=self.adjacency_normalized[b],
            aggregation_weights=self.aggregation_weights[b],
        )


@dataclass
class GraphConvLayer:
    """Weights of one graph convolution: square mixing matrix plus a
    per-channel gate in [0, 1] blending each node with its aggregated
    neighbourhood."""

    weight: Tensor    # (C, C)
    gate: Tensor      # (C,) kept in [0, 1] by the optimizer's box constraint
    activation: str = "gelu"

    def __post_init__(self):
        c0, c1 = self.weight.data.shape
        if c0 != c1:
            raise ContractViolation(f"graph conv weight must be square, got {self.weight.data.shape}")
        if self.gate.data.shape != (c0,):
            raise ContractViolation(f"gate shape {self.gate.data.shape} != ({c0},)")


def graph_conv_layer(reg: ParamRegistry, name: str, channels: int,
                     rng: np.random.Generator, activation: str = "gelu",
                     trainable: bool = True) -> GraphConvLayer:
    w = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, channels)).astype(np.float32)
    wt = reg.register(f"{name}/weight", w, trainable)
    gt = reg.register(f"{name}/gate", np.full(channels, 0.5, dtype=np.float32), trainable)
    return GraphConvLayer(wt, gt, activation=activation)


GATE_BOX = (0.0, 1.0)


@lru_cache(maxsize=32)
def grid_position_encoding(height: int, width: int, channels: int) -> np.ndarray:
    """Fixed sinusoidal code of (row, col), shape (H*W, C).

    The first half of the channels encodes the row, the second half the
    column; both halves use the standard interleaved sin/cos ladder.
    """
    rows, cols = np.divmod(np.arange(height * width), width)
    c_row = channels // 2
    c_col = channels - c_row
    parts = []
    if c_row:
        parts.append(sincos_1d(rows, c_row))
    parts.append(sincos_1d(cols, c_col))
    return np.concatenate(parts, axis=1).astype(np.float32)


def knn_neighbor_lists(feats: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours by L2 over (N, C) feature rows.

    Returns an (N, min(k, N-1)) int32 array ordered by (distance, id);
    no self-loops. Exposed separately from build_graph so the selection
    logic (including tie-breaking) can be exercised directly.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ContractViolation(f"expected (N, C) features, got shape {feats.shape}")
    if k <= 0:
        raise ContractViolation(f"neighbour count must be positive, got {k}")
    return _knn_lists(feats[None], k)[0]


def _knn_lists(feats: np.ndarray, k: int) -> np.ndarray:
    """Per-node k nearest neighbours of (B, N, C) float64 features.

    Ordering key is (squared distance, node id); a node is never its own
    neighbour. Distances come from the Gram matrix so that bit-identical
    feature vectors produce exactly zero distance, which makes the id
    tie-break deterministic.
    """
    b, n, _ = feats.shape
    k_eff = min(k, n - 1)
    gram = np.matmul(feats, feats.transpose(0, 2, 1))
    sq = np.einsum("bii->bi", gram)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
    np.einsum("bii->bi", d2)[:] = np.inf

    if k_eff >= n - 1:
        order = np.argsort(d2, axis=-1, kind="stable")
        return order[:, :, :k_eff].astype(np.int32)

    # Fast path: partition to a candidate window, stable-sort inside it.
    # Safe whenever the k-th selected distance is strictly below the window
    # maximum; rows with ties spanning the window fall back to a full sort.
    m = min(n - 1, k_eff + 8)
    cand = np.argpartition(d2, m - 1, axis=-1)[:, :, :m]
    cand_d = np.take_along_axis(d2, cand, axis=-1)
    inner = np.argsort(cand_d, axis=-1, kind="stable")
    cand_sorted = np.take_along_axis(cand, inner, axis=-1)
    cand_d_sorted = np.take_along_axis(cand_d, inner, axis=-1)
    # stable sort orders equal distances by candidate position, not id; redo
    # exact ties inside the window by (distance, id)
    need_exact = cand_d_sorted[:, :, :-1] == cand_d_sorted[:, :, 1:]
    if need_exact.any():
        keys = np.lexsort((cand, cand_d), axis=-1)
        cand_sorted = np.take_along_axis(cand, keys, axis=-1)
        cand_d_sorted = np.take_along_axis(cand_d, keys, axis=-1)
    result = cand_sorted[:, :, :k_eff].astype(np.int32)

    spanning = cand_d_sorted[:, :, k_eff - 1] >= cand_d_sorted[:, :, m - 1]
    if spanning.any():
        bad_b, bad_i = np.nonzero(spanning)
        for bb, ii in zip(bad_b, bad_i):
            row = d2[bb, ii]
            order = np.lexsort((np.arange(n), row))
            result[bb, ii] = order[:k_eff].astype(np.int32)
    return result


def _adjacency(neighbors: np.ndarray, n: int) -> np.ndarray:
    """Directed k-NN lists -> symmetrized binary adjacency (B, N, N)."""
    b, _, k_eff = neighbors.shape
    a = np.zeros((b, n, n), dtype=np.float32)
    bi = np.repeat(np.arange(b), n * k_eff)
    src = np.tile(np.repeat(np.arange(n), k_eff), b)
    a[bi, src, neighbors.reshape(-1)] = 1.0
    return np.maximum(a, a.transpose(0, 2, 1))


def _normalize_batch(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    a_hat = a + np.eye(n, dtype=a.dtype)
    deg = a_hat.sum(axis=-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return (a_hat * inv_sqrt[..., :, None] * inv_sqrt[..., None, :]).astype(np.float32)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} for a symmetric zero-diagonal binary A."""
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"adjacency must be square, got {a.shape}")
    if not np.allclose(a, a.T):
        raise ContractViolation("adjacency must be symmetric")
    if np.any(np.diagonal(a) != 0):
        raise ContractViolation("adjacency must have a zero diagonal")
    return _normalize_batch(a[None])[0]


def build_graph_batch(grids: np.ndarray, k: int) -> GraphBatch:
    """Build one graph per sample of a (B, H, W, C) feature array."""
    grids = np.asarray(grids)
    if grids.ndim != 4:
        raise ContractViolation(f"expected (B, H, W, C) grid stack, got shape {grids.shape}")
    b, h, w, c = grids.shape
    n = h * w
    if n < 2:
        raise ContractViolation("graph needs at least two grid cells")
    if k <= 0:
        raise ContractViolation(f"neighbour count must be positive, got {k}")

    pe = grid_position_encoding(h, w, c)
    feats32 = grids.reshape(b, n, c) + pe[None]
    neighbors = _knn_lists(feats32.astype(np.float64), k)
    adj = _adjacency(neighbors, n)
    a_norm = _normalize_batch(adj)

    k_eff = neighbors.shape[-1]
    mask = np.zeros((b, n, n), dtype=bool)
    bi = np.repeat(np.arange(b), n * k_eff)
    src = np.tile(np.repeat(np.arange(n), k_eff), b)
    mask[bi, src, neighbors.reshape(-1)] = True
    agg = np.where(mask, a_norm, 0.0).astype(np.float32)

    return GraphBatch(
        node_features=feats32.astype(np.float32),
        neighbor_lists=neighbors,
        adjacency_normalized=a_norm,
        aggregation_weights=agg,
        height=h,
        width=w,
        k=k,
    )


def build_graph(grid: np.ndarray, k: int) -> SpatialGraph:
    """Build the k-NN graph of one (H, W, C) feature grid."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ContractViolation(f"expected an (H, W, C) grid, got shape {grid.shape}")
    return build_graph_batch(grid[None], k).sample(0)


# ---------------------------------------------------------------------------
# differentiable ops on a built graph


def aggregate(graph: SpatialGraph | GraphBatch, x: Tensor) -> Tensor:
    """Sum of neighbour features weighted by the normalized adjacency,
    restricted to each node's directed k-NN list."""
    weights = graph.aggregation_weights
    _check_nodes(weights, x)
    return matmul(constant(weights, name="agg_weights"), x)


def gated_update(x: Tensor, f_agg: Tensor, gate: Tensor, activation: str) -> Tensor:
    """phi(theta * x + (1 - theta) * f_agg), theta clamped to [0, 1]."""
    if x.data.shape != f_agg.data.shape:
        raise ContractViolation(f"update shapes differ: {x.data.shape} vs {f_agg.data.shape}")
    theta = clip01(gate)
    blended = mul(theta, x) + mul(1.0 - theta, f_agg)
    return apply_activation(blended, activation)


def graph_conv(graph: SpatialGraph | GraphBatch, x: Tensor, layer: GraphConvLayer) -> Tensor:
    """One graph convolution with residual:

        u = phi(gate * x + (1 - gate) * aggregate(x))
        out = phi(A_norm @ u @ W) + x
    """
    a_norm = graph.adjacency_normalized
    _check_nodes(a_norm, x)
    if x.data.shape[-1] != layer.weight.data.shape[0]:
        raise ContractViolation(
            f"feature width {x.data.shape[-1]} != layer width {layer.weight.data.shape[0]}")
    u = gated_update(x, aggregate(graph, x), layer.gate, layer.activation)
    mixed = matmul(matmul(constant(a_norm, name="adjacency"), u), layer.weight)
    return apply_activation(mixed, layer.activation) + x


graph_conv_batch = graph_conv  # same code path; GraphBatch carries (B, N, N) arrays


def _check_nodes(weights: np.ndarray, x: Tensor):
    n = weights.shape[-1]
    if x.data.shape[-2] != n:
        raise ContractViolation(f"node count mismatch: graph has {n}, features {x.data.shape[-2]}")
    if weights.ndim == 3 and x.data.ndim == 3 and weights.shape[0] != x.data.shape[0]:
        raise ContractViolation(
            f"batch mismatch: graph batch {weights.shape[0]}, feature batch {x.data.shape[0]}")


# ---------------------------------------------------------------------------
# debugging helpers


def edge_list(graph: SpatialGraph) -> List[str]:
    """Directed k-NN edges as "src dst weight" lines (weights from the
    symmetrized, normalized adjacency)."""
    lines = []
    for i, nbrs in enumerate(graph.neighbor_lists):
        for j in nbrs:
            lines.append(f"{i} {int(j)} {graph.adjacency_normalized[i, int(j)]:.6f}")
    return lines


def adjacency_image(graph: SpatialGraph, scale: int = 4) -> np.ndarray:
    """Greyscale heatmap of the normalized adjacency as a uint8 array."""
    a = graph.adjacency_normalized
    hi = float(a.max()) or 1.0
    img = (a / hi * 255.0).astype(np.uint8)
    return np.kron(img, np.ones((scale, scale), dtype=np.uint8))
