"""Sensor graph construction: kernel adjacency, transition matrices, Laplacians, PPR.

Orientation convention: row ``i`` of ``W`` holds the edges leaving node ``i``,
so ``W[i, j]`` is the weight of the edge ``v_i -> v_j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sparse import SparseMatrix, read_triplets, spmm, transpose, write_triplets


class GraphError(ValueError):
    """Raised for malformed graph inputs."""


@dataclass(frozen=True)
class WeightedDigraph:
    node_ids: tuple[str, ...]
    weights: SparseMatrix
    kernel_sigma: float = 1.0
    kernel_kappa: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))
        n = len(self.node_ids)
        if self.weights.shape != (n, n):
            raise GraphError(f"weight matrix shape {self.weights.shape} does not match {n} nodes")
        if len(set(self.node_ids)) != n:
            raise GraphError("node ids must be unique")
        if np.any(self.weights.diagonal() != 0.0):
            raise GraphError("weight matrix must have a zero diagonal")
        if np.any(self.weights.values <= 0.0):
            raise GraphError("stored weights must be strictly positive")
        if not self.kernel_sigma > 0:
            raise GraphError(f"kernel sigma must be positive, got {self.kernel_sigma}")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_dense(cls, w, node_ids: Sequence[str] | None = None, **kw) -> WeightedDigraph:
        w = np.asarray(w, dtype=np.float64)
        if node_ids is None:
            node_ids = [str(i) for i in range(w.shape[0])]
        return cls(tuple(node_ids), SparseMatrix.from_dense(w), **kw)

    def index(self, node_id: str) -> int:
        try:
            return self.node_ids.index(str(node_id))
        except ValueError:
            raise GraphError(f"unknown node id {node_id!r}") from None


@dataclass(frozen=True)
class PPRMatrix:
    """Personalized PageRank proximity; row ``i`` is the diffusion profile from ``v_i``.

    Rows of the closed form sum to one.  A truncated sum of ``K`` terms is short
    by exactly ``(1 - alpha) ** (K + 1)`` per row.
    """

    matrix: np.ndarray
    alpha: float


def build_adjacency(
    distances: Iterable[tuple[str, str, float]], node_ids: Sequence[str], kappa: float
) -> WeightedDigraph:
    """Thresholded Gaussian kernel adjacency from directed road distances.

    ``W_ij = exp(-d_ij^2 / sigma^2)`` when ``d_ij <= kappa``, where ``sigma`` is
    the population standard deviation of every finite distance supplied.
    Pairs missing from ``distances`` are treated as infinitely far apart.
    """
    node_ids = [str(n) for n in node_ids]
    index = {nid: i for i, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise GraphError("node ids must be unique")
    if kappa < 0:
        raise GraphError(f"kappa must be >= 0, got {kappa}")
    rows, cols, dists = [], [], []
    seen = set()
    for src, dst, d in distances:
        src, dst, d = str(src), str(dst), float(d)
        for nid in (src, dst):
            if nid not in index:
                raise GraphError(f"unknown node id {nid!r} in distance list")
        if d < 0 or math.isnan(d):
            raise GraphError(f"invalid distance {d} for pair ({src}, {dst})")
        if (src, dst) in seen:
            raise GraphError(f"duplicate distance for pair ({src}, {dst})")
        seen.add((src, dst))
        rows.append(index[src])
        cols.append(index[dst])
        dists.append(d)
    dists = np.asarray(dists, dtype=np.float64)
    finite = np.isfinite(dists)
    if not finite.any():
        raise GraphError("distance list is empty; kernel width is undefined")
    sigma = float(np.std(dists[finite]))
    if sigma == 0.0:
        raise GraphError("all distances are equal; kernel width is zero")
    rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
    keep = finite & (dists <= kappa) & (rows != cols)
    w = np.exp(-np.square(dists[keep] / sigma))
    n = len(node_ids)
    weights = SparseMatrix.from_triplets(n, n, rows[keep], cols[keep], w)
    return WeightedDigraph(tuple(node_ids), weights, kernel_sigma=sigma, kernel_kappa=float(kappa))


def _row_normalize(w: SparseMatrix) -> SparseMatrix:
    # Rows with zero mass become self-loops so the result stays row-stochastic.
    deg = w.row_sums()
    sinks = np.flatnonzero(deg == 0.0)
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg != 0.0)
    rows, cols, vals = w.triplets()
    vals = vals * inv[rows]
    return SparseMatrix.from_triplets(
        w.n_rows,
        w.n_cols,
        np.concatenate([rows, sinks]),
        np.concatenate([cols, sinks]),
        np.concatenate([vals, np.ones(len(sinks))]),
    )


def out_transition(g: WeightedDigraph) -> SparseMatrix:
    """Forward random-walk matrix ``D_O^{-1} W``."""
    return _row_normalize(g.weights)


def in_transition(g: WeightedDigraph) -> SparseMatrix:
    """Reverse random-walk matrix ``D_I^{-1} W^T``."""
    return _row_normalize(transpose(g.weights))


def symmetrize(g: WeightedDigraph) -> WeightedDigraph:
    """Undirected version with ``W_ij = W_ji = max(W_ij, W_ji)``."""
    w = g.weights
    rows, cols, vals = w.triplets()
    rows2 = np.concatenate([rows, cols])
    cols2 = np.concatenate([cols, rows])
    vals2 = np.concatenate([vals, vals])
    # Keep the max per (row, col) rather than summing duplicates.
    order = np.lexsort((-vals2, cols2, rows2))
    rows2, cols2, vals2 = rows2[order], cols2[order], vals2[order]
    first = np.ones(len(rows2), dtype=bool)
    first[1:] = (rows2[1:] != rows2[:-1]) | (cols2[1:] != cols2[:-1])
    sym = SparseMatrix.from_triplets(w.n_rows, w.n_cols, rows2[first], cols2[first], vals2[first])
    return WeightedDigraph(g.node_ids, sym, kernel_sigma=g.kernel_sigma, kernel_kappa=g.kernel_kappa)


def normalized_laplacian(g: WeightedDigraph) -> SparseMatrix:
    """``D^{-1/2} (D - W) D^{-1/2}``; isolated nodes get an all-zero row."""
    w = g.weights
    if not w.is_symmetric():
        raise GraphError("normalized Laplacian requires a symmetric weight matrix; symmetrize first")
    deg = w.row_sums()
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    rows, cols, vals = w.triplets()
    off = -vals * inv_sqrt[rows] * inv_sqrt[cols]
    diag = np.flatnonzero(deg > 0)
    return SparseMatrix.from_triplets(
        w.n_rows,
        w.n_cols,
        np.concatenate([rows, diag]),
        np.concatenate([cols, diag]),
        np.concatenate([off, np.ones(len(diag))]),
    )


def estimate_lambda_max(lap: SparseMatrix, iters: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(lap.n_rows)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = spmm(lap, v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        lam = float(v @ w)
        v = w / norm
    return lam


def rescaled_laplacian(lap: SparseMatrix, lambda_max: float = 2.0) -> SparseMatrix:
    """``(2 / lambda_max) L - I``, mapping the spectrum onto ``[-1, 1]``."""
    if not lambda_max > 0:
        raise GraphError(f"lambda_max must be positive, got {lambda_max}")
    rows, cols, vals = lap.triplets()
    n = lap.n_rows
    idx = np.arange(n)
    return SparseMatrix.from_triplets(
        n,
        n,
        np.concatenate([rows, idx]),
        np.concatenate([cols, idx]),
        np.concatenate([vals * (2.0 / lambda_max), -np.ones(n)]),
    )


def ppr_stationary(
    g: WeightedDigraph, alpha: float, mode: str = "closed_form", k_max: int | None = None
) -> PPRMatrix:
    """Stationary distribution of the restart-``alpha`` walk on ``D_O^{-1} W``.

    ``mode="closed_form"`` solves ``alpha (I - (1 - alpha) P)^{-1}``;
    ``mode="truncated"`` sums the first ``k_max + 1`` terms of the walk series
    by repeated sparse products.
    """
    if not (0.0 < alpha <= 1.0):
        raise GraphError(f"alpha must lie in (0, 1], got {alpha}")
    p = out_transition(g)
    n = g.n
    if mode == "closed_form":
        a = np.eye(n) - (1.0 - alpha) * p.to_dense()
        try:
            inv = np.linalg.solve(a, np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise GraphError(f"PPR system is singular: {exc}") from None
        return PPRMatrix(alpha * inv, float(alpha))
    if mode == "truncated":
        if k_max is None or k_max < 0:
            raise GraphError("truncated mode needs k_max >= 0")
        term = np.eye(n)
        total = alpha * term
        coef = alpha
        for _ in range(k_max):
            term = spmm(p, term)
            coef *= 1.0 - alpha
            total = total + coef * term
        return PPRMatrix(total, float(alpha))
    raise GraphError(f"unknown PPR mode {mode!r}")


# ----------------------------------------------------------------------------
# text formats


def read_distances(path) -> list[tuple[str, str, float]]:
    """Parse ``from_id,to_id,distance`` records (header line required)."""
    out = []
    with open(path) as fh:
        header = fh.readline()
        if not header:
            raise GraphError(f"{path}: empty distance file")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                d = float(parts[2])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: bad distance {parts[2]!r}") from None
            out.append((parts[0], parts[1], d))
    return out


def read_node_ids(path) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def write_graph(g: WeightedDigraph, path) -> Path:
    """Write triplets to ``path`` and metadata to ``path`` + ``.meta.json``."""
    path = Path(path)
    write_triplets(path, g.weights)
    meta = {
        "n": g.n,
        "nnz": g.weights.nnz,
        "sigma": g.kernel_sigma,
        "kappa": g.kernel_kappa,
        "node_ids": list(g.node_ids),
    }
    meta_path = path.with_name(path.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


def read_graph(path) -> WeightedDigraph:
    path = Path(path)
    meta_path = path.with_name(path.name + ".meta.json")
    if not meta_path.exists():
        raise GraphError(f"missing graph metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    n = int(meta["n"])
    w = read_triplets(path, n, n)
    return WeightedDigraph(
        tuple(meta["node_ids"]), w, kernel_sigma=float(meta["sigma"]), kernel_kappa=float(meta["kappa"])
    )
