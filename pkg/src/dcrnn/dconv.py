"""Diffusion convolution, the diffusion convolutional layer and ChebNet filtering.

All graph filtering goes through :class:`DiffusionBasis`, which stacks the
polynomial terms ``T_k x`` for every support matrix into one feature matrix.
A layer is then a single dense product of those features with a weight
matrix laid out as ``(K, D, P, Q)`` flattened to ``(K*D*P, Q)``, where ``D`` is
the number of supports (2 for the bidirectional walk).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import GraphError, WeightedDigraph, in_transition, normalized_laplacian, out_transition, rescaled_laplacian, symmetrize
from .sparse import SparseMatrix, diffusion_powers, spmm

CONV_MODES = ("bidirectional", "forward_only", "identity", "chebnet")
ACTIVATIONS = {"identity": ad.identity, "relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh}


@dataclass(frozen=True, eq=False)
class DiffusionBasis:
    """Graph operators and recursion used to expand a signal into filter terms.

    ``mode`` selects the supports:

    * ``bidirectional`` -- forward walk ``D_O^-1 W`` and reverse walk ``D_I^-1 W^T``
    * ``forward_only`` -- forward walk only
    * ``identity`` -- both walks replaced by ``I`` (no neighbour mixing)
    * ``chebnet`` -- Chebyshev polynomials of a symmetric rescaled Laplacian
    """

    mode: str
    k_max: int
    supports: tuple[SparseMatrix, ...] = ()
    n_nodes: int = 0
    _adjoints: tuple[SparseMatrix, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in CONV_MODES:
            raise ValueError(f"unknown conv mode {self.mode!r}; expected one of {CONV_MODES}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        expected = {"bidirectional": 2, "forward_only": 1, "identity": 0, "chebnet": 1}[self.mode]
        if len(self.supports) != expected:
            raise ValueError(f"{self.mode} mode needs {expected} support matrices, got {len(self.supports)}")
        for s in self.supports:
            if s.shape != (self.n_nodes, self.n_nodes):
                raise ValueError(f"support shape {s.shape} does not match {self.n_nodes} nodes")
        if self.mode == "chebnet" and not self.supports[0].is_symmetric(tol=1e-12):
            raise GraphError("chebnet mode requires a symmetric rescaled Laplacian")
        object.__setattr__(self, "_adjoints", tuple(ad.sparse_transpose(s) for s in self.supports))

    @classmethod
    def from_graph(cls, graph: WeightedDigraph, mode: str, k_max: int, lambda_max: float = 2.0) -> DiffusionBasis:
        if mode == "bidirectional":
            supports = (out_transition(graph), in_transition(graph))
        elif mode == "forward_only":
            supports = (out_transition(graph),)
        elif mode == "identity":
            supports = ()
        elif mode == "chebnet":
            supports = (rescaled_laplacian(normalized_laplacian(symmetrize(graph)), lambda_max),)
        else:
            raise ValueError(f"unknown conv mode {mode!r}")
        return cls(mode, k_max, supports, graph.n)

    @property
    def num_directions(self) -> int:
        return 1 if self.mode in ("forward_only", "chebnet") else 2

    @property
    def num_matrices(self) -> int:
        """Number of filter terms per input feature (``K * D``)."""
        return self.k_max * self.num_directions

    # -- raw numpy recursion ------------------------------------------------

    def terms(self, x: np.ndarray) -> np.ndarray:
        """Return terms with shape ``(K, D) + x.shape`` for a node-major ``x`` of shape ``(N, C)``."""
        k = self.k_max
        if self.mode == "identity":
            return np.broadcast_to(x, (k, 2) + x.shape)
        if self.mode == "chebnet":
            lap = self.supports[0]
            t = [x]
            if k > 1:
                t.append(spmm(lap, x))
            for _ in range(2, k):
                t.append(2.0 * spmm(lap, t[-1]) - t[-2])
            return np.stack(t)[:, None]
        per_dir = [np.stack(diffusion_powers(s, x, k)) for s in self.supports]
        return np.stack(per_dir, axis=1)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of :meth:`terms`; ``g`` has shape ``(K, D, N, C)``."""
        k = self.k_max
        if self.mode == "identity":
            return g.sum(axis=(0, 1))
        if self.mode == "chebnet":
            lap_t = self._adjoints[0]
            b = [g[i, 0].copy() for i in range(k)]
            for i in range(k - 1, 1, -1):
                b[i - 1] += 2.0 * spmm(lap_t, b[i])
                b[i - 2] -= b[i]
            if k > 1:
                b[0] += spmm(lap_t, b[1])
            return b[0]
        total = None
        for d, s_t in enumerate(self._adjoints):
            acc = g[k - 1, d]
            for i in range(k - 2, -1, -1):
                acc = spmm(s_t, acc) + g[i, d]
            total = acc if total is None else total + acc
        return total

    # -- differentiable batched features ------------------------------------

    def features(self, x) -> ad.Tensor:
        """Stack filter terms of a batched signal.

        ``x`` has shape ``(N*B, F)`` with rows ordered node-major (row
        ``n*B + b``), so each node's block is one row of an ``(N, B*F)`` view
        and the sparse products need no transposes.  The result has shape
        ``(N*B, K*D*F)`` with columns ordered ``(k, d, f)``.
        """
        x = ad.as_tensor(x)
        n = self.n_nodes
        rows, f = x.shape
        if rows % n:
            raise ValueError(f"{rows} rows is not a multiple of {n} nodes")
        b = rows // n
        k, d = self.k_max, self.num_directions
        t = self.terms(x.value.reshape(n, b * f))
        out = np.empty((n, b, k, d, f))
        out[...] = t.reshape(k, d, n, b, f).transpose(2, 3, 0, 1, 4)

        def vjp(g):
            gt = g.reshape(n, b, k, d, f).transpose(2, 3, 0, 1, 4).reshape(k, d, n, b * f)
            return (self.adjoint(gt).reshape(rows, f),)

        return ad.custom_op(out.reshape(rows, k * d * f), (x,), vjp)


# ----------------------------------------------------------------------------
# filters and layers


@dataclass
class DiffusionFilter:
    """Coefficients ``theta[k, 0]`` (forward walk) and ``theta[k, 1]`` (reverse walk)."""

    theta: object  # (K, 2) array or Tensor

    @property
    def k_max(self) -> int:
        return ad.as_tensor(self.theta).shape[0]

    def __post_init__(self):
        shape = ad.as_tensor(self.theta).shape
        if len(shape) != 2 or shape[1] != 2:
            raise ValueError(f"diffusion filter must be (K, 2), got {shape}")


@dataclass
class ChebFilter:
    theta: object  # length-K array or Tensor

    @property
    def k_max(self) -> int:
        return ad.as_tensor(self.theta).shape[0]


@dataclass
class DConvLayerParams:
    """Layer weights stored as ``(K*D*P, Q)``; :meth:`theta_tensor` exposes ``Θ[q, p, k, d]``."""

    weight: ad.ParamTensor
    input_dim: int
    output_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        rows, cols = self.weight.shape
        if cols != self.output_dim or rows % self.input_dim:
            raise ValueError(
                f"weight shape {self.weight.shape} inconsistent with P={self.input_dim}, Q={self.output_dim}"
            )

    @classmethod
    def init(cls, name, input_dim, output_dim, basis: DiffusionBasis, rng, activation="identity"):
        w = ad.init_params((input_dim * basis.num_matrices, output_dim), rng, name=name)
        return cls(w, input_dim, output_dim, activation)

    @classmethod
    def from_theta(cls, theta, name="theta", activation="identity") -> DConvLayerParams:
        """Build from a ``(Q, P, K, D)`` tensor."""
        theta = np.asarray(theta, dtype=np.float64)
        q, p, k, d = theta.shape
        w = theta.transpose(2, 3, 1, 0).reshape(k * d * p, q)
        return cls(ad.ParamTensor(name, w), p, q, activation)

    def theta_tensor(self, num_directions: int = 2) -> np.ndarray:
        p, q = self.input_dim, self.output_dim
        k = self.weight.shape[0] // (p * num_directions)
        return self.weight.value.reshape(k, num_directions, p, q).transpose(3, 2, 0, 1)


def diffusion_conv(x_col, f: DiffusionFilter, p_out: SparseMatrix, p_in: SparseMatrix) -> ad.Tensor:
    """``sum_k (theta_k1 P_O^k + theta_k2 P_I^k) x`` for a single-feature signal ``x`` (N x 1)."""
    x = ad.as_tensor(x_col)
    if x.ndim != 2 or x.shape[1] != 1:
        raise ValueError(f"expected an N x 1 signal, got {x.shape}")
    basis = DiffusionBasis("bidirectional", f.k_max, (p_out, p_in), p_out.n_rows)
    return ad.matmul(basis.features(x), ad.reshape(f.theta, (-1, 1)))


def dconv_layer(x, params: DConvLayerParams, basis: DiffusionBasis) -> ad.Tensor:
    """Map ``(N*B, P)`` features to ``(N*B, Q)``; terms are expanded once and shared by all outputs."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input has shape {x.shape}, layer expects {params.input_dim} features")
    if params.weight.shape[0] != params.input_dim * basis.num_matrices:
        raise ValueError(
            f"weight rows {params.weight.shape[0]} != P*K*D = {params.input_dim * basis.num_matrices}"
        )
    return ACTIVATIONS[params.activation](ad.matmul(basis.features(x), params.weight))


def chebnet_conv(x_col, f: ChebFilter, l_tilde: SparseMatrix) -> ad.Tensor:
    """``sum_k theta_k T_k(L~) x`` with the recurrence ``T_k = 2 L~ T_{k-1} - T_{k-2}``."""
    x = ad.as_tensor(x_col)
    if x.ndim != 2 or x.shape[1] != 1:
        raise ValueError(f"expected an N x 1 signal, got {x.shape}")
    basis = DiffusionBasis("chebnet", f.k_max, (l_tilde,), l_tilde.n_rows)
    return ad.matmul(basis.features(x), ad.reshape(f.theta, (-1, 1)))


def filter_weights(theta, basis: DiffusionBasis, center: int) -> np.ndarray:
    """Effective per-node weights of a ``(K, D)`` filter applied to the indicator of ``center``."""
    theta = np.asarray(theta, dtype=np.float64)
    e = np.zeros((basis.n_nodes, 1))
    e[center, 0] = 1.0
    feats = basis.features(e).value
    return (feats @ theta.reshape(-1, 1))[:, 0]


def write_filter_weights(path, node_ids, weights) -> None:
    with open(path, "w") as fh:
        fh.write("node_id,weight\n")
        for nid, w in zip(node_ids, weights):
            fh.write(f"{nid},{float(w)!r}\n")
