"""Diffusion convolutional GRU cell and multi-layer recurrence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dconv import DiffusionBasis


@dataclass
class DCGRUParams:
    """Gate filters map ``[X, H]`` (``P + Q`` features) to ``Q`` outputs; biases are per output feature."""

    w_r: ad.ParamTensor
    w_u: ad.ParamTensor
    w_c: ad.ParamTensor
    b_r: ad.ParamTensor
    b_u: ad.ParamTensor
    b_c: ad.ParamTensor
    input_dim: int
    units: int

    @classmethod
    def init(cls, prefix: str, input_dim: int, units: int, basis: DiffusionBasis, rng) -> DCGRUParams:
        rows = (input_dim + units) * basis.num_matrices
        return cls(
            w_r=ad.init_params((rows, units), rng, name=f"{prefix}/w_r"),
            w_u=ad.init_params((rows, units), rng, name=f"{prefix}/w_u"),
            w_c=ad.init_params((rows, units), rng, name=f"{prefix}/w_c"),
            b_r=ad.init_params(units, rng, "zeros", name=f"{prefix}/b_r"),
            b_u=ad.init_params(units, rng, "zeros", name=f"{prefix}/b_u"),
            b_c=ad.init_params(units, rng, "zeros", name=f"{prefix}/b_c"),
            input_dim=input_dim,
            units=units,
        )

    def params(self) -> list[ad.ParamTensor]:
        return [self.w_r, self.w_u, self.w_c, self.b_r, self.b_u, self.b_c]

    def check(self, basis: DiffusionBasis) -> None:
        rows = (self.input_dim + self.units) * basis.num_matrices
        for w in (self.w_r, self.w_u, self.w_c):
            if w.shape != (rows, self.units):
                raise ValueError(f"{w.name} has shape {w.shape}, expected {(rows, self.units)} for {basis.mode}")
        for b in (self.b_r, self.b_u, self.b_c):
            if b.shape != (self.units,):
                raise ValueError(f"{b.name} has shape {b.shape}, expected ({self.units},)")


@dataclass
class DCGRUState:
    hidden: list  # one (N*B, Q) node-major array or Tensor per layer

    @classmethod
    def zeros(cls, layers: list[DCGRUParams], rows: int) -> DCGRUState:
        return cls([ad.Tensor(np.zeros((rows, lp.units))) for lp in layers])


def conv_dispatch(basis: DiffusionBasis, x, weight) -> ad.Tensor:
    """Graph convolution of ``(N*B, F)`` features under the basis' conv mode."""
    return ad.matmul(basis.features(x), weight)


def dcgru_cell(x_t, h_prev, params: DCGRUParams, basis: DiffusionBasis) -> ad.Tensor:
    """One DCGRU update.

    r = sigmoid(conv([x, h]) + b_r);  u = sigmoid(conv([x, h]) + b_u)
    c = tanh(conv([x, r*h]) + b_c);   h' = u*h + (1 - u)*c
    """
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    if x_t.ndim != 2 or x_t.shape[1] != params.input_dim:
        raise ValueError(f"input has shape {x_t.shape}, cell expects {params.input_dim} features")
    if h_prev.shape != (x_t.shape[0], params.units):
        raise ValueError(f"hidden state has shape {h_prev.shape}, expected {(x_t.shape[0], params.units)}")
    feats = basis.features(ad.concat([x_t, h_prev], axis=1))
    r = ad.sigmoid(ad.matmul(feats, params.w_r) + params.b_r)
    u = ad.sigmoid(ad.matmul(feats, params.w_u) + params.b_u)
    c = ad.tanh(conv_dispatch(basis, ad.concat([x_t, r * h_prev], axis=1), params.w_c) + params.b_c)
    # u*h + (1-u)*c == c + u*(h - c)
    return c + u * (h_prev - c)


def stacked_step(x_t, state: DCGRUState, layers: list[DCGRUParams], basis: DiffusionBasis):
    """Advance every layer one step; returns ``(top_output, new_state)``."""
    if len(state.hidden) != len(layers):
        raise ValueError(f"state has {len(state.hidden)} layers, model has {len(layers)}")
    inp = ad.as_tensor(x_t)
    new = []
    for i, (lp, h) in enumerate(zip(layers, state.hidden)):
        if inp.shape[1] != lp.input_dim:
            raise ValueError(f"layer {i} expects {lp.input_dim} input features, got {inp.shape[1]}")
        inp = dcgru_cell(inp, h, lp, basis)
        new.append(inp)
    return inp, DCGRUState(new)
