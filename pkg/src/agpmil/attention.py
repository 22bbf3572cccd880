"""Bag aggregation: GP attention, deterministic (gated) attention and mean pooling.

Every mechanism maps instance features ``h`` (N x P) to attention weights
(S x N, rows summing to one) and bag embeddings (S x P).  Deterministic
mechanisms use S = 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gp
from . import tensor as T
from .tensor import Parameter, Tensor

ACTIVATIONS = {"sigmoid": T.sigmoid, "tanh": T.tanh, "relu": T.relu}


@dataclass
class AttentionOutput:
    weights: Tensor
    bag_embedding: Tensor
    weight_mean: np.ndarray
    weight_std: np.ndarray


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class GpInputLayer:
    """Dense layer squashing 64-d features into the GP input space."""

    weight: Parameter
    bias: Parameter
    activation: str = "sigmoid"

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng, activation="sigmoid"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        return cls(
            Parameter(glorot(rng, (out_dim, in_dim), in_dim, out_dim), name="att.fc.weight"),
            Parameter(np.zeros(out_dim), name="att.fc.bias"),
            activation,
        )

    def __call__(self, h):
        return ACTIVATIONS[self.activation](T.linear(h, self.weight, self.bias))

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class DetAttentionParams:
    V: Parameter
    w: Parameter
    U: Optional[Parameter] = None

    @classmethod
    def create(cls, feature_dim: int, hidden: int, rng, gated=False):
        V = Parameter(glorot(rng, (hidden, feature_dim), feature_dim, hidden), name="att.V")
        w = Parameter(glorot(rng, (hidden,), hidden, 1), name="att.w")
        U = Parameter(glorot(rng, (hidden, feature_dim), feature_dim, hidden), name="att.U") if gated else None
        return cls(V, w, U)

    @property
    def gated(self) -> bool:
        return self.U is not None

    def parameters(self):
        return [self.V, self.w] + ([self.U] if self.U is not None else [])


def _check_bag(h: Tensor):
    if h.data.ndim != 2 or h.shape[0] < 1:
        raise T.ShapeError(f"attention: expected a non-empty N x P feature matrix, got {h.shape}")


def _summarise(weights: Tensor, embedding: Tensor) -> AttentionOutput:
    w = weights.data
    return AttentionOutput(weights, embedding, w.mean(axis=0), w.std(axis=0))


def canonical_order(h: np.ndarray) -> np.ndarray:
    """Row order that depends only on row contents (lexicographic)."""
    return np.lexsort(h.T[::-1])


def agp_attention(
    h,
    fc: GpInputLayer,
    svgp: gp.SvgpParams,
    s: int,
    rng: np.random.Generator,
    lz: Optional[Tensor] = None,
) -> AttentionOutput:
    """Attention weights as the softmax of S reparametrised draws of the GP.

    Instances are processed in a content-determined order, so the Monte Carlo
    noise attached to an instance does not depend on its position in the bag.
    """
    h = T.as_tensor(h)
    _check_bag(h)
    n = h.shape[0]
    order = canonical_order(h.data)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(n)
    h_sorted = T.index_rows(h, order)
    x = fc(h_sorted)
    q = gp.q_f(svgp, x, lz=lz)
    f = gp.sample_f(q, s, rng, jitter=svgp.jitter)
    weights_sorted = T.softmax(f)
    embedding = T.matmul(weights_sorted, h_sorted)
    weights = T.transpose(T.index_rows(T.transpose(weights_sorted), inverse))
    return _summarise(weights, embedding)


def det_attention(h, p: DetAttentionParams) -> AttentionOutput:
    """softmax_i( w^T tanh(V h_i) ), or the gated form when ``p.U`` is set."""
    h = T.as_tensor(h)
    _check_bag(h)
    if h.shape[1] != p.V.shape[1]:
        raise T.ShapeError(f"det_attention: feature dim {h.shape[1]} != {p.V.shape[1]}")
    hidden = T.tanh(T.linear(h, p.V))
    if p.U is not None:
        hidden = T.mul(hidden, T.sigmoid(T.linear(h, p.U)))
    logits = T.linear(hidden, T.reshape(p.w, (1, p.w.shape[0])))  # N x 1
    weights = T.softmax(T.reshape(logits, (1, h.shape[0])))
    return _summarise(weights, T.matmul(weights, h))


def gated_attention(h, p: DetAttentionParams) -> AttentionOutput:
    if p.U is None:
        raise ValueError("gated_attention needs gate weights U")
    return det_attention(h, p)


def mean_aggregation(h) -> AttentionOutput:
    h = T.as_tensor(h)
    _check_bag(h)
    n = h.shape[0]
    weights = Tensor(np.full((1, n), 1.0 / n))
    return _summarise(weights, T.matmul(weights, h))
