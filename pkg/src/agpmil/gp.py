"""Sparse variational GP layer with an RBF kernel.

The prior over inducing values is N(0, Kzz); the variational posterior is
q(U) = N(mu_u, L_u L_u^T) with ``L_u`` lower triangular and a softplus
diagonal.  All inverses of Kzz are realised through its Cholesky factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NotPositiveDefiniteError, Parameter, Tensor

DEFAULT_JITTER = 1e-6
ESCALATED_JITTER = 1e-4
INIT_SIGMA_U = 0.05


class GPStateError(RuntimeError):
    """The GP matrices stayed indefinite after jitter escalation."""


@dataclass
class RbfKernel:
    log_lengthscale: Parameter
    log_variance: Parameter

    @classmethod
    def create(cls, lengthscale=1.0, variance=1.0):
        return cls(
            Parameter(np.log(lengthscale), name="kernel.log_lengthscale"),
            Parameter(np.log(variance), name="kernel.log_variance"),
        )

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale.data))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance.data))

    def parameters(self):
        return [self.log_lengthscale, self.log_variance]


def _softplus_inv(y):
    return np.log(np.expm1(y))


@dataclass
class SvgpParams:
    Z: Parameter
    mu_u: Parameter
    L_raw: Parameter
    kernel: RbfKernel
    jitter: float = DEFAULT_JITTER

    @classmethod
    def create(cls, num_inducing: int, input_dim: int, rng: np.random.Generator, jitter=DEFAULT_JITTER):
        """Inducing locations uniform on [0.3, 0.7]; mu_u = 0; Sigma_u = 0.05 I; unit kernel."""
        Z = rng.uniform(0.3, 0.7, size=(num_inducing, input_dim))
        raw = np.eye(num_inducing) * _softplus_inv(np.sqrt(INIT_SIGMA_U))
        return cls(
            Z=Parameter(Z, name="svgp.Z"),
            mu_u=Parameter(np.zeros(num_inducing), name="svgp.mu_u"),
            L_raw=Parameter(raw, name="svgp.L_raw"),
            kernel=RbfKernel.create(),
            jitter=jitter,
        )

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    def parameters(self):
        return [self.Z, self.mu_u, self.L_raw, *self.kernel.parameters()]

    def set_scale_factor(self, L: np.ndarray):
        """Store a lower-triangular factor with positive diagonal into ``L_raw``."""
        L = np.tril(np.asarray(L, dtype=np.float64))
        d = np.diag(L)
        if np.any(d <= 0):
            raise ValueError("scale factor needs a positive diagonal")
        raw = L.copy()
        raw[np.diag_indices_from(raw)] = _softplus_inv(d)
        self.L_raw.data[...] = raw


@dataclass
class GaussianBatch:
    mean: Tensor
    cov: Tensor
    samples: Optional[Tensor] = None


def scale_factor(params: SvgpParams) -> Tensor:
    """L_u: strict lower triangle of ``L_raw`` plus softplus of its diagonal."""
    raw = params.L_raw
    return T.add(T.tril(raw, -1), T.diag_embed(T.softplus(T.diag(raw))))


def kernel_matrix(a, b, kernel: RbfKernel) -> Tensor:
    """k(a_i, b_j) = s2 * exp(-|a_i - b_j|^2 / (2 l^2))."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise T.ShapeError(f"kernel_matrix: input dimensions differ, {a.shape} vs {b.shape}")
    inv_l2 = T.exp(T.scale(kernel.log_lengthscale, -2.0))
    k = T.exp(T.add(T.scale(T.mul(T.sqdist(a, b), inv_l2), -0.5), kernel.log_variance))
    return k


def jittered_cholesky(k: Tensor, jitter: float) -> Tensor:
    """Cholesky of ``k + jitter*I``, retrying once at the escalated jitter."""
    n = k.shape[0]
    for j in (jitter, max(jitter, ESCALATED_JITTER)):
        try:
            return T.cholesky(T.add(k, Tensor(j * np.eye(n))))
        except NotPositiveDefiniteError as err:
            last = err
    raise GPStateError(f"matrix of size {n} not positive definite even with jitter {ESCALATED_JITTER}") from last


def prior_factor(params: SvgpParams) -> Tensor:
    return jittered_cholesky(kernel_matrix(params.Z, params.Z, params.kernel), params.jitter)


def q_f(params: SvgpParams, x, lz: Optional[Tensor] = None) -> GaussianBatch:
    """Marginal q(F) at inputs ``x`` (N x D).

    mean = Kxz Kzz^-1 mu_u
    cov  = Kxx - Kxz Kzz^-1 (Kzz - Sigma_u) Kzz^-1 Kzx
    """
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise T.ShapeError(f"q_f: expected a non-empty N x D input, got {x.shape}")
    if x.shape[1] != params.input_dim:
        raise T.ShapeError(f"q_f: input dimension {x.shape[1]} != inducing dimension {params.input_dim}")
    m = params.num_inducing
    if lz is None:
        lz = prior_factor(params)
    kzx = kernel_matrix(params.Z, x, params.kernel)
    kxx = kernel_matrix(x, x, params.kernel)
    a = T.tri_solve(lz, kzx)  # Lz^-1 Kzx
    w = T.tri_solve(lz, a, side="upper")  # Kzz^-1 Kzx
    mean = T.reshape(T.matmul(T.transpose(w), T.reshape(params.mu_u, (m, 1))), (x.shape[0],))
    b = T.matmul(T.transpose(scale_factor(params)), w)
    cov = T.add(T.sub(kxx, T.matmul(T.transpose(a), a)), T.matmul(T.transpose(b), b))
    return GaussianBatch(mean=mean, cov=cov)


def kl_u(params: SvgpParams, lz: Optional[Tensor] = None) -> Tensor:
    """Closed-form KL(q(U) || p(U)) between M-variate Gaussians."""
    m = params.num_inducing
    if lz is None:
        lz = prior_factor(params)
    lu = scale_factor(params)
    trace = T.sum(T.mul(v := T.tri_solve(lz, lu), v))
    maha = T.sum(T.mul(r := T.tri_solve(lz, params.mu_u), r))
    logdet_k = T.scale(T.sum(T.log(T.diag(lz))), 2.0)
    logdet_s = T.scale(T.sum(T.log(T.diag(lu))), 2.0)
    total = T.add(T.sub(T.add(trace, maha), float(m)), T.sub(logdet_k, logdet_s))
    return T.scale(total, 0.5)


def sample_f(q: GaussianBatch, s: int, rng: np.random.Generator, jitter: float = DEFAULT_JITTER) -> Tensor:
    """Reparametrised draws ``mean + L eps`` (S x N); eps never carries gradient."""
    if s < 1:
        raise ValueError(f"sample_f: need at least one sample, got {s}")
    n = q.mean.shape[0]
    chol = jittered_cholesky(q.cov, jitter)
    eps = Tensor(rng.standard_normal((s, n)))
    loc = T.matmul(Tensor(np.ones((s, 1))), T.reshape(q.mean, (1, n)))
    samples = T.add(loc, T.matmul(eps, T.transpose(chol)))
    q.samples = samples
    return samples
