"""Monotonic mixture-of-logistics attention.

The location of every component only moves forward, by at least
``eps_kappa`` per step. Weights are differences of an approximate logistic
CDF evaluated at u +/- 0.5, so each row telescopes to at most one.
All of it runs at 32-bit and is cast back to the caller's dtype at the end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import approx_tanh, softmax, stable_softplus


@dataclass(frozen=True)
class AttentionConfig:
    M: int = 10
    eps_kappa: float = 0.001
    eps_beta: float = 0.01

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.eps_kappa <= 0 or self.eps_beta <= 0:
            raise ValueError("eps_kappa and eps_beta must be strictly positive")


@dataclass
class MixtureParams:
    """Per-component location, sharpness and weight; trailing dim is M."""

    kappa: torch.Tensor
    beta: torch.Tensor
    alpha: torch.Tensor

    @classmethod
    def initial(cls, batch: int, M: int) -> "MixtureParams":
        zeros = torch.zeros(batch, M)
        return cls(zeros, zeros.clone(), torch.full((batch, M), 1.0 / M))

    def location(self) -> torch.Tensor:
        """Location of the highest-weight component, per batch item."""
        idx = self.alpha.argmax(dim=-1, keepdim=True)
        return self.kappa.gather(-1, idx).squeeze(-1)


@dataclass
class AttentionRecord:
    """Alignment history: weights is (steps, U), kappa is (steps, M)."""

    weights: torch.Tensor
    kappa: torch.Tensor

    def __post_init__(self):
        if self.weights.shape[0] != self.kappa.shape[0]:
            raise ValueError("weights and kappa must have the same number of steps")

    @property
    def steps(self) -> int:
        return self.weights.shape[0]


def step_params(h: torch.Tensor, proj: nn.Linear, prev: MixtureParams,
                cfg: AttentionConfig) -> MixtureParams:
    """Advance the mixture one step from the query ``h`` (batch, hidden)."""
    if not torch.isfinite(h).all():
        raise FloatingPointError("non-finite attention query")
    h32 = h.float()
    raw = nn.functional.linear(h32, proj.weight.float(), None if proj.bias is None else proj.bias.float())
    k_hat, b_hat, a_hat = raw.split(cfg.M, dim=-1)
    kappa = prev.kappa.float() + stable_softplus(k_hat) + cfg.eps_kappa
    beta = stable_softplus(b_hat)
    alpha = softmax(a_hat, dim=-1)
    return MixtureParams(kappa, beta, alpha)


def _cdf(u: torch.Tensor, params: MixtureParams, eps_beta: float) -> torch.Tensor:
    # u: (U,), params: (..., M) -> (..., U, M)
    diff = u[:, None] - params.kappa[..., None, :]
    sharp = params.beta[..., None, :] + eps_beta
    return 0.5 + 0.5 * approx_tanh(diff * sharp / 2)


def weights(params: MixtureParams, U: int, cfg: AttentionConfig,
            out_dtype: torch.dtype | None = None) -> torch.Tensor:
    """Attention weight per memory position, shape (..., U).

    The result is cast to ``out_dtype``, defaulting to the dtype of ``params.kappa``.
    """
    out_dtype = out_dtype or params.kappa.dtype
    if U < 1:
        raise ValueError("memory length must be >= 1")
    p32 = MixtureParams(params.kappa.float(), params.beta.float(), params.alpha.float())
    u = torch.arange(U, dtype=torch.float32, device=p32.kappa.device)
    per_comp = _cdf(u + 0.5, p32, cfg.eps_beta) - _cdf(u - 0.5, p32, cfg.eps_beta)
    phi = (per_comp * p32.alpha[..., None, :]).sum(-1)
    return phi.to(out_dtype)


def context(w: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Weighted sum of memory rows: w (..., U), memory (..., U, D) -> (..., D)."""
    if w.shape[-1] != memory.shape[-2]:
        raise ValueError(f"weights cover {w.shape[-1]} positions but memory has {memory.shape[-2]} rows")
    return (w.unsqueeze(-2) @ memory).squeeze(-2)


class _StraightThroughScale(torch.autograd.Function):
    @staticmethod
    def forward(ctx, phi, scale):
        ctx.scale = scale
        return phi.view_as(phi)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def straight_through_scale(phi: torch.Tensor, M: int) -> torch.Tensor:
    """Identity forward; gradient multiplied by 1/sqrt(M) on the way back."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return _StraightThroughScale.apply(phi, 1.0 / math.sqrt(M))
