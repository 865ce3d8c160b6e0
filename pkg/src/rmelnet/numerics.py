"""Numerically stable primitives shared by attention and sampling.

Everything here evaluates at 32-bit (or wider) internally; callers holding
16-bit tensors get their inputs promoted first and may cast results back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

# log1pexp branch boundaries
SOFTPLUS_LOW = -37.0
SOFTPLUS_MID = 18.0
SOFTPLUS_HIGH = 33.3

MAX_REJECTIONS = 100


@dataclass(frozen=True)
class PrecisionPolicy:
    """Bit widths for activations; attention internals and optimizer state are always 32-bit."""

    activation_bits: int = 32
    attention_internal_bits: int = 32
    optimizer_state_bits: int = 32

    def __post_init__(self):
        if self.activation_bits not in (16, 32):
            raise ValueError(f"activation_bits must be 16 or 32, got {self.activation_bits}")
        if self.attention_internal_bits != 32 or self.optimizer_state_bits != 32:
            raise ValueError("attention internals and optimizer state are fixed at 32 bits")

    @property
    def activation_dtype(self) -> torch.dtype:
        return torch.float16 if self.activation_bits == 16 else torch.float32


def _promote(x: torch.Tensor) -> torch.Tensor:
    if x.dtype in (torch.float16, torch.bfloat16) or not x.is_floating_point():
        return x.float()
    return x


def stable_softplus(x):
    """log(1 + exp(x)) evaluated branch by branch.

    Each branch only ever sees the inputs inside its own region; the output is
    allocated up front and filled through masks so a NaN produced by one
    branch's formula outside its safe range can never leak into the result.
    NaN inputs match no branch and stay NaN.
    """
    if not isinstance(x, torch.Tensor):
        return float(stable_softplus(torch.tensor(float(x), dtype=torch.float64)))
    x = _promote(x)
    out = torch.full_like(x, float("nan"))

    low = x <= SOFTPLUS_LOW
    mid = (x > SOFTPLUS_LOW) & (x <= SOFTPLUS_MID)
    upper = (x > SOFTPLUS_MID) & (x <= SOFTPLUS_HIGH)
    high = x > SOFTPLUS_HIGH

    out[low] = torch.exp(x[low])
    out[mid] = torch.log1p(torch.exp(x[mid]))
    xu = x[upper]
    out[upper] = xu + torch.exp(-xu)
    out[high] = x[high]
    return out


def approx_tanh(x):
    """Cheap odd squashing x / (1 + |x|), bounded in (-1, 1)."""
    if not isinstance(x, torch.Tensor):
        x = float(x)
        return x / (1.0 + abs(x))
    return x / (1 + x.abs())


def softmax(v, dim: int = -1) -> torch.Tensor:
    v = _promote(torch.as_tensor(v))
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def sample_truncated_gaussian(mu: float, sigma: float, lo: float, hi: float,
                              rng: np.random.Generator, first: float | None = None) -> float:
    """Draw from N(mu, sigma^2) restricted to [lo, hi] by rejection.

    ``first`` optionally supplies the first standard-normal proposal (drawn
    in bulk by the caller); later proposals come from ``rng``. After
    MAX_REJECTIONS failed proposals the last one is clamped into the
    interval, which bounds the cost when mu sits far outside [lo, hi].
    """
    if not lo < hi:
        raise ValueError(f"empty truncation interval [{lo}, {hi}]")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return min(max(mu, lo), hi)
    proposal = mu
    for k in range(MAX_REJECTIONS):
        z = first if k == 0 and first is not None else rng.standard_normal()
        proposal = mu + sigma * z
        if lo <= proposal <= hi:
            return float(proposal)
    return float(min(max(proposal, lo), hi))


def sample_truncated_gaussians(mu: float, sigma: float, lo: float, hi: float, z: np.ndarray,
                               rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """One truncated draw per generator, all sharing (mu, sigma).

    ``z[i]`` is generator i's first standard-normal proposal; only rejected
    entries go back to their generator, so the result equals calling
    ``sample_truncated_gaussian`` per generator with ``first=z[i]``.
    """
    z = np.asarray(z, dtype=np.float64)
    if len(z) != len(rngs):
        raise ValueError(f"{len(z)} first proposals for {len(rngs)} generators")
    if not lo < hi:
        raise ValueError(f"empty truncation interval [{lo}, {hi}]")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.full(len(z), min(max(mu, lo), hi))
    out = mu + sigma * z
    for i in np.flatnonzero((out < lo) | (out > hi)):
        out[i] = sample_truncated_gaussian(mu, sigma, lo, hi, rngs[i], first=z[i])
    return out


def truncated_gaussian_std(sigma: float, lo: float, hi: float, mu: float = 0.0) -> float:
    """Closed-form std of a truncated normal; used for reporting, not sampling."""
    a, b = (lo - mu) / sigma, (hi - mu) / sigma
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    Z = cdf(b) - cdf(a)
    mean_shift = (pdf(a) - pdf(b)) / Z
    var = 1 + (a * pdf(a) - b * pdf(b)) / Z - mean_shift ** 2
    return sigma * math.sqrt(var)
