"""Closed-form operations on diagonal Gaussians.

All latent posteriors and priors in this project are diagonal Gaussians
parameterized by mean and log-variance. This module provides the KL to the
standard-normal prior, reparameterized sampling, log-densities, and the two
strategies for combining the per-member content posteriors of a group into a
single group-level posterior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .errors import InvalidDistributionError, ShapeError

# Clamp range for log-variances. Precision exp(-log_var) must not overflow
# when many posteriors are multiplied together.
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagonalGaussian:
    """Mean / log-variance parameterization, batched over leading dims.

    ``mean`` and ``log_var`` share a common shape ``(..., d)``; operations
    reduce over the trailing latent dimension. ``log_var`` is clamped to
    ``[LOGVAR_MIN, LOGVAR_MAX]`` on construction.
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = torch.as_tensor(self.mean, dtype=torch.get_default_dtype())
        if not isinstance(self.log_var, Tensor):
            self.log_var = torch.as_tensor(self.log_var, dtype=torch.get_default_dtype())
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape "
                f"{tuple(self.log_var.shape)}"
            )
        if self.mean.numel() == 0:
            raise InvalidDistributionError("latent dimension must be >= 1")
        if not bool(torch.isfinite(self.mean).all()) or not bool(
            torch.isfinite(self.log_var).all()
        ):
            raise InvalidDistributionError("non-finite mean or log_var")
        self.log_var = torch.clamp(self.log_var, LOGVAR_MIN, LOGVAR_MAX)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> Tensor:
        return torch.exp(self.log_var)

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_var)


def kl_to_standard_normal(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)), reduced over the latent dimension.

    Returns a tensor shaped like the batch dims of ``q`` (a scalar for an
    unbatched Gaussian). Nonnegative, zero exactly at the standard normal.
    expm1 keeps each per-dimension term nonnegative under rounding.
    """
    return 0.5 * (torch.expm1(q.log_var) - q.log_var + q.mean**2).sum(dim=-1)


def rsample(
    q: DiagonalGaussian,
    noise: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Reparameterized sample ``mean + std * noise``.

    ``noise`` must broadcast to the shape of ``q.mean``; when omitted it is
    drawn from a standard normal (optionally with an explicit generator).
    Differentiable w.r.t. the parameters of ``q``.
    """
    if noise is None:
        noise = torch.randn(
            q.mean.shape, generator=generator, dtype=q.mean.dtype, device=q.mean.device
        )
    elif noise.shape != q.mean.shape:
        raise ShapeError(
            f"noise shape {tuple(noise.shape)} != mean shape {tuple(q.mean.shape)}"
        )
    return q.mean + q.std * noise


def log_prob(q: DiagonalGaussian, x: Tensor) -> Tensor:
    """Log-density of ``x`` under ``q``, summed over the latent dimension."""
    if x.shape[-1] != q.dim:
        raise ShapeError(f"x has dim {x.shape[-1]}, expected {q.dim}")
    return -0.5 * (_LOG_2PI + q.log_var + (x - q.mean) ** 2 / q.variance).sum(dim=-1)


def standard_normal_log_prob(x: Tensor) -> Tensor:
    return -0.5 * (_LOG_2PI + x**2).sum(dim=-1)


def _stack(posteriors: Sequence[DiagonalGaussian]) -> tuple[Tensor, Tensor]:
    if len(posteriors) == 0:
        raise ValueError("need at least one posterior to accumulate")
    dims = {p.dim for p in posteriors}
    if len(dims) != 1:
        raise ShapeError(f"posteriors have mixed dimensions: {sorted(dims)}")
    means = torch.stack([p.mean for p in posteriors], dim=0)
    log_vars = torch.stack([p.log_var for p in posteriors], dim=0)
    return means, log_vars


def product_of_gaussians(means: Tensor, log_vars: Tensor, dim: int = 0) -> DiagonalGaussian:
    """Normalized product of Gaussians stacked along ``dim``.

    Output precision is the sum of input precisions; the mean is the
    precision-weighted average. The product's normalization constant is never
    needed because only the resulting proper Gaussian is used. A single
    input comes back unchanged (bit-exact, no log/exp roundtrip).
    """
    if means.shape[dim] == 1:
        return DiagonalGaussian(means.squeeze(dim), log_vars.squeeze(dim))
    precisions = torch.exp(-log_vars)
    total_precision = precisions.sum(dim=dim)
    mean = (means * precisions).sum(dim=dim) / total_precision
    return DiagonalGaussian(mean, -torch.log(total_precision))


def accumulate_product(posteriors: Sequence[DiagonalGaussian]) -> DiagonalGaussian:
    """Combine group-member content posteriors by multiplying densities."""
    means, log_vars = _stack(posteriors)
    return product_of_gaussians(means, log_vars, dim=0)


def mean_of_gaussians(means: Tensor, log_vars: Tensor, dim: int = 0) -> DiagonalGaussian:
    return DiagonalGaussian(means.mean(dim=dim), log_vars.mean(dim=dim))


def accumulate_average(posteriors: Sequence[DiagonalGaussian]) -> DiagonalGaussian:
    """Simplified accumulation: arithmetic mean of means and of log-variances.

    Stand-in for the simplified strategy from prior grouped-VAE work, whose
    exact formula is not pinned down here; see docs for the deviation note.
    """
    means, log_vars = _stack(posteriors)
    return mean_of_gaussians(means, log_vars, dim=0)


ACCUMULATORS = {
    "product": product_of_gaussians,
    "average": mean_of_gaussians,
}
