"""Training objectives.

The group evidence lower bound with an optional style-KL weight, the
same-group / cross-group pair sampler feeding the mutual-information
estimator, the Donsker-Varadhan critic loss, and the combined adversarial
objective for the encoder/decoder update.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError
from .gaussians import ACCUMULATORS, DiagonalGaussian, kl_to_standard_normal, rsample


@dataclass
class ElboTerms:
    """Per-group ELBO pieces, each shaped (B,) over the batch.

    ``recon`` is the summed expected log-likelihood of the K members,
    ``style_kl`` the summed style KLs, ``content_kl`` the KL of the
    accumulated group posterior. The objective is
    ``recon - beta * style_kl - content_kl``.
    """

    recon: Tensor
    style_kl: Tensor
    content_kl: Tensor
    beta: float = 1.0

    @property
    def objective(self) -> Tensor:
        return self.recon - (self.beta * self.style_kl + self.content_kl)


def bernoulli_log_likelihood(logits: Tensor, targets: Tensor) -> Tensor:
    """Sum over pixels of log p(x | logits) under a Bernoulli with the given logits.

    Returns one value per leading batch element.
    """
    nll = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return -nll.flatten(start_dim=1).sum(dim=-1)


def group_elbo(
    images: Tensor,
    encoder,
    decoder,
    accumulation: str = "product",
    beta: float = 1.0,
    content_noise: Tensor | None = None,
    style_noise: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> ElboTerms:
    """Group ELBO over a batch of groups with images shaped (B, K, C, H, W).

    Each member is encoded; content posteriors are combined across the group
    with the chosen accumulation strategy; a single content sample is shared
    by all K reconstructions while each member gets its own style sample.
    One Monte-Carlo sample per latent. Bernoulli likelihood.
    """
    if images.ndim != 5 or images.shape[1] < 1:
        raise ValueError(f"expected (B, K, C, H, W) group images, got {tuple(images.shape)}")
    if beta < 1.0:
        raise ValueError(f"beta must be >= 1 (beta=1 is the plain objective), got {beta}")
    b, k = images.shape[:2]
    flat = images.reshape(b * k, *images.shape[2:])
    enc = encoder(flat)

    c_means = enc.content.mean.reshape(b, k, -1)
    c_log_vars = enc.content.log_var.reshape(b, k, -1)
    group_content = ACCUMULATORS[accumulation](c_means, c_log_vars, dim=1)

    style = DiagonalGaussian(
        enc.style.mean.reshape(b, k, -1), enc.style.log_var.reshape(b, k, -1)
    )
    c = rsample(group_content, noise=content_noise, generator=generator)  # (B, d_c)
    s = rsample(style, noise=style_noise, generator=generator)  # (B, K, d_s)

    c_tiled = c.unsqueeze(1).expand(b, k, -1).reshape(b * k, -1)
    logits = decoder(c_tiled, s.reshape(b * k, -1))
    recon = bernoulli_log_likelihood(logits, flat).reshape(b, k).sum(dim=1)

    style_kl = kl_to_standard_normal(style).sum(dim=1)
    content_kl = kl_to_standard_normal(group_content)
    return ElboTerms(recon, style_kl, content_kl, beta=beta)


def dataset_objective(terms: ElboTerms) -> Tensor:
    """Mini-batch estimate of the dataset-level bound: mean over groups."""
    if terms.recon.numel() == 0:
        raise ValueError("empty batch")
    return terms.objective.mean()


@dataclass
class PairIndices:
    """Member/group index draws for one batch of pairs: arrays of length B."""

    i: np.ndarray  # member whose image enters R
    j: np.ndarray  # member whose style posterior is sampled for R (j != i)
    k: np.ndarray  # member whose image enters the cross-group pair
    l: np.ndarray  # member of the next group whose style is sampled
    m: np.ndarray  # next-group index, m[b] = (b + 1) mod N_B


def draw_pair_indices(n_groups: int, group_size: int, rng: np.random.Generator) -> PairIndices:
    """Index sampling for the same-group / cross-group pair construction.

    For every group b: pick distinct members i != j uniformly; the cross-group
    pair uses the next group in the batch with independently uniform members.
    """
    if n_groups < 2:
        raise ConfigurationError("need at least two groups per batch for cross-group pairs")
    if group_size < 2:
        raise ConfigurationError("need group size >= 2 to pair distinct members")
    i = rng.integers(0, group_size, size=n_groups)
    # j uniform over the other K-1 members
    j = (i + rng.integers(1, group_size, size=n_groups)) % group_size
    k = rng.integers(0, group_size, size=n_groups)
    l = rng.integers(0, group_size, size=n_groups)
    m = (np.arange(n_groups) + 1) % n_groups
    return PairIndices(i, j, k, l, m)


@dataclass
class PairSets:
    """Samples feeding the MI estimator.

    ``joint`` pairs every image with a style sampled from another member of
    its own group; ``marginal`` pairs it with a style from a different group.
    Style tensors carry gradients back to the encoder.
    """

    joint_x: Tensor
    joint_s: Tensor
    marginal_x: Tensor
    marginal_s: Tensor

    def __len__(self) -> int:
        return self.joint_x.shape[0]


def sample_pairs(
    images: Tensor,
    encoder,
    rng: np.random.Generator,
    style_noise: Tensor | None = None,
    indices: PairIndices | None = None,
    generator: torch.Generator | None = None,
) -> PairSets:
    """Build the same-group and cross-group pair sets from (B, K, C, H, W) images.

    ``style_noise`` (shape (2*B, d_s)) and ``indices`` may be supplied to make
    the construction reproducible under finite-difference probing.
    """
    b, k = images.shape[:2]
    if indices is None:
        indices = draw_pair_indices(b, k, rng)
    groups = np.arange(b)

    joint_x = images[groups, indices.i]
    joint_src = images[groups, indices.j]
    marginal_x = images[groups, indices.k]
    marginal_src = images[indices.m, indices.l]

    enc = encoder(torch.cat([joint_src, marginal_src], dim=0))
    noise = style_noise
    if noise is not None and noise.shape != enc.style.mean.shape:
        raise ValueError(
            f"style_noise shape {tuple(noise.shape)} != {tuple(enc.style.mean.shape)}"
        )
    styles = rsample(enc.style, noise=noise, generator=generator)
    return PairSets(joint_x, styles[:b], marginal_x, styles[b:])


def dv_mi_loss(pairs: PairSets, statistics_network) -> Tensor:
    """Donsker-Varadhan lower-bound estimate of the style/content leakage.

    mean score on same-group pairs minus log-mean-exp of scores on
    cross-group pairs; the log-mean-exp is stabilized by max subtraction.
    """
    if len(pairs) == 0 or pairs.marginal_x.shape[0] == 0:
        raise ValueError("pair sets must be nonempty")
    joint_scores = statistics_network(pairs.joint_x, pairs.joint_s)
    marginal_scores = statistics_network(pairs.marginal_x, pairs.marginal_s)
    n_marginal = marginal_scores.shape[0]
    log_mean_exp = torch.logsumexp(marginal_scores, dim=0) - math.log(n_marginal)
    return joint_scores.mean() - log_mean_exp


@contextmanager
def frozen_params(module):
    """Temporarily exclude a module's parameters from gradient tracking."""
    states = [p.requires_grad for p in module.parameters()]
    try:
        for p in module.parameters():
            p.requires_grad_(False)
        yield
    finally:
        for p, state in zip(module.parameters(), states):
            p.requires_grad_(state)


def adversarial_objective(
    images: Tensor,
    encoder,
    decoder,
    critic,
    lam: float,
    rng: np.random.Generator,
    accumulation: str = "product",
    beta: float = 1.0,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, ElboTerms, Tensor]:
    """ELBO minus lambda times the estimated leakage, to be ascended in (theta, phi).

    The MI term's gradient reaches the encoder through the sampled styles;
    the critic's own parameters are frozen here (they are trained separately,
    in the opposite direction).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    terms = group_elbo(images, encoder, decoder,
                       accumulation=accumulation, beta=beta, generator=generator)
    elbo = dataset_objective(terms)
    # The leakage estimate is computed even at lambda=0: the controller that
    # adapts lambda consumes it, and elbo - 0*mi stays exactly equal to elbo.
    pairs = sample_pairs(images, encoder, rng, generator=generator)
    with frozen_params(critic):
        mi = dv_mi_loss(pairs, critic)
    return elbo - lam * mi, terms, mi
