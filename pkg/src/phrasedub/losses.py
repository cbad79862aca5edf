"""KL regularizers for phrase posteriors and the weighted training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .encoder import GaussianPosterior
from .errors import ConfigurationError, CountError, NumericError

# grid values explored for the weights; defaults are the selected ones
ALPHA_GRID = (0.02, 0.04, 0.08)
BETA_GRID = (0.02, 0.04, 0.08)


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.04  # prosody KLD weight
    alpha2: float = 0.04  # noise KLD weight
    beta1: float = 0.08  # prosody length coefficient
    beta2: float = 0.08  # noise length coefficient

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    prosody_kld: torch.Tensor
    noise_kld: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            name: float(torch.as_tensor(getattr(self, name)).detach())
            for name in ("reconstruction", "prosody_kld", "noise_kld", "total")
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())


def kld_terms(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(log_variance)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mean.pow(2) + log_variance.exp() - log_variance - 1.0).sum(dim=-1)


def kld_diag_standard(posterior: GaussianPosterior) -> torch.Tensor:
    if not (torch.isfinite(posterior.mean).all() and torch.isfinite(posterior.log_variance).all()):
        raise NumericError("posterior has non-finite mean or log-variance")
    return kld_terms(posterior.mean, posterior.log_variance)


def length_weighted_kld(
    posteriors: Sequence[GaussianPosterior], lengths: Sequence[int], beta: float
) -> torch.Tensor:
    """Mean over phrases of ``exp(-beta * L_k) * KL(h_k || N(0, I))``.

    ``L_k`` is the phoneme count of phrase ``k``; short phrases get the larger
    weight.
    """
    if len(posteriors) != len(lengths):
        raise CountError(f"{len(posteriors)} posteriors but {len(lengths)} phrase lengths")
    if not posteriors:
        raise CountError("an utterance needs at least one phrase")
    if any(length < 1 for length in lengths):
        raise CountError(f"phrase lengths must be positive, got {list(lengths)}")
    klds = torch.stack([kld_diag_standard(p) for p in posteriors])
    scale = torch.exp(-beta * torch.as_tensor(lengths, dtype=klds.dtype))
    return (scale * klds).mean()


def total_loss(
    reconstruction: torch.Tensor,
    prosody_posteriors: Sequence[GaussianPosterior],
    noise_posteriors: Sequence[GaussianPosterior],
    lengths: Sequence[int],
    weights: LossWeights,
) -> LossBreakdown:
    reconstruction = torch.as_tensor(reconstruction)
    prosody = length_weighted_kld(prosody_posteriors, lengths, weights.beta1)
    noise = length_weighted_kld(noise_posteriors, lengths, weights.beta2)
    total = reconstruction + weights.alpha1 * prosody + weights.alpha2 * noise
    return LossBreakdown(reconstruction, prosody, noise, total)


def mean_breakdown(items: Sequence[LossBreakdown]) -> LossBreakdown:
    """Batch reduction: the mean of per-utterance values, field by field."""
    if not items:
        raise CountError("empty batch")
    return LossBreakdown(
        *(torch.stack([getattr(b, f) for b in items]).mean() for f in ("reconstruction", "prosody_kld", "noise_kld", "total"))
    )
