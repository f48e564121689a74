"""MI-based training objectives: VIB/VFE, invariant (IFE), digital-rate (RIB),
two-device distributed (DIB), InfoNCE, and latent pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .channel import ChannelSpec
from .mi import Constellation, discrete_mi_tensor, kl_gauss_to_std

__all__ = [
    "LossReport",
    "ModeError",
    "PruneResult",
    "vib_loss",
    "ife_loss",
    "rib_loss",
    "dib_loss",
    "infonce_loss",
    "prune_latents",
]


class ModeError(ValueError):
    """An objective was invoked under the wrong transmission mode."""


@dataclass
class LossReport:
    """Scalar training loss with its named, weighted components.

    ``total`` keeps the autograd graph; ``components`` are detached floats
    satisfying total = sum_i weights[i] * components[i].
    """

    total: torch.Tensor
    components: dict[str, float]
    weights: dict[str, float]

    def weighted_sum(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.components.items()))

    def component_error(self) -> float:
        """|total - sum of weighted components|; bounded by 1e-6 in tests."""
        total = self.total.detach() if torch.is_tensor(self.total) else self.total
        return abs(float(total) - self.weighted_sum())


def vib_loss(scores: torch.Tensor, y: torch.Tensor, mu: torch.Tensor,
             logvar: torch.Tensor, beta: float) -> LossReport:
    """Cross-entropy plus beta times the mean Gaussian-to-prior rate."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    ce = F.cross_entropy(scores, y)
    rate = kl_gauss_to_std(mu, logvar).mean()
    total = ce + beta * rate
    return LossReport(
        total=total,
        components={"task_ce": float(ce.detach()), "rate": float(rate.detach())},
        weights={"task_ce": 1.0, "rate": beta},
    )


def _dummy_classifier_penalty(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared gradient of the env loss w.r.t. a unit dummy logit scale."""
    w = torch.ones(1, dtype=scores.dtype, requires_grad=True)
    ce = F.cross_entropy(scores * w, y)
    (grad,) = torch.autograd.grad(ce, [w], create_graph=True)
    return (grad**2).sum()


def ife_loss(per_env: list[tuple], beta: float, lambda_inv: float) -> LossReport:
    """Invariant feature encoding: mean per-environment VIB loss plus an
    environment-invariance penalty.

    Each entry of ``per_env`` is (scores, y, mu, logvar) for one environment.
    The penalty is the summed squared gradient of each environment's
    cross-entropy with respect to a shared dummy classifier scale, which is
    zero exactly when one scaling is simultaneously stationary for every
    environment.
    """
    if len(per_env) < 2:
        raise ValueError("invariance penalty needs at least 2 environments")
    if beta < 0 or lambda_inv < 0:
        raise ValueError("beta and lambda_inv must be non-negative")
    ces, rates, pens = [], [], []
    for scores, y, mu, logvar in per_env:
        ces.append(F.cross_entropy(scores, y))
        rates.append(kl_gauss_to_std(mu, logvar).mean())
        pens.append(_dummy_classifier_penalty(scores, y))
    ce = torch.stack(ces).mean()
    rate = torch.stack(rates).mean()
    penalty = torch.stack(pens).sum()
    total = ce + beta * rate + lambda_inv * penalty
    return LossReport(
        total=total,
        components={"task_ce": float(ce.detach()), "rate": float(rate.detach()),
                    "invariance": float(penalty.detach())},
        weights={"task_ce": 1.0, "rate": beta, "invariance": lambda_inv},
    )


def rib_loss(scores: torch.Tensor, y: torch.Tensor,
             constellation: Constellation | None, spec: ChannelSpec,
             beta: float, mc_samples: int = 4000,
             rng: torch.Generator | None = None) -> LossReport:
    """Task cross-entropy plus beta times the transmitted-received symbol MI.

    The MI term evaluates the discrete channel MI at the batch's empirical
    symbol occupation frequencies (carried by ``constellation.probs``, which
    may be a differentiable tensor).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if constellation is None:
        raise ModeError("rib_loss requires a digital constellation; analog "
                        "transmission has no symbol distribution")
    ce = F.cross_entropy(scores, y)
    if beta > 0:
        mi, _ = discrete_mi_tensor(constellation, spec.sigma, mc_samples, rng)
    else:
        with torch.no_grad():
            mi, _ = discrete_mi_tensor(constellation, spec.sigma, mc_samples, rng)
    total = ce + beta * mi
    return LossReport(
        total=total,
        components={"task_ce": float(ce.detach()), "channel_mi": float(mi.detach())},
        weights={"task_ce": 1.0, "channel_mi": beta},
    )


def dib_loss(device_outputs: list[tuple], fused_scores: torch.Tensor,
             y: torch.Tensor, beta: float) -> LossReport:
    """Two-device distributed bottleneck: joint task loss plus per-device rates.

    ``device_outputs`` holds each device's (mu, logvar); fusion (by
    concatenation of received codes) happens upstream, this objective only
    scores the result.
    """
    if len(device_outputs) != 2:
        raise ValueError(f"expected exactly 2 devices, got {len(device_outputs)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    ce = F.cross_entropy(fused_scores, y)
    rate = sum(kl_gauss_to_std(mu, logvar).mean() for mu, logvar in device_outputs)
    total = ce + beta * rate
    return LossReport(
        total=total,
        components={"task_ce": float(ce.detach()), "rate": float(rate.detach())},
        weights={"task_ce": 1.0, "rate": beta},
    )


def infonce_loss(z1: torch.Tensor, z2: torch.Tensor, tau: float) -> LossReport:
    """Cosine-similarity InfoNCE over in-batch negatives.

    Row i's positive is z2_i; all other rows of z2 are negatives.  Invariant
    to a common positive rescaling of the codes.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z1.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 for negatives")
    a = F.normalize(z1, dim=1)
    b = F.normalize(z2, dim=1)
    logits = (a @ b.T) / tau
    labels = torch.arange(z1.shape[0])
    loss = F.cross_entropy(logits, labels)
    return LossReport(
        total=loss,
        components={"infonce": float(loss.detach())},
        weights={"infonce": 1.0},
    )


@dataclass
class PruneResult:
    """Which latent dimensions survive rate-based pruning."""

    keep: np.ndarray  # bool, True = transmitted
    rates: np.ndarray  # mean per-dimension rate in nats

    @property
    def pruned_count(self) -> int:
        return int((~self.keep).sum())

    def apply(self, z: torch.Tensor) -> torch.Tensor:
        """Zero out pruned dimensions of a code batch."""
        mask = torch.as_tensor(self.keep, dtype=z.dtype)
        return z * mask


def prune_latents(enc, calibration_x: torch.Tensor, threshold: float) -> PruneResult:
    """Drop latent dimensions whose average rate falls below the threshold.

    The per-dimension rate is 0.5*(mu_j^2 + sigma_j^2 - 1 - log sigma_j^2)
    averaged over the calibration inputs; dimensions a trained bottleneck has
    collapsed to the prior carry (near) zero rate and are transmitted as 0.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    with torch.no_grad():
        mu, logvar = enc(calibration_x)
        per_dim = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar)
        rates = per_dim.mean(dim=0).numpy()
    return PruneResult(keep=rates >= threshold, rates=rates)
