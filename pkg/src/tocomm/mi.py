"""Mutual-information oracles, neural estimators, and channel-MI evaluation.

All values are in nats; natural log throughout.  Bits are available only as
a display conversion on the estimate object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .channel import ChannelSpec

__all__ = [
    "MIEstimate",
    "CriticSpec",
    "GaussianConditional",
    "Constellation",
    "EstimationError",
    "gaussian_mi_analytic",
    "kl_gauss_to_std",
    "mine_estimate",
    "club_estimate",
    "discrete_channel_mi",
]

LN2 = math.log(2.0)


class EstimationError(RuntimeError):
    """Estimator training diverged; carries the failing step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class MIEstimate:
    """An MI value in nats, tagged with how it was obtained."""

    nats: float
    kind: str  # "exact" | "lower" | "upper" | "surrogate"
    stderr: float | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "lower", "upper", "surrogate"):
            raise ValueError(f"unknown estimate kind {self.kind!r}")
        if self.kind == "exact" and self.nats < -1e-9:
            raise ValueError("exact MI cannot be negative")
        if self.stderr is not None and self.stderr < 0:
            raise ValueError("stderr must be non-negative")

    @property
    def bits(self) -> float:
        return self.nats / LN2


def gaussian_mi_analytic(rho) -> MIEstimate:
    """Closed-form MI of per-dimension correlated Gaussian pairs.

    For correlations rho_i the MI is sum_i -0.5*ln(1 - rho_i^2).
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("all correlations must satisfy |rho| < 1")
    nats = float(np.sum(-0.5 * np.log1p(-(rho**2))))
    return MIEstimate(nats=nats, kind="exact")


def kl_gauss_to_std(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-example KL( N(mu, diag exp(logvar)) || N(0, I) ) in nats.

    Sums over the trailing dimension; always non-negative, zero exactly when
    mu = 0 and logvar = 0.
    """
    return 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)


@dataclass(frozen=True)
class CriticSpec:
    """Architecture of the scalar-valued critic used by the neural estimators."""

    width: int = 64
    depth: int = 2

    def build(self, input_dim: int) -> nn.Module:
        layers, d = [], input_dim
        for _ in range(self.depth):
            layers += [nn.Linear(d, self.width), nn.ReLU()]
            d = self.width
        layers.append(nn.Linear(d, 1))
        return nn.Sequential(*layers)


def _as_2d_tensor(a) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a), dtype=torch.float32)
    if t.dim() == 1:
        t = t.unsqueeze(1)
    return t


def mine_estimate(
    u,
    v,
    critic: CriticSpec | nn.Module | None = None,
    steps: int = 1500,
    batch_size: int = 512,
    lr: float = 1e-3,
    seed: int = 0,
    ema_decay: float = 0.99,
) -> MIEstimate:
    """Donsker-Varadhan lower bound with a trained neural critic.

    The critic maximizes E_joint[T] - log E_marg[exp T], with marginal pairs
    formed by in-batch shuffling and an exponential-moving-average correction
    on the log-partition gradient.  The returned value is the bound evaluated
    on the full sample with the trained critic.  ``critic`` may be a spec to
    build from or an already-constructed module.
    """
    U, V = _as_2d_tensor(u), _as_2d_tensor(v)
    n = U.shape[0]
    if n < 2 or V.shape[0] != n:
        raise ValueError("need at least 2 paired samples")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    critic = critic if critic is not None else CriticSpec()

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = critic if isinstance(critic, nn.Module) else critic.build(U.shape[1] + V.shape[1])
        g = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        ema = None
        bs = min(batch_size, n)
        for step in range(steps):
            idx = torch.randint(0, n, (bs,), generator=g)
            perm = torch.randperm(bs, generator=g)
            t_joint = net(torch.cat([U[idx], V[idx]], dim=1))
            t_marg = net(torch.cat([U[idx], V[idx][perm]], dim=1))
            et = torch.exp(t_marg).mean()
            et_val = float(et.detach())
            ema = et_val if ema is None else ema_decay * ema + (1 - ema_decay) * et_val
            loss = -(t_joint.mean() - et / ema)
            if not torch.isfinite(loss):
                raise EstimationError(f"critic loss non-finite at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()

        with torch.no_grad():
            perm = torch.randperm(n, generator=g)
            t_joint = net(torch.cat([U, V], dim=1)).squeeze(1)
            t_marg = net(torch.cat([U, V[perm]], dim=1)).squeeze(1)
            nats = float(t_joint.mean() - (torch.logsumexp(t_marg, 0) - math.log(n)))
            # batch-means stderr of the joint term (the partition term is shared)
            nb = max(2, n // 2048)
            chunks = t_joint.chunk(nb)
            means = torch.tensor([c.mean() for c in chunks])
            stderr = float(means.std() / math.sqrt(len(chunks)))
    return MIEstimate(nats=nats, kind="lower", stderr=stderr)


class GaussianConditional(nn.Module):
    """Diagonal-Gaussian conditional density q(v|u) with MLP mean/logvar heads."""

    def __init__(self, u_dim: int, v_dim: int, width: int = 64):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(u_dim, width), nn.ReLU())
        self.mean = nn.Linear(width, v_dim)
        self.logvar = nn.Linear(width, v_dim)

    def log_prob(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        h = self.body(u)
        mean, logvar = self.mean(h), self.logvar(h).clamp(-10.0, 10.0)
        return (
            -0.5 * (math.log(2 * math.pi) + logvar + (v - mean) ** 2 / torch.exp(logvar))
        ).sum(dim=-1)

    def log_prob_pairs(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Matrix of log q(v_j | u_i), shape (len(u), len(v))."""
        h = self.body(u)
        mean, logvar = self.mean(h), self.logvar(h).clamp(-10.0, 10.0)
        diff = v.unsqueeze(0) - mean.unsqueeze(1)  # (i, j, d)
        return (
            -0.5 * (math.log(2 * math.pi) + logvar.unsqueeze(1) + diff**2 / torch.exp(logvar).unsqueeze(1))
        ).sum(dim=-1)


def club_estimate(
    u,
    v,
    cond_model: GaussianConditional | None = None,
    steps: int = 1000,
    batch_size: int = 512,
    lr: float = 1e-3,
    seed: int = 0,
    contrast: str = "loo",
    block: int = 128,
) -> MIEstimate:
    """Contrastive log-ratio upper bound with a max-likelihood conditional.

    Phase one fits q(v|u) by maximum likelihood; phase two evaluates the
    contrastive bound E_joint[log q] minus a marginal contrast term.  With
    ``contrast="loo"`` the contrast is the blockwise leave-one-out marginal
    log-density log mean_i q(v_j|u_i), a tight upper bound in expectation;
    ``contrast="shuffle"`` uses the plain permuted-pair expectation
    E_marg[log q], which is a much looser upper bound on correlated data.
    """
    U, V = _as_2d_tensor(u), _as_2d_tensor(v)
    n = U.shape[0]
    if n < 2 or V.shape[0] != n:
        raise ValueError("need at least 2 paired samples")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if contrast not in ("loo", "shuffle"):
        raise ValueError(f"unknown contrast {contrast!r}")

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        q = cond_model or GaussianConditional(U.shape[1], V.shape[1])
        g = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(q.parameters(), lr=lr)
        bs = min(batch_size, n)
        for step in range(steps):
            idx = torch.randint(0, n, (bs,), generator=g)
            loss = -q.log_prob(U[idx], V[idx]).mean()
            if not torch.isfinite(loss):
                raise EstimationError(f"conditional fit non-finite at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()

        with torch.no_grad():
            if contrast == "shuffle":
                joint = q.log_prob(U, V)
                perm = torch.randperm(n, generator=g)
                vals = joint - q.log_prob(U[perm], V)
            else:
                parts = []
                nblocks = n // block
                for bi in range(nblocks):
                    sl = slice(bi * block, (bi + 1) * block)
                    lq = q.log_prob_pairs(U[sl], V[sl])
                    joint = lq.diagonal()
                    lq = lq.clone()
                    lq.fill_diagonal_(float("-inf"))
                    marg = torch.logsumexp(lq, dim=0) - math.log(block - 1)
                    parts.append(joint - marg)
                vals = torch.cat(parts)
            nats = float(vals.mean())
            stderr = float(vals.std() / math.sqrt(len(vals)))
    return MIEstimate(nats=nats, kind="upper", stderr=stderr)


@dataclass(frozen=True)
class Constellation:
    """Discrete symbol set with occupation probabilities.

    ``symbols`` has shape (K,) or (K, m) for m-dimensional symbols; ``probs``
    sums to 1.  Probabilities may be a torch tensor carrying gradients (used
    when the symbol distribution is an empirical, trainable quantity).
    """

    symbols: object
    probs: object

    def as_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        s = torch.as_tensor(np.asarray(self.symbols) if not torch.is_tensor(self.symbols) else self.symbols, dtype=torch.float32)
        if s.dim() == 1:
            s = s.unsqueeze(1)
        if torch.is_tensor(self.probs):
            p = self.probs
        else:
            p = torch.as_tensor(np.asarray(self.probs), dtype=torch.float32)
        return s, p

    @property
    def entropy_nats(self) -> float:
        _, p = self.as_tensors()
        p = p.detach().double()
        mask = p > 0
        return float(-(p[mask] * torch.log(p[mask])).sum())


def bpsk() -> Constellation:
    return Constellation(symbols=np.array([-1.0, 1.0]), probs=np.array([0.5, 0.5]))


def qpsk() -> Constellation:
    s = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64) / math.sqrt(2)
    return Constellation(symbols=s, probs=np.full(4, 0.25))


def qam16() -> Constellation:
    pts = np.array([-3.0, -1.0, 1.0, 3.0])
    grid = np.array([[a, b] for a in pts for b in pts]) / math.sqrt(10.0)
    return Constellation(symbols=grid, probs=np.full(16, 1 / 16))


def discrete_mi_tensor(
    constellation: Constellation,
    sigma: float,
    mc_samples: int,
    rng: torch.Generator | None = None,
    batches: int = 10,
) -> tuple[torch.Tensor, float]:
    """Monte-Carlo I(Z; Zhat) over an AWGN transition, differentiable in probs.

    Stratified over symbols: for each symbol k with p_k > 0 we draw noise
    realizations and average ln p(zhat|z_k) - ln sum_j p_j p(zhat|z_j); the
    outer expectation over symbols is taken exactly with weights p_k.
    Returns the estimate tensor plus a batch-means standard error.
    """
    symbols, probs = constellation.as_tensors()
    k = symbols.shape[0]
    if k == 0:
        raise ValueError("empty constellation")
    total = float(probs.detach().sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total}, expected 1")
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    active = probs.detach() > 0
    if int(active.sum()) == 0:
        raise ValueError("constellation has no positive-probability symbol")
    if sigma == 0.0:
        # noiseless limit: the received symbol identifies z exactly
        p = probs[active]
        nats = -(p * torch.log(p.clamp_min(1e-30))).sum()
        return nats, 0.0

    per = mc_samples // max(1, int(active.sum()))
    per = max(batches, (per // batches) * batches)
    act_idx = torch.nonzero(active).squeeze(1)
    batch_vals = []
    est_terms = []
    for ki in act_idx.tolist():
        zk = symbols[ki]
        noise = torch.randn((per, symbols.shape[1]), generator=rng) * sigma
        zhat = zk.unsqueeze(0) + noise  # (per, m)
        # log N(zhat; z_j, sigma^2 I) for all j: (per, K)
        d2 = ((zhat.unsqueeze(1) - symbols.unsqueeze(0)) ** 2).sum(dim=2)
        log_cond = -d2 / (2 * sigma**2)  # common normalizer cancels below
        log_mix = torch.logsumexp(
            log_cond + torch.log(probs.clamp_min(1e-30)).unsqueeze(0), dim=1
        )
        term = log_cond[:, ki] - log_mix  # (per,)
        est_terms.append(probs[ki] * term.mean())
        batch_vals.append(term.detach().reshape(batches, -1).mean(dim=1)
                          * float(probs.detach()[ki]))
    estimate = torch.stack(est_terms).sum()
    per_batch = torch.stack(batch_vals).sum(dim=0)  # (batches,)
    stderr = float(per_batch.std() / math.sqrt(batches))
    return estimate, stderr


def discrete_channel_mi(
    constellation: Constellation,
    spec: ChannelSpec,
    mc_samples: int = 20000,
    rng: torch.Generator | None = None,
) -> MIEstimate:
    """MI between transmitted and received symbols under the AWGN transition."""
    if spec.kind != "awgn":
        raise ValueError("discrete MI uses a Gaussian transition density (awgn only)")
    est, stderr = discrete_mi_tensor(constellation, spec.sigma, mc_samples, rng)
    return MIEstimate(nats=max(0.0, float(est)), kind="exact", stderr=stderr)
