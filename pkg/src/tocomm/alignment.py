"""Training-free cross-transceiver alignment: relative (angle) codes on the
transmitter side, linear map estimation from shared anchors on the receiver
side, and the cross-accuracy matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import channel as ch

__all__ = [
    "AlignmentMap",
    "CrossMatrix",
    "RankDeficiencyError",
    "StepSizeError",
    "relative_encode",
    "fit_ls",
    "fit_mmse",
    "fit_learned",
    "apply_map",
    "cross_matrix",
]


class RankDeficiencyError(np.linalg.LinAlgError):
    """Unregularized normal equations are singular."""


class StepSizeError(RuntimeError):
    """Gradient fitting diverged (residual grew past 10x its start)."""


@dataclass
class AlignmentMap:
    """Linear map (plus optional bias) between two latent spaces."""

    W: np.ndarray
    bias: np.ndarray | None
    method: str  # "ls" | "mmse" | "learned"
    fit_residual: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.W)):
            raise ValueError("map contains non-finite entries")
        if self.fit_residual < 0:
            raise ValueError("fit_residual must be non-negative")

    @classmethod
    def identity(cls, dim: int) -> "AlignmentMap":
        return cls(W=np.eye(dim), bias=None, method="ls", fit_residual=0.0)


def relative_encode(z: torch.Tensor, anchor_feats: torch.Tensor) -> torch.Tensor:
    """Cosine similarities of each code against the k anchor features.

    Output entry j is <z, a_j> / (|z| |a_j|); invariant to any simultaneous
    rotation and positive rescaling of codes and anchors.  Differentiable,
    so a transmitter can be trained end-to-end on its relative codes.
    """
    if anchor_feats.shape[0] < 2:
        raise ValueError("need at least 2 anchors")
    z_norm = torch.linalg.norm(z, dim=-1, keepdim=True)
    a_norm = torch.linalg.norm(anchor_feats, dim=-1)
    if float(z_norm.min()) < 1e-12 or float(a_norm.min()) < 1e-12:
        raise ValueError("zero-norm code or anchor makes the angle degenerate")
    return (z @ anchor_feats.T) / (z_norm * a_norm.unsqueeze(0))


def _as_numpy(a) -> np.ndarray:
    if torch.is_tensor(a):
        return a.detach().cpu().numpy().astype(np.float64)
    return np.asarray(a, dtype=np.float64)


def _augment(a: np.ndarray, bias: bool) -> np.ndarray:
    if not bias:
        return a
    return np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)


def _solve_regularized(A: np.ndarray, T: np.ndarray, reg: float, method: str,
                       bias: bool) -> AlignmentMap:
    m = A.shape[0]
    gram = A.T @ A + reg * m * np.eye(A.shape[1])
    if reg == 0.0:
        rank = np.linalg.matrix_rank(gram)
        if rank < gram.shape[0]:
            raise RankDeficiencyError(
                f"normal matrix rank {rank} < {gram.shape[0]}; "
                "add ridge or more anchors"
            )
    Wfull = np.linalg.solve(gram, A.T @ T)
    if bias:
        W, b = Wfull[:-1], Wfull[-1]
    else:
        W, b = Wfull, None
    resid = float(np.linalg.norm(A @ Wfull - T))
    return AlignmentMap(W=W, bias=b, method=method, fit_residual=resid)


def fit_ls(A_src, A_tgt, ridge: float = 0.0, bias: bool = True) -> AlignmentMap:
    """Ridge-regularized least squares from source to target anchor features.

    Minimizes ||A_src W - A_tgt||_F^2 + ridge * m * ||W||_F^2 (the source is
    column-augmented with ones when ``bias`` is enabled).
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    A = _augment(_as_numpy(A_src), bias)
    T = _as_numpy(A_tgt)
    if A.shape[0] < 2:
        raise ValueError("need at least 2 anchor rows")
    return _solve_regularized(A, T, ridge, "ls", bias)


def fit_mmse(A_src_noisy, A_tgt, noise_var: float, bias: bool = True) -> AlignmentMap:
    """Least squares with regularization pinned to the known channel noise.

    Identical to ``fit_ls`` except the ridge coefficient is sigma^2 of the
    channel noise on the anchor observations, the MMSE shrinkage for noisy
    inputs; reduces to plain LS at noise_var = 0.
    """
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    A = _augment(_as_numpy(A_src_noisy), bias)
    T = _as_numpy(A_tgt)
    if A.shape[0] < 2:
        raise ValueError("need at least 2 anchor rows")
    return _solve_regularized(A, T, noise_var, "mmse", bias)


def fit_learned(A_src, A_tgt, steps: int, lr: float | None = None,
                seed: int = 0, bias: bool = True) -> AlignmentMap:
    """Gradient descent on the Frobenius objective from zero initialization.

    The step size defaults to 1 / lambda_max of the data Gram matrix (safe
    for descent); divergence past 10x the starting residual raises.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    A = _augment(_as_numpy(A_src), bias)
    T = _as_numpy(A_tgt)
    m = A.shape[0]
    gram = A.T @ A / m
    if lr is None:
        lam_max = float(np.linalg.eigvalsh(gram)[-1])
        lr = 1.0 / max(lam_max, 1e-12)
    W = np.zeros((A.shape[1], T.shape[1]))
    start = float(np.linalg.norm(A @ W - T))
    for _ in range(steps):
        grad = (A.T @ (A @ W - T)) / m
        W = W - lr * grad
        resid = float(np.linalg.norm(A @ W - T))
        if resid > 10.0 * max(start, 1e-12):
            raise StepSizeError(f"residual {resid:.3g} exceeds 10x start {start:.3g}")
    if bias:
        Wout, b = W[:-1], W[-1]
    else:
        Wout, b = W, None
    return AlignmentMap(W=Wout, bias=b, method="learned", fit_residual=resid)


def apply_map(zhat, amap: AlignmentMap):
    """Apply the linear map; returns the same array type as the input."""
    if torch.is_tensor(zhat):
        W = torch.as_tensor(amap.W, dtype=zhat.dtype)
        if zhat.shape[-1] != W.shape[0]:
            raise ValueError(f"code dim {zhat.shape[-1]} != map input {W.shape[0]}")
        out = zhat @ W
        if amap.bias is not None:
            out = out + torch.as_tensor(amap.bias, dtype=zhat.dtype)
        return out
    z = np.asarray(zhat)
    if z.shape[-1] != amap.W.shape[0]:
        raise ValueError(f"code dim {z.shape[-1]} != map input {amap.W.shape[0]}")
    out = z @ amap.W
    if amap.bias is not None:
        out = out + amap.bias
    return out


@dataclass
class CrossMatrix:
    """Accuracy of transmitter i decoded by receiver j, for every (i, j)."""

    accuracies: np.ndarray
    names: list[str]
    mode: str
    incompatible: np.ndarray  # bool mask: dimension-mismatched "none" entries

    @property
    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.accuracies)))

    @property
    def offdiag_mean(self) -> float:
        mask = ~np.eye(len(self.names), dtype=bool)
        return float(self.accuracies[mask].mean())

    def aligned_gap(self) -> float:
        """Worst shortfall of any entry against its column diagonal."""
        diag = np.diag(self.accuracies)
        return float(np.max(diag[None, :] - self.accuracies))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([""] + self.names)
            for i, name in enumerate(self.names):
                writer.writerow([name] + [f"{v:.4f}" for v in self.accuracies[i]])


MODES = ("none", "receiver-ls", "receiver-mmse", "receiver-learned", "relative")


def _received_anchor_features(pair, anchor_x: np.ndarray, spec, rng,
                              noisy_reps: int, stack: bool) -> torch.Tensor:
    """Anchors through the source encoder and the channel, as the receiver sees them.

    ``stack`` keeps every noisy transmission as its own row (the fit then
    self-regularizes at the channel noise level); otherwise transmissions are
    averaged per anchor.
    """
    with torch.no_grad():
        codes = pair.transmit_codes(torch.tensor(anchor_x), stochastic=False,
                                    rng=rng, hard=True)
        reps = [ch.transmit(codes, spec, rng) for _ in range(noisy_reps)]
    if stack:
        return torch.cat(reps, dim=0)
    return torch.stack(reps).mean(dim=0)


def cross_matrix(pairs, testset, spec, mode: str, anchors, rng=None,
                 noisy_reps: int = 16, ridge: float = 0.0,
                 learned_steps: int = 500, eval_reps: int = 1) -> CrossMatrix:
    """Evaluate every transmitter against every receiver under one alignment mode.

    Diagonal entries always use the pair's own receiver with no alignment.
    In "none" mode a dimension mismatch is recorded as a zero-accuracy entry
    with the incompatibility flag rather than an exception.
    """
    if mode not in MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    if mode == "relative":
        bad = [p.name for p in pairs if p.mode != "relative"]
        if bad:
            raise ValueError(
                f"relative alignment needs relative-mode pairs; got {bad}"
            )
    elif any(p.mode == "relative" for p in pairs):
        raise ValueError("relative-mode pairs require mode='relative'")
    if rng is None:
        rng = torch.Generator().manual_seed(0)

    n = len(pairs)
    x, y = testset.x_array(), testset.y_array()
    anchor_x = anchors.x_array()
    acc = np.zeros((n, n))
    incompatible = np.zeros((n, n), dtype=bool)

    native_anchor_feats = []
    if mode in ("receiver-ls", "receiver-mmse", "receiver-learned"):
        for p in pairs:
            with torch.no_grad():
                codes = p.transmit_codes(torch.tensor(anchor_x), stochastic=False,
                                         rng=rng, hard=True)
            native_anchor_feats.append(codes)

    for i, tx in enumerate(pairs):
        received = None
        if mode in ("receiver-ls", "receiver-mmse", "receiver-learned"):
            stack = mode != "receiver-mmse"
            received = _received_anchor_features(
                tx, anchor_x, spec, rng, noisy_reps, stack=stack
            )
        for j, rxp in enumerate(pairs):
            eval_rng = torch.Generator().manual_seed(
                int(torch.randint(0, 2**31 - 1, (1,), generator=rng))
            )
            if i == j:
                acc[i, j] = tx.accuracy(x, y, spec, eval_rng, reps=eval_reps)
                continue
            amap = None
            if mode == "none" or mode == "relative":
                if tx.transmit_codes(torch.tensor(anchor_x[:2]), False, None,
                                     hard=True).shape[-1] != rxp.decoder.input_dim:
                    acc[i, j] = 0.0
                    incompatible[i, j] = True
                    continue
            else:
                target = native_anchor_feats[j]
                if mode == "receiver-ls":
                    src = received
                    tgt = target.repeat(noisy_reps, 1)
                    amap = fit_ls(src, tgt, ridge=ridge)
                elif mode == "receiver-mmse":
                    amap = fit_mmse(received, target, noise_var=spec.sigma**2)
                else:
                    src = received
                    tgt = target.repeat(noisy_reps, 1)
                    amap = fit_learned(src, tgt, steps=learned_steps)
            try:
                acc[i, j] = tx.accuracy(x, y, spec, eval_rng, decoder=rxp.decoder,
                                        amap=amap, reps=eval_reps)
            except ValueError:
                acc[i, j] = 0.0
                incompatible[i, j] = True

    return CrossMatrix(accuracies=acc, names=[p.name for p in pairs],
                       mode=mode, incompatible=incompatible)
