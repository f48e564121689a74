"""Rate-score out-of-distribution detection with threshold calibration and
standard detection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .mi import kl_gauss_to_std
from .objectives import ModeError

__all__ = [
    "OodReport",
    "ood_score",
    "calibrate_threshold",
    "ood_metrics",
    "auroc",
]


@dataclass(frozen=True)
class OodReport:
    auroc: float
    fpr_at_95tpr: float
    threshold: float
    score_summary: dict[str, dict[str, float]]

    def __post_init__(self):
        if not 0.0 <= self.auroc <= 1.0:
            raise ValueError("auroc outside [0, 1]")
        if not 0.0 <= self.fpr_at_95tpr <= 1.0:
            raise ValueError("fpr outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "fpr_at_95tpr": self.fpr_at_95tpr,
            "threshold": self.threshold,
            "score_summary": self.score_summary,
        }


def ood_score(x, enc, batch: int = 4096) -> np.ndarray:
    """Per-sample anomaly score: the encoder's rate (KL to the prior) in nats.

    Computed from mu/logvar directly, so identical inputs always score
    identically.  Higher means more anomalous: inputs far from the training
    distribution push the posterior away from the prior the bottleneck
    pinned it to.  Requires a stochastic (mu/logvar) encoder.
    """
    if getattr(enc, "deterministic", False):
        raise ModeError("deterministic encoder has no rate to score")
    xt = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if xt.dim() == len(enc.input_shape):
        xt = xt.unsqueeze(0)
    scores = []
    with torch.no_grad():
        for s in range(0, len(xt), batch):
            mu, logvar = enc(xt[s:s + batch])
            scores.append(kl_gauss_to_std(mu, logvar).numpy())
    return np.concatenate(scores)


def calibrate_threshold(id_scores, tpr: float = 0.95) -> float:
    """Score threshold accepting exactly ceil(tpr * n) of the calibration set.

    Samples at or below the threshold are accepted (treated as in
    distribution); above it they are rejected.
    """
    if not 0.0 < tpr < 1.0:
        raise ValueError("tpr must lie strictly inside (0, 1)")
    scores = np.sort(np.asarray(id_scores, dtype=np.float64))
    n = len(scores)
    if n < 20:
        raise ValueError(f"need at least 20 calibration scores, got {n}")
    k = math.ceil(tpr * n)
    return float(scores[k - 1])


def auroc(id_scores, ood_scores) -> float:
    """Probability a random OoD score exceeds a random ID score (ties count 1/2)."""
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both score sets must be non-empty")
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined), dtype=np.float64)
    ranks[order] = np.arange(1, len(combined) + 1)
    # average ranks over ties
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_ood = ranks[len(a):].sum()
    u = rank_sum_ood - len(b) * (len(b) + 1) / 2.0
    return float(u / (len(a) * len(b)))


def _quantiles(scores: np.ndarray) -> dict[str, float]:
    qs = np.quantile(scores, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "q05": float(qs[0]), "q25": float(qs[1]), "median": float(qs[2]),
        "q75": float(qs[3]), "q95": float(qs[4]), "mean": float(scores.mean()),
    }


def ood_metrics(id_scores, ood_scores, tpr: float = 0.95) -> OodReport:
    """AUROC (rank statistic) and FPR at the calibrated TPR threshold."""
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both score sets must be non-empty")
    threshold = calibrate_threshold(a, tpr) if len(a) >= 20 else float(np.max(a))
    fpr = float((b <= threshold).mean())
    return OodReport(
        auroc=auroc(a, b),
        fpr_at_95tpr=fpr,
        threshold=threshold,
        score_summary={"id": _quantiles(a), "ood": _quantiles(b)},
    )
