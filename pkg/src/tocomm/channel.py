"""Simulated noisy channels, differentiable and reproducible per rng stream."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "ChannelSpec",
    "snr_to_sigma",
    "psnr_to_sigma",
    "normalize_power",
    "transmit",
]

CHANNEL_KINDS = ("awgn", "rayleigh")


@dataclass(frozen=True)
class ChannelSpec:
    """Channel family plus exactly one of an SNR or PSNR parameterization."""

    kind: str = "awgn"
    snr_db: float | None = None
    psnr_db: float | None = None
    peak: float = 1.0
    equalize: bool = True  # rayleigh only: perfect-CSI equalization

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unsupported channel kind {self.kind!r}")
        if (self.snr_db is None) == (self.psnr_db is None):
            raise ValueError("exactly one of snr_db / psnr_db must be set")
        if self.peak <= 0:
            raise ValueError("peak must be positive")

    @property
    def sigma(self) -> float:
        """Noise standard deviation implied by the dB parameterization."""
        if self.snr_db is not None:
            return snr_to_sigma(self.snr_db)
        return psnr_to_sigma(self.psnr_db, self.peak)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "peak": self.peak, "equalize": self.equalize}
        if self.snr_db is not None:
            d["snr_db"] = self.snr_db
        else:
            d["psnr_db"] = self.psnr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        return cls(
            kind=d.get("kind", "awgn"),
            snr_db=d.get("snr_db"),
            psnr_db=d.get("psnr_db"),
            peak=d.get("peak", 1.0),
            equalize=d.get("equalize", True),
        )


def snr_to_sigma(snr_db: float) -> float:
    """Noise std for unit signal power: sigma^2 = 10^(-snr_db/10)."""
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def psnr_to_sigma(psnr_db: float, peak: float = 1.0) -> float:
    """Noise std referenced to peak amplitude: sigma^2 = peak^2 * 10^(-psnr_db/10)."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    return peak * math.sqrt(10.0 ** (-psnr_db / 10.0))


def normalize_power(z: torch.Tensor) -> torch.Tensor:
    """Scale a batch so the mean squared entry is 1.

    One scalar factor is applied to the whole batch, preserving the relative
    geometry (angles, ratios) between codes.
    """
    power = (z**2).mean()
    if float(power.detach()) <= 0.0:
        raise ValueError("cannot power-normalize an all-zero batch")
    return z / torch.sqrt(power)


def transmit(
    z: torch.Tensor, spec: ChannelSpec, rng: torch.Generator | None = None
) -> torch.Tensor:
    """Send codes through the channel: returns the received codes.

    AWGN adds i.i.d. Gaussian noise; Rayleigh applies a per-example scalar
    fade (unit mean-square) before the noise and, when ``spec.equalize``,
    divides the output by the known fade.  Noise is drawn from ``rng``
    independently of ``z``, so the map is differentiable in ``z``.
    """
    sigma = spec.sigma
    noise = torch.randn(z.shape, generator=rng, dtype=z.dtype) * sigma
    if spec.kind == "awgn":
        return z + noise
    if spec.kind == "rayleigh":
        # |h| ~ Rayleigh(scale 1/sqrt(2)) so E[h^2] = 1
        gshape = (z.shape[0],) + (1,) * (z.dim() - 1)
        g1 = torch.randn(gshape, generator=rng, dtype=z.dtype)
        g2 = torch.randn(gshape, generator=rng, dtype=z.dtype)
        h = torch.sqrt((g1**2 + g2**2) / 2.0)
        zhat = h * z + noise
        if spec.equalize:
            zhat = zhat / h.clamp_min(1e-12)
        return zhat
    raise ValueError(f"unsupported channel kind {spec.kind!r}")
