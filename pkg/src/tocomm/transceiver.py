"""Encoder/decoder families, stochastic encoding, discrete modulation, and
SNR-conditioned hypernetwork adaptation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import channel as ch
from .alignment import relative_encode
from .mi import Constellation

__all__ = [
    "Encoder",
    "Decoder",
    "Modulator",
    "HyperAdapter",
    "AdaptedEncoder",
    "TransceiverPair",
    "build_pair",
    "encode",
    "decode",
    "modulate",
    "hyper_adapt",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

LOGVAR_CLAMP = 10.0  # logvar limited to [-10, 10] to avoid degenerate variances

ARCHITECTURES = ("conv-small", "mlp-small")


class Encoder(nn.Module):
    """Backbone feature extractor with affine mu / logvar heads.

    ``conv-small`` is two conv+pool stages and a linear layer; ``mlp-small``
    is a two-hidden-layer MLP.  ``forward`` optionally applies per-block
    feature-wise scale/shift pairs (used by hypernetwork adaptation).
    """

    def __init__(self, arch: str, input_shape: tuple[int, ...], latent_dim: int,
                 width: int = 64):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        self.width = width
        c = input_shape[0] if len(input_shape) == 3 else 1
        flat = int(np.prod(input_shape))
        if arch == "conv-small":
            if len(input_shape) != 3:
                raise ValueError("conv-small expects (channels, h, w) inputs")
            h, w = input_shape[1], input_shape[2]
            self.blocks = nn.ModuleList([
                nn.Sequential(nn.Conv2d(c, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)),
                nn.Sequential(nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)),
                nn.Sequential(nn.Flatten(), nn.Linear(32 * (h // 4) * (w // 4), width), nn.ReLU()),
            ])
        else:
            self.blocks = nn.ModuleList([
                nn.Sequential(nn.Flatten(), nn.Linear(flat, 2 * width), nn.ReLU()),
                nn.Sequential(nn.Linear(2 * width, width), nn.ReLU()),
            ])
        self.mu_head = nn.Linear(width, latent_dim)
        self.logvar_head = nn.Linear(width, latent_dim)

    @property
    def film_shapes(self) -> list[int]:
        """Feature width modulated after each backbone block."""
        shapes = []
        for blk in self.blocks:
            last_linear = [m for m in blk.modules() if isinstance(m, (nn.Linear, nn.Conv2d))][-1]
            shapes.append(last_linear.out_features if isinstance(last_linear, nn.Linear)
                          else last_linear.out_channels)
        return shapes

    def features(self, x: torch.Tensor, film=None) -> torch.Tensor:
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} != {self.input_shape}")
        h = x
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if film is not None:
                scale, shift = film[i]
                if h.dim() == 4:  # conv maps: modulate per channel
                    scale = scale.view(1, -1, 1, 1)
                    shift = shift.view(1, -1, 1, 1)
                h = scale * h + shift
        return h

    def forward(self, x: torch.Tensor, film=None) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x, film=film)
        mu = self.mu_head(h)
        logvar = self.logvar_head(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar


class Decoder(nn.Module):
    """Classifier from a received code to class scores."""

    def __init__(self, input_dim: int, class_count: int, width: int = 64):
        super().__init__()
        self.input_dim = input_dim
        self.class_count = class_count
        self.net = nn.Sequential(
            nn.Linear(input_dim, width), nn.ReLU(), nn.Linear(width, class_count)
        )

    def forward(self, zhat: torch.Tensor) -> torch.Tensor:
        if zhat.shape[-1] != self.input_dim:
            raise ValueError(f"code dim {zhat.shape[-1]} != decoder input {self.input_dim}")
        return self.net(zhat)


class Modulator(nn.Module):
    """Maps backbone features to per-position symbol scores over a constellation."""

    def __init__(self, feature_dim: int, positions: int, symbols: np.ndarray,
                 temperature: float = 1.0):
        super().__init__()
        symbols = np.atleast_2d(np.asarray(symbols, dtype=np.float32))
        if symbols.shape[0] == 1 and symbols.shape[1] > 1:
            symbols = symbols.T
        if symbols.shape[0] < 2:
            raise ValueError("constellation needs at least 2 symbols")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.positions = positions
        self.temperature = temperature
        self.register_buffer("symbols", torch.tensor(symbols))
        self.head = nn.Linear(feature_dim, positions * symbols.shape[0])

    @property
    def constellation_size(self) -> int:
        return self.symbols.shape[0]

    @property
    def symbol_dim(self) -> int:
        return self.symbols.shape[1]

    def scores(self, features: torch.Tensor) -> torch.Tensor:
        return self.head(features).reshape(-1, self.positions, self.constellation_size)

    def assignment_probs(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.scores(features) / self.temperature, dim=-1)


def modulate(features: torch.Tensor, mod: Modulator, hard: bool = False,
             rng: torch.Generator | None = None) -> torch.Tensor:
    """Emit one constellation symbol per position.

    Soft mode returns the probability-weighted symbol average (differentiable
    relaxation); hard mode returns the argmax symbol with a straight-through
    gradient (forward hard, backward soft).  Output shape is
    (batch, positions * symbol_dim).
    """
    if mod.temperature <= 0:
        raise ValueError("temperature must be positive")
    probs = mod.assignment_probs(features)  # (b, p, k)
    soft = torch.einsum("bpk,km->bpm", probs, mod.symbols)
    if hard:
        onehot = torch.nn.functional.one_hot(
            probs.argmax(dim=-1), mod.constellation_size
        ).to(probs.dtype)
        hard_sym = torch.einsum("bpk,km->bpm", onehot, mod.symbols)
        out = (hard_sym - soft).detach() + soft
    else:
        out = soft
    return out.reshape(out.shape[0], -1)


class HyperAdapter(nn.Module):
    """Small net mapping an SNR value to per-block scale/shift modulation.

    Identity at initialization: the output layer is zero-initialized, so a
    fresh adapter leaves the encoder unchanged at any SNR.  ``reference_snr``
    centers the (normalized) input.
    """

    def __init__(self, film_shapes: list[int], width: int = 32,
                 reference_snr: float = 15.0, snr_scale: float = 10.0):
        super().__init__()
        self.film_shapes = list(film_shapes)
        self.reference_snr = reference_snr
        self.snr_scale = snr_scale
        total = 2 * sum(film_shapes)
        self.net = nn.Sequential(nn.Linear(1, width), nn.Tanh(), nn.Linear(width, total))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, snr_db: float) -> list[tuple[torch.Tensor, torch.Tensor]]:
        if not math.isfinite(snr_db):
            raise ValueError("snr_db must be finite")
        t = torch.tensor([[(snr_db - self.reference_snr) / self.snr_scale]],
                         dtype=torch.float32)
        raw = self.net(t).squeeze(0)
        film, off = [], 0
        for n in self.film_shapes:
            scale = 1.0 + raw[off:off + n]
            shift = raw[off + n:off + 2 * n]
            film.append((scale, shift))
            off += 2 * n
        return film


class AdaptedEncoder(nn.Module):
    """View of an encoder with hypernetwork modulation at a fixed SNR.

    The base encoder parameters are untouched; only the adapter's output
    conditions the activations.
    """

    def __init__(self, enc: Encoder, adapter: HyperAdapter, snr_db: float):
        super().__init__()
        if adapter.film_shapes != enc.film_shapes:
            raise ValueError(
                f"adapter shapes {adapter.film_shapes} != encoder {enc.film_shapes}"
            )
        self.base = enc
        self.adapter = adapter
        self.snr_db = snr_db

    @property
    def latent_dim(self) -> int:
        return self.base.latent_dim

    @property
    def input_shape(self):
        return self.base.input_shape

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.base(x, film=self.adapter(self.snr_db))


def hyper_adapt(enc: Encoder, snr_db: float, adapter: HyperAdapter) -> AdaptedEncoder:
    """Adapted view of ``enc`` whose activations are conditioned on ``snr_db``."""
    return AdaptedEncoder(enc, adapter, snr_db)


def encode(x: torch.Tensor, enc: nn.Module, mode: str = "stochastic",
           rng: torch.Generator | None = None):
    """Run the encoder; returns (z, mu, logvar).

    Stochastic mode draws z = mu + exp(logvar/2) * eps with reparameterized
    standard-normal eps; deterministic mode returns z = mu.  Power
    normalization is the caller's step (see channel.normalize_power).
    """
    mu, logvar = enc(x)
    if mode == "deterministic":
        return mu, mu, logvar
    if mode != "stochastic":
        raise ValueError(f"unknown encode mode {mode!r}")
    eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * eps
    return z, mu, logvar


def decode(zhat: torch.Tensor, dec: Decoder) -> torch.Tensor:
    """Class scores for received codes (softmax left to the caller)."""
    return dec(zhat)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class TransceiverPair:
    """One transmitter/receiver pair plus everything needed to run it."""

    encoder: Encoder
    decoder: Decoder
    mode: str = "analog"  # "analog" | "digital" | "relative"
    modulator: Modulator | None = None
    hyper: HyperAdapter | None = None
    arch: str = "conv-small"
    name: str = "pair"
    seed: int = 0
    class_count: int = 10
    anchor_x: np.ndarray | None = None  # raw anchor inputs (relative mode)
    _anchor_feats: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("analog", "digital", "relative"):
            raise ValueError(f"unknown pair mode {self.mode!r}")
        if self.mode == "digital" and self.modulator is None:
            raise ValueError("digital mode requires a modulator")
        if self.mode == "relative" and self.anchor_x is None:
            raise ValueError("relative mode requires anchors")

    def parameters(self):
        mods = [self.encoder, self.decoder]
        if self.modulator is not None:
            mods.append(self.modulator)
        if self.hyper is not None:
            mods.append(self.hyper)
        for m in mods:
            yield from m.parameters()

    def anchor_features(self, refresh: bool = False) -> torch.Tensor:
        """Anchors encoded (deterministically) by this pair's own encoder."""
        if self.anchor_x is None:
            raise ValueError("pair has no anchors")
        if self._anchor_feats is None or refresh:
            with torch.no_grad():
                mu, _ = self.encoder(torch.tensor(self.anchor_x))
            self._anchor_feats = mu
        return self._anchor_feats

    def transmit_codes(self, x: torch.Tensor, stochastic: bool,
                       rng: torch.Generator | None, snr_db: float | None = None,
                       hard: bool = False) -> torch.Tensor:
        """Encoder-side half of the pipeline: codes ready for the channel."""
        enc = self.encoder
        if self.hyper is not None and snr_db is not None:
            enc = hyper_adapt(self.encoder, snr_db, self.hyper)
        if self.mode == "digital":
            if isinstance(enc, AdaptedEncoder):
                feats = enc.base.features(x, film=enc.adapter(enc.snr_db))
            else:
                feats = enc.features(x)
            return modulate(feats, self.modulator, hard=hard, rng=rng)
        z, mu, logvar = encode(x, enc, "stochastic" if stochastic else "deterministic", rng)
        if self.mode == "relative":
            z = relative_encode(z, self.anchor_features())
        return ch.normalize_power(z)

    def accuracy(self, x: np.ndarray, y: np.ndarray, spec: ch.ChannelSpec,
                 rng: torch.Generator | None = None, decoder: Decoder | None = None,
                 amap=None, reps: int = 1, batch: int = 4096,
                 snr_db: float | None = None) -> float:
        """Fraction of correct predictions through the channel.

        ``decoder`` and ``amap`` allow decoding with another pair's receiver
        after an alignment map; deterministic given the rng.
        """
        from .alignment import apply_map

        dec = decoder if decoder is not None else self.decoder
        hits = total = 0
        with torch.no_grad():
            for s in range(0, len(x), batch):
                xb = torch.tensor(x[s:s + batch])
                yb = y[s:s + batch]
                codes = self.transmit_codes(xb, stochastic=False, rng=rng,
                                            snr_db=snr_db, hard=True)
                for _ in range(reps):
                    zhat = ch.transmit(codes, spec, rng)
                    if amap is not None:
                        zhat = apply_map(zhat, amap)
                    pred = dec(zhat).argmax(dim=1).numpy()
                    hits += int((pred == yb).sum())
                    total += len(yb)
        return hits / total


def build_pair(arch: str, input_shape, latent_dim: int, class_count: int,
               seed: int = 0, mode: str = "analog", name: str | None = None,
               decoder_width: int = 64, encoder_width: int = 64,
               positions: int = 8, constellation: np.ndarray | None = None,
               hyper: bool = False, anchor_x: np.ndarray | None = None,
               reference_snr: float = 15.0) -> TransceiverPair:
    """Construct a pair with seed-deterministic initialization.

    ``arch`` may be "conv-small", "mlp-small", or "mixed" (conv encoder with
    a wider decoder, mirroring a cross-architecture deployment).
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc_arch, dec_width = arch, decoder_width
        if arch == "mixed":
            enc_arch, dec_width = "conv-small", decoder_width + 32
        enc = Encoder(enc_arch, tuple(input_shape), latent_dim, width=encoder_width)
        modulator = None
        dec_in = latent_dim
        if mode == "digital":
            if constellation is None:
                constellation = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5.0)
            modulator = Modulator(encoder_width, positions, constellation)
            dec_in = positions * modulator.symbol_dim
        if mode == "relative":
            if anchor_x is None:
                raise ValueError("relative mode requires anchor inputs")
            dec_in = len(anchor_x)
        dec = Decoder(dec_in, class_count, width=dec_width)
        adapter = HyperAdapter(enc.film_shapes, reference_snr=reference_snr) if hyper else None
    return TransceiverPair(
        encoder=enc, decoder=dec, mode=mode, modulator=modulator, hyper=adapter,
        arch=arch, name=name or f"{arch}-{seed}", seed=seed, class_count=class_count,
        anchor_x=anchor_x,
    )


def empirical_constellation(mod: Modulator, features: torch.Tensor) -> Constellation:
    """Constellation with the batch's (differentiable) symbol usage frequencies."""
    probs = mod.assignment_probs(features).reshape(-1, mod.constellation_size).mean(dim=0)
    return Constellation(symbols=mod.symbols.detach().numpy(), probs=probs)


def hard_symbol_frequencies(mod: Modulator, features: torch.Tensor) -> Constellation:
    """Constellation with the batch's hard (argmax) symbol usage counts."""
    with torch.no_grad():
        idx = mod.scores(features).argmax(dim=-1).reshape(-1)
        counts = torch.bincount(idx, minlength=mod.constellation_size).double()
        probs = (counts / counts.sum()).numpy()
    return Constellation(symbols=mod.symbols.detach().numpy(), probs=probs)


def _flat_params(modules: list[nn.Module]) -> np.ndarray:
    chunks = []
    for m in modules:
        for _, p in sorted(m.named_parameters()):
            chunks.append(p.detach().numpy().astype(np.float32).reshape(-1))
    if not chunks:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(chunks)


def _load_flat_params(modules: list[nn.Module], flat: np.ndarray) -> None:
    off = 0
    with torch.no_grad():
        for m in modules:
            for _, p in sorted(m.named_parameters()):
                n = p.numel()
                p.copy_(torch.tensor(flat[off:off + n].reshape(tuple(p.shape))))
                off += n
    if off != len(flat):
        raise ValueError(f"parameter blob size mismatch: used {off} of {len(flat)}")


def _pair_modules(pair: TransceiverPair) -> list[nn.Module]:
    mods = [pair.encoder, pair.decoder]
    if pair.modulator is not None:
        mods.append(pair.modulator)
    if pair.hyper is not None:
        mods.append(pair.hyper)
    return mods


def save_checkpoint(pair: TransceiverPair, directory) -> Path:
    """Write a flat float32 parameter blob plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = _flat_params(_pair_modules(pair))
    (directory / "params.bin").write_bytes(flat.tobytes())
    meta = {
        "architecture_tag": pair.arch,
        "name": pair.name,
        "mode": pair.mode,
        "latent_dim": pair.encoder.latent_dim,
        "class_count": pair.class_count,
        "seed": pair.seed,
        "input_shape": list(pair.encoder.input_shape),
        "encoder_width": pair.encoder.width,
        "decoder_width": pair.decoder.net[0].out_features,
        "parameter_count": int(flat.size),
        "hyper": pair.hyper is not None,
        "reference_snr": pair.hyper.reference_snr if pair.hyper is not None else None,
        "constellation": (pair.modulator.symbols.numpy().tolist()
                          if pair.modulator is not None else None),
        "positions": pair.modulator.positions if pair.modulator is not None else None,
    }
    (directory / "pair.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if pair.anchor_x is not None:
        np.save(directory / "anchors.npy", pair.anchor_x)
    return directory


def load_checkpoint(directory) -> TransceiverPair:
    directory = Path(directory)
    meta = json.loads((directory / "pair.json").read_text())
    anchor_path = directory / "anchors.npy"
    anchor_x = np.load(anchor_path) if anchor_path.exists() else None
    dec_extra = 32 if meta["architecture_tag"] == "mixed" else 0
    pair = build_pair(
        meta["architecture_tag"], tuple(meta["input_shape"]), meta["latent_dim"],
        meta["class_count"], seed=meta["seed"], mode=meta["mode"],
        name=meta["name"], decoder_width=meta["decoder_width"] - dec_extra,
        encoder_width=meta["encoder_width"],
        positions=meta["positions"] or 8,
        constellation=np.array(meta["constellation"]) if meta["constellation"] else None,
        hyper=meta["hyper"], anchor_x=anchor_x,
        reference_snr=meta["reference_snr"] or 15.0,
    )
    flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype=np.float32).copy()
    if flat.size != meta["parameter_count"]:
        raise ValueError(
            f"checkpoint blob has {flat.size} scalars, sidecar says {meta['parameter_count']}"
        )
    _load_flat_params(_pair_modules(pair), flat)
    return pair
