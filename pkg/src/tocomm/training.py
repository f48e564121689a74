"""Deployment training strategies (local, remote, hybrid) with exact
accounting of scalars exchanged between the transmitter and receiver sides."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import channel as ch
from . import objectives as obj
from .channel import ChannelSpec
from .transceiver import (
    TransceiverPair,
    empirical_constellation,
    encode,
    hyper_adapt,
    modulate,
    parameter_count,
)

__all__ = [
    "TrainingLedger",
    "TrainConfig",
    "train_local",
    "train_remote",
    "train_hybrid",
    "evaluate",
    "snr_sweep",
    "fit_linear_probe",
]

STRATEGIES = ("local_pre", "local_post", "remote", "hybrid")
OBJECTIVES = ("ce", "vib", "ife", "rib")


@dataclass
class TrainingLedger:
    """Exact counts of scalars exchanged between the two sides during training."""

    uplink_scalars: int = 0
    downlink_scalars: int = 0
    param_transfer_scalars: int = 0
    steps: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def exchanged_scalars(self) -> int:
        return self.uplink_scalars + self.downlink_scalars

    def snapshot(self) -> dict:
        return {
            "uplink_scalars": self.uplink_scalars,
            "downlink_scalars": self.downlink_scalars,
            "param_transfer_scalars": self.param_transfer_scalars,
            "steps": self.steps,
        }


@dataclass
class TrainConfig:
    channel: ChannelSpec
    strategy: str = "local_pre"
    objective: str = "vib"
    epochs: int = 20
    stage1_epochs: int = 0  # hybrid: self-supervised local epochs
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta: float = 1e-3
    lambda_inv: float = 0.0
    tau: float = 0.2
    seed: int = 0
    mc_samples: int = 4000
    anneal_steps: int = 0  # ife: steps before lambda_inv takes effect
    anneal_lr_drop: float = 1.0  # lr multiplier applied at the anneal point
    full_batch: bool = False
    target_accuracy: float | None = None
    eval_every: int = 1  # epochs between target-accuracy checks
    noisy_gradients: bool = False
    snr_range: tuple[float, float] | None = None  # hyper training: per-step snr draw

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.stage1_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def _stochastic(cfg: TrainConfig) -> bool:
    return cfg.objective in ("vib", "ife")


def _forward_split(pair: TransceiverPair, xb, cfg, g, spec, remote: bool,
                   ledger: TrainingLedger, snr_db=None):
    """Encoder-side forward up to the channel, with the uplink split point.

    Returns (zhat, z_local, z_tx, mu, logvar).  ``z_tx`` is the detached
    transmission tensor whose gradient is what the receiver sends back.
    """
    enc = pair.encoder
    if pair.hyper is not None and snr_db is not None:
        enc = hyper_adapt(pair.encoder, snr_db, pair.hyper)
    if pair.mode == "digital":
        if hasattr(enc, "base"):
            feats = enc.base.features(xb, film=enc.adapter(enc.snr_db))
        else:
            feats = enc.features(xb)
        z = modulate(feats, pair.modulator, hard=False)
        mu = logvar = None
    else:
        z, mu, logvar = encode(
            xb, enc, "stochastic" if _stochastic(cfg) else "deterministic", g
        )
        if pair.mode == "relative":
            from .alignment import relative_encode

            z = relative_encode(z, pair.anchor_features(refresh=True))
        z = ch.normalize_power(z)
        feats = None
    z_tx = z.detach().requires_grad_(True)
    zhat = ch.transmit(z_tx, spec, g)
    if remote:
        ledger.uplink_scalars += int(z.shape[0]) * int(z.shape[1])
    return zhat, z, z_tx, mu, logvar, feats


def _loss_report(pair, zhat, yb, eb, mu, logvar, feats, cfg, spec, g):
    scores = pair.decoder(zhat)
    if cfg.objective == "ce" or (cfg.objective == "vib" and mu is None):
        ce = F.cross_entropy(scores, yb)
        return obj.LossReport(total=ce, components={"task_ce": float(ce.detach())},
                              weights={"task_ce": 1.0})
    if cfg.objective == "vib":
        return obj.vib_loss(scores, yb, mu, logvar, cfg.beta)
    if cfg.objective == "rib":
        const = empirical_constellation(pair.modulator, feats)
        return obj.rib_loss(scores, yb, const, spec, cfg.beta, cfg.mc_samples, g)
    if cfg.objective == "ife":
        if eb is None:
            raise ValueError("ife objective needs environment ids")
        per_env = []
        envs = torch.unique(eb)
        if len(envs) < 2:
            raise ValueError("ife objective needs batches spanning >= 2 environments")
        for e in envs.tolist():
            m = eb == e
            per_env.append((scores[m], yb[m], mu[m], logvar[m]))
        return obj.ife_loss(per_env, cfg.beta, cfg.lambda_inv)
    raise ValueError(f"unknown objective {cfg.objective!r}")


def _train_loop(pair: TransceiverPair, data, cfg: TrainConfig, remote: bool,
                ledger: TrainingLedger, eval_data=None, log=None,
                max_epochs=None, rng_offset: int = 0) -> None:
    """Shared epoch engine; ``remote`` only switches the accounting on.

    The forward/backward arithmetic is identical for local and remote
    training, so trajectories coincide exactly under equal seeds.
    """
    x = torch.tensor(data.x_array())
    y = torch.tensor(data.y_array())
    envs = torch.tensor(data.d_array())
    n = len(data)
    # rate-based OoD scoring only makes sense for stochastically trained encoders
    pair.encoder.deterministic = not _stochastic(cfg)
    g = torch.Generator().manual_seed(cfg.seed + 1000 + rng_offset)
    order_rng = np.random.default_rng(cfg.seed + rng_offset)
    snr_rng = np.random.default_rng(cfg.seed + 31 + rng_offset)
    params = list(pair.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    batch = n if cfg.full_batch else min(cfg.batch_size, n)
    epochs = cfg.epochs if max_epochs is None else max_epochs
    dropped = False
    global_step = 0

    for epoch in range(epochs):
        order = order_rng.permutation(n)
        epoch_report = None
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            xb, yb, eb = x[idx], y[idx], envs[idx]
            snr_db = None
            spec = cfg.channel
            if cfg.snr_range is not None:
                snr_db = float(snr_rng.uniform(*cfg.snr_range))
                spec = ChannelSpec(kind=cfg.channel.kind, snr_db=snr_db)
            lam_active = cfg.objective == "ife" and global_step >= cfg.anneal_steps
            step_cfg = cfg
            if cfg.objective == "ife" and not lam_active:
                step_cfg = replace(cfg, lambda_inv=min(1.0, cfg.lambda_inv))
            if (cfg.objective == "ife" and global_step == cfg.anneal_steps
                    and cfg.anneal_lr_drop != 1.0 and not dropped):
                for grp in opt.param_groups:
                    grp["lr"] = cfg.lr * cfg.anneal_lr_drop
                dropped = True

            zhat, z, z_tx, mu, logvar, feats = _forward_split(
                pair, xb, step_cfg, g, spec, remote, ledger, snr_db=snr_db
            )
            report = _loss_report(pair, zhat, yb, eb if cfg.objective == "ife" else None,
                                  mu, logvar, feats, step_cfg, spec, g)
            opt.zero_grad()
            # receiver-side backward; encoder-local terms (rate, modulation MI)
            # flow directly, the task gradient returns through z_tx below
            report.total.backward(retain_graph=True)
            grad_back = z_tx.grad
            if remote:
                ledger.downlink_scalars += int(grad_back.shape[0]) * int(grad_back.shape[1])
                if cfg.noisy_gradients:
                    grad_back = ch.transmit(grad_back, spec, g)
            z.backward(grad_back)
            opt.step()
            ledger.steps += 1
            global_step += 1
            epoch_report = report
        if log is not None:
            log({"epoch": epoch, "loss": float(epoch_report.total.detach()),
                 "components": dict(epoch_report.components),
                 "ledger": ledger.snapshot()})
        if cfg.target_accuracy is not None and (epoch + 1) % cfg.eval_every == 0:
            probe = eval_data if eval_data is not None else data
            acc = evaluate(pair, probe, cfg.channel,
                           torch.Generator().manual_seed(cfg.seed + 77))
            if acc >= cfg.target_accuracy:
                ledger.notes.append(f"target {cfg.target_accuracy} reached at epoch {epoch}")
                return


def train_local(pair: TransceiverPair, data, cfg: TrainConfig,
                log=None) -> tuple[TransceiverPair, TrainingLedger]:
    """Joint end-to-end training in one place.

    ``local_pre`` transfers nothing; ``local_post`` counts a one-time
    transfer of the receiver model (its exact parameter count).
    """
    if cfg.strategy not in ("local_pre", "local_post"):
        raise ValueError(f"train_local with strategy {cfg.strategy!r}")
    ledger = TrainingLedger()
    _train_loop(pair, data, cfg, remote=False, ledger=ledger, log=log)
    if cfg.strategy == "local_post":
        ledger.param_transfer_scalars = parameter_count(pair.decoder)
    return pair, ledger


def train_remote(pair: TransceiverPair, data, cfg: TrainConfig, eval_data=None,
                 log=None) -> tuple[TransceiverPair, TrainingLedger]:
    """Split training: codes cross the (noisy) channel, gradients come back.

    Every step uplinks batch x code-dim scalars and downlinks the same count
    of code gradients.  Gradients return noiselessly unless
    ``cfg.noisy_gradients`` routes them through the channel too.
    """
    if cfg.strategy != "remote":
        raise ValueError(f"train_remote with strategy {cfg.strategy!r}")
    ledger = TrainingLedger()
    _train_loop(pair, data, cfg, remote=True, ledger=ledger, eval_data=eval_data,
                log=log)
    return pair, ledger


def _two_views(xb: torch.Tensor, g: torch.Generator,
               max_shift: int = 2, jitter: float = 0.05):
    """Crop-shift and pixel-jitter views of the same inputs."""
    views = []
    for _ in range(2):
        shifts = torch.randint(-max_shift, max_shift + 1, (xb.shape[0], 2), generator=g)
        padded = F.pad(xb, (max_shift,) * 4)
        rows = []
        for i in range(xb.shape[0]):
            dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
            h, w = xb.shape[-2], xb.shape[-1]
            rows.append(padded[i, :, max_shift + dy:max_shift + dy + h,
                               max_shift + dx:max_shift + dx + w])
        v = torch.stack(rows)
        v = v + torch.randn(v.shape, generator=g) * jitter
        views.append(v.clamp(0.0, 1.0))
    return views


def train_hybrid(pair: TransceiverPair, data, cfg: TrainConfig, eval_data=None,
                 log=None) -> tuple[TransceiverPair, TrainingLedger]:
    """Self-supervised local stage, then remote fine-tuning.

    Stage one trains the transmitter alone with InfoNCE over two
    transformations (shift and jitter) of each input; nothing crosses the
    link, so the ledger reflects only the remote stage.
    """
    if cfg.strategy != "hybrid":
        raise ValueError(f"train_hybrid with strategy {cfg.strategy!r}")
    ledger = TrainingLedger()
    x = torch.tensor(data.x_array())
    n = len(data)
    g = torch.Generator().manual_seed(cfg.seed + 2000)
    order_rng = np.random.default_rng(cfg.seed + 17)
    opt = torch.optim.Adam(pair.encoder.parameters(), lr=cfg.lr,
                           weight_decay=cfg.weight_decay)
    batch = min(cfg.batch_size, n)
    for epoch in range(cfg.stage1_epochs):
        order = order_rng.permutation(n)
        last = None
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            if len(idx) < 2:
                continue
            v1, v2 = _two_views(x[idx], g)
            z1, _, _ = encode(v1, pair.encoder, "deterministic")
            z2, _, _ = encode(v2, pair.encoder, "deterministic")
            report = obj.infonce_loss(z1, z2, cfg.tau)
            opt.zero_grad()
            report.total.backward()
            opt.step()
            last = report
        if log is not None and last is not None:
            log({"epoch": epoch, "stage": 1, "loss": float(last.total.detach()),
                 "components": dict(last.components), "ledger": ledger.snapshot()})

    if cfg.epochs == 0:
        ledger.notes.append("probe-only: stage-2 epochs = 0, no remote fine-tuning")
        return pair, ledger
    _train_loop(pair, data, cfg, remote=True, ledger=ledger, eval_data=eval_data,
                log=log, rng_offset=9000)
    return pair, ledger


def fit_linear_probe(pair: TransceiverPair, data, cfg: TrainConfig,
                     epochs: int | None = None) -> TransceiverPair:
    """Train only the decoder on frozen encoder codes (local, through the channel)."""
    x = torch.tensor(data.x_array())
    y = torch.tensor(data.y_array())
    n = len(data)
    g = torch.Generator().manual_seed(cfg.seed + 3000)
    order_rng = np.random.default_rng(cfg.seed + 23)
    opt = torch.optim.Adam(pair.decoder.parameters(), lr=cfg.lr)
    batch = min(cfg.batch_size, n)
    for _ in range(epochs if epochs is not None else cfg.epochs):
        order = order_rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            with torch.no_grad():
                z, _, _ = encode(x[idx], pair.encoder, "deterministic")
                z = ch.normalize_power(z)
                zhat = ch.transmit(z, cfg.channel, g)
            loss = F.cross_entropy(pair.decoder(zhat), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return pair


def evaluate(pair: TransceiverPair, testset, spec: ChannelSpec,
             rng: torch.Generator | None = None, reps: int = 1,
             snr_db: float | None = None) -> float:
    """Mean 0/1 accuracy over the test set through the channel."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    return pair.accuracy(testset.x_array(), testset.y_array(), spec, rng,
                         reps=reps, snr_db=snr_db)


def snr_sweep(pair: TransceiverPair, snr_list, testset,
              rng: torch.Generator | None = None, reps: int = 1,
              kind: str = "awgn") -> list[tuple[float, float]]:
    """Accuracy at each SNR, in the order given; hyper pairs adapt per point."""
    if not snr_list:
        raise ValueError("snr_list must be non-empty")
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    curve = []
    for snr in snr_list:
        spec = ChannelSpec(kind=kind, snr_db=float(snr))
        acc = evaluate(pair, testset, spec, rng, reps=reps,
                       snr_db=float(snr) if pair.hyper is not None else None)
        curve.append((float(snr), acc))
    return curve
