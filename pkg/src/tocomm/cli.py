"""Config-driven experiment runner: train / align / sweep / ood / overhead /
report subcommands producing machine-readable, re-runnable artifacts."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import alignment, datasets, robustness, training, transceiver
from .channel import ChannelSpec
from .mi import EstimationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending key."""


# section -> key -> (type, default); None default means required-if-used
SCHEMA = {
    "dataset": {
        "name": (str, "digits"),  # digits | colored_digits | synthetic_gaussian
        "n_train": (int, 1400),
        "n_test": (int, 397),
        "env_correlations": (list, [0.9, 0.8]),
        "test_correlation": (float, 0.1),
        "label_flip": (float, 0.25),
        "augment_shifts": (int, 0),
        "holdout_digits": (list, []),
        "gaussian_dim": (int, 8),
        "gaussian_classes": (int, 4),
        "gaussian_spread": (float, 1.0),
    },
    "model": {
        "arch": (str, "conv-small"),  # conv-small | mlp-small | mixed
        "latent_dim": (int, 16),
        "mode": (str, "analog"),  # analog | digital | relative
        "encoder_width": (int, 64),
        "decoder_width": (int, 64),
        "positions": (int, 8),
        "constellation_size": (int, 4),
        "hyper": (bool, False),
        "reference_snr": (float, 15.0),
        "anchors_k": (int, 64),
    },
    "channel": {
        "kind": (str, "awgn"),
        "snr_db": (float, None),
        "psnr_db": (float, None),
        "peak": (float, 1.0),
    },
    "objective": {
        "name": (str, "vib"),  # ce | vib | ife | rib
        "beta": (float, 1e-3),
        "lambda_inv": (float, 0.0),
        "tau": (float, 0.2),
        "mc_samples": (int, 4000),
    },
    "training": {
        "strategy": (str, "local_pre"),
        "epochs": (int, 30),
        "stage1_epochs": (int, 0),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "weight_decay": (float, 0.0),
        "anneal_steps": (int, 0),
        "anneal_lr_drop": (float, 1.0),
        "full_batch": (bool, False),
        "target_accuracy": (float, None),
        "noisy_gradients": (bool, False),
        "snr_range": (list, None),
        "eval_reps": (int, 4),
    },
    "alignment": {
        "k": (int, 64),
        "strategy": (str, "per-class"),
        "noisy_reps": (int, 16),
        "ridge": (float, 0.0),
        "learned_steps": (int, 500),
    },
    "ood": {
        "tpr": (float, 0.95),
    },
}

TOP_KEYS = {"seed", "output_dir"}


def validate_config(raw: dict) -> dict:
    """Strictly validate a config document; unknown keys are rejected.

    Returns the fully-resolved config with every default filled in.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    resolved = {"seed": 0, "output_dir": None}
    for key in raw:
        if key not in SCHEMA and key not in TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    for key in TOP_KEYS:
        if key in raw:
            resolved[key] = raw[key]
    if not isinstance(resolved["seed"], int):
        raise ConfigError("seed: expected an integer")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section}: expected an object")
        for k in given:
            if k not in keys:
                raise ConfigError(f"unknown config key {section}.{k!r}")
        out = {}
        for k, (typ, default) in keys.items():
            v = given.get(k, default)
            if v is not None and typ in (int, float, str, bool):
                if typ is float and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                if not isinstance(v, typ) or (typ in (int, float) and isinstance(v, bool)):
                    raise ConfigError(
                        f"{section}.{k}: expected {typ.__name__}, got {v!r}"
                    )
            if v is not None and typ is list and not isinstance(v, list):
                raise ConfigError(f"{section}.{k}: expected a list, got {v!r}")
            out[k] = v
        resolved[section] = out
    ch = resolved["channel"]
    if (ch["snr_db"] is None) == (ch["psnr_db"] is None):
        raise ConfigError("channel: exactly one of snr_db / psnr_db must be set")
    return resolved


def _channel_spec(cfg: dict) -> ChannelSpec:
    c = cfg["channel"]
    return ChannelSpec(kind=c["kind"], snr_db=c["snr_db"], psnr_db=c["psnr_db"],
                       peak=c["peak"])


def build_datasets(cfg: dict):
    """Train/test datasets named by the config; deterministic per seed."""
    d = cfg["dataset"]
    seed = cfg["seed"]
    if d["name"] == "digits":
        base = datasets.load_digits_toy(seed=seed)
        train, test = datasets.split_dataset(base, [d["n_train"], min(d["n_test"], len(base) - d["n_train"])])
        return train, test
    if d["name"] == "colored_digits":
        base = datasets.load_digits_toy(seed=seed)
        hold = set(d["holdout_digits"])
        keep = [i for i, ex in enumerate(base.examples) if ex.y not in hold]
        base = datasets.subset(base, keep)
        n_tr = min(d["n_train"], len(base) - d["n_test"])
        tr_base, te_base = datasets.split_dataset(base, [n_tr, d["n_test"]])
        if d["augment_shifts"] > 0:
            shifts = [(1, 0), (0, 1), (-1, 0), (0, -1)][: d["augment_shifts"]]
            tr_base = datasets.shift_augment(tr_base, shifts)
        train = datasets.make_colored_mnist(tr_base, d["env_correlations"],
                                            d["label_flip"], seed=seed + 1)
        test = datasets.make_colored_mnist(te_base, [d["test_correlation"]],
                                           d["label_flip"], seed=seed + 2)
        return train, test
    if d["name"] == "gaussian_blobs":
        full = datasets.make_gaussian_blobs(
            d["n_train"] + d["n_test"], d["gaussian_dim"], d["gaussian_classes"],
            spread=d["gaussian_spread"], seed=seed)
        return datasets.split_dataset(full, [d["n_train"], d["n_test"]])
    raise ConfigError(f"dataset.name: unsupported dataset {d['name']!r}")


def build_pair_from_config(cfg: dict, train=None) -> transceiver.TransceiverPair:
    m = cfg["model"]
    if train is None:
        train, _ = build_datasets(cfg)
    anchor_x = None
    if m["mode"] == "relative":
        anchors = datasets.select_anchors(train, m["anchors_k"],
                                          cfg["alignment"]["strategy"], cfg["seed"])
        anchor_x = anchors.x_array()
    constellation = None
    if m["mode"] == "digital":
        k = m["constellation_size"]
        pts = np.linspace(-(k - 1), k - 1, k)
        constellation = pts / np.sqrt((pts**2).mean())
    return transceiver.build_pair(
        m["arch"], train.input_shape, m["latent_dim"], train.class_count,
        seed=cfg["seed"], mode=m["mode"], decoder_width=m["decoder_width"],
        encoder_width=m["encoder_width"], positions=m["positions"],
        constellation=constellation, hyper=m["hyper"], anchor_x=anchor_x,
        reference_snr=m["reference_snr"],
    )


def train_config_from(cfg: dict) -> training.TrainConfig:
    t, o = cfg["training"], cfg["objective"]
    snr_range = tuple(t["snr_range"]) if t["snr_range"] else None
    return training.TrainConfig(
        channel=_channel_spec(cfg), strategy=t["strategy"], objective=o["name"],
        epochs=t["epochs"], stage1_epochs=t["stage1_epochs"],
        batch_size=t["batch_size"], lr=t["lr"], weight_decay=t["weight_decay"],
        beta=o["beta"], lambda_inv=o["lambda_inv"], tau=o["tau"],
        seed=cfg["seed"], mc_samples=o["mc_samples"],
        anneal_steps=t["anneal_steps"], anneal_lr_drop=t["anneal_lr_drop"],
        full_batch=t["full_batch"], target_accuracy=t["target_accuracy"],
        noisy_gradients=t["noisy_gradients"], snr_range=snr_range,
    )


def _out_dir(cfg: dict, cli_out: str | None, force: bool) -> Path:
    root = cli_out or cfg.get("output_dir") or os.environ.get("TOCOMM_OUT", "runs")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    if any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return validate_config(raw)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(cfg, args.out, args.force)
    train, test = build_datasets(cfg)
    pair = build_pair_from_config(cfg, train)
    tcfg = train_config_from(cfg)
    jsonl = (out / "metrics.jsonl").open("w")

    def log(rec):
        jsonl.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        if tcfg.strategy in ("local_pre", "local_post"):
            pair, ledger = training.train_local(pair, train, tcfg, log=log)
        elif tcfg.strategy == "remote":
            pair, ledger = training.train_remote(pair, train, tcfg, eval_data=test, log=log)
        else:
            pair, ledger = training.train_hybrid(pair, train, tcfg, eval_data=test, log=log)
    except EstimationError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        jsonl.close()

    rng = torch.Generator().manual_seed(cfg["seed"] + 555)
    acc = training.evaluate(pair, test, tcfg.channel, rng,
                            reps=cfg["training"]["eval_reps"])
    if not np.isfinite(acc):
        print("non-finite evaluation result", file=sys.stderr)
        return EXIT_NUMERIC
    transceiver.save_checkpoint(pair, out / "checkpoints")
    metrics = {"accuracy": acc, "ledger": ledger.snapshot(), "notes": ledger.notes}
    last = _read_last_jsonl(out / "metrics.jsonl")
    if last is not None:
        metrics["final_loss"] = last.get("loss")
        metrics.update(last.get("components", {}))
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "resolved_config.json", cfg)
    print(f"accuracy {acc:.4f} -> {out}")
    return EXIT_OK


def _read_last_jsonl(path: Path):
    if not path.exists():
        return None
    last = None
    with path.open() as f:
        for line in f:
            line = line.strip()
            if line:
                last = json.loads(line)
    return last


def _load_run(run_dir: str):
    run = Path(run_dir)
    cfg_path = run / "resolved_config.json"
    ckpt = run / "checkpoints"
    if not cfg_path.exists() or not ckpt.exists():
        raise ConfigError(f"{run_dir} is not a trained run directory "
                          "(missing resolved_config.json or checkpoints/)")
    cfg = validate_config(json.loads(cfg_path.read_text()))
    pair = transceiver.load_checkpoint(ckpt)
    return cfg, pair


def cmd_align(args) -> int:
    runs = [_load_run(r) for r in args.runs]
    cfgs = [c for c, _ in runs]
    pairs = [p for _, p in runs]
    classes = {c["model"]["mode"] for c in cfgs}
    if len({p.class_count for p in pairs}) != 1:
        raise ConfigError("runs disagree on class count")
    if len(classes) != 1:
        raise ConfigError("runs disagree on transmission mode")
    cfg = cfgs[0]
    out = Path(args.out or os.environ.get("TOCOMM_OUT", "runs")) / "align"
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    k = args.anchors_k or cfg["alignment"]["k"]
    anchors = datasets.select_anchors(train, k, cfg["alignment"]["strategy"],
                                      cfg["seed"])
    spec = _channel_spec(cfg)
    summary = {}
    for mode in args.modes:
        rng = torch.Generator().manual_seed(cfg["seed"] + 999)
        matrix = alignment.cross_matrix(
            pairs, test, spec, mode, anchors, rng,
            noisy_reps=cfg["alignment"]["noisy_reps"],
            ridge=cfg["alignment"]["ridge"],
            learned_steps=cfg["alignment"]["learned_steps"],
            eval_reps=cfg["training"]["eval_reps"],
        )
        matrix.to_csv(out / f"matrix_{mode}.csv")
        summary[mode] = {
            "diagonal_mean": matrix.diagonal_mean,
            "offdiag_mean": matrix.offdiag_mean,
            "aligned_gap": matrix.aligned_gap(),
        }
    _write_json(out / "summary.json", summary)
    print(f"alignment matrices -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, pair = _load_run(args.run)
    out = Path(args.out or args.run)
    test = build_datasets(cfg)[1]
    rng = torch.Generator().manual_seed(cfg["seed"] + 321)
    curve = training.snr_sweep(pair, args.snrs, test, rng,
                               reps=cfg["training"]["eval_reps"])
    path = out / "snr_sweep.csv"
    with path.open("w") as f:
        f.write("snr_db,accuracy\n")
        for snr, acc in curve:
            f.write(f"{snr},{acc:.4f}\n")
    print(f"sweep -> {path}")
    return EXIT_OK


def cmd_ood(args) -> int:
    cfg, pair = _load_run(args.run)
    out = Path(args.out or args.run)
    _, test = build_datasets(cfg)
    if args.ood_run:
        ood_cfg, _ = _load_run(args.ood_run)
        ood_set = build_datasets(ood_cfg)[1]
    else:
        ood_set = test  # identical-distribution control
    id_scores = robustness.ood_score(test.x_array(), pair.encoder)
    ood_scores = robustness.ood_score(ood_set.x_array(), pair.encoder)
    report = robustness.ood_metrics(id_scores, ood_scores, tpr=cfg["ood"]["tpr"])
    _write_json(out / "ood.json", report.to_dict())
    print(f"auroc {report.auroc:.3f} -> {out / 'ood.json'}")
    return EXIT_OK


def cmd_overhead(args) -> int:
    rows = []
    for run_dir in args.runs:
        run = Path(run_dir)
        metrics = json.loads((run / "metrics.json").read_text())
        cfg = json.loads((run / "resolved_config.json").read_text())
        led = metrics["ledger"]
        rows.append({
            "strategy": cfg["training"]["strategy"],
            "uplink": led["uplink_scalars"],
            "downlink": led["downlink_scalars"],
            "param_transfer": led["param_transfer_scalars"],
            "final_accuracy": metrics["accuracy"],
        })
    out = Path(args.out or os.environ.get("TOCOMM_OUT", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "overhead.csv"
    with path.open("w") as f:
        f.write("strategy,uplink,downlink,param_transfer,final_accuracy\n")
        for r in rows:
            f.write(f"{r['strategy']},{r['uplink']},{r['downlink']},"
                    f"{r['param_transfer']},{r['final_accuracy']:.4f}\n")
    print(f"overhead table -> {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    payload = {}
    for name in ("metrics.json", "resolved_config.json", "ood.json"):
        p = run / name
        if p.exists():
            payload[name.removesuffix(".json")] = json.loads(p.read_text())
    if not payload:
        raise ConfigError(f"{run} contains no report-able artifacts")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tocomm",
                                description="task-oriented communication experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one transceiver pair from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("align", help="cross-transceiver accuracy matrices")
    a.add_argument("runs", nargs="+", help="trained run directories (>= 2)")
    a.add_argument("--modes", nargs="+", default=["none", "receiver-ls"])
    a.add_argument("--anchors-k", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_align)

    s = sub.add_parser("sweep", help="accuracy over an SNR grid")
    s.add_argument("run")
    s.add_argument("--snrs", nargs="+", type=float, required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sweep)

    o = sub.add_parser("ood", help="out-of-distribution detection report")
    o.add_argument("run")
    o.add_argument("--ood-run", default=None,
                   help="run dir whose test set is the OoD source")
    o.add_argument("--out", default=None)
    o.set_defaults(fn=cmd_ood)

    v = sub.add_parser("overhead", help="training-communication ledger table")
    v.add_argument("runs", nargs="+")
    v.add_argument("--out", default=None)
    v.set_defaults(fn=cmd_overhead)

    r = sub.add_parser("report", help="print a run's artifacts as one JSON")
    r.add_argument("run")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
