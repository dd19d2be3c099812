"""Command-line surface: synth, pretrain, finetune, evaluate, inspect.

Progress goes to stderr; machine-readable artifacts go to files only.
Every run writes one manifest JSON with the fully resolved configuration,
seed, input digests, and output paths. Exit codes: 0 success, 1 runtime
abort (e.g. divergence), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import downstream as ds
from . import pretrain as pt
from . import synth
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergedError,
    FitError,
    NumericError,
)
from .model import (
    ModelConfig,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import (
    central_label,
    discretize_bins,
    fit_scaler,
    load_csv,
    preprocess_values,
    segment_sequences,
)


def _log(msg):
    print(msg, file=sys.stderr)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_json_atomic(path, obj):
    _write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(path, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": outputs,
        "duration_sec": round(time.monotonic() - started, 3),
    }
    _write_json_atomic(path, manifest)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        obj = json.load(f)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return obj


def _merged(defaults, file_cfg, overrides):
    """File values override defaults; explicit CLI flags override the file."""
    out = dict(defaults)
    for k, v in file_cfg.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = v
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    return out


def _loss_csv(curve):
    lines = ["step,split,loss"]
    for step, split, loss in curve:
        lines.append(f"{step},{split},{loss:.8f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    started = time.monotonic()
    values, labels = synth.generate_windows(
        args.classes, args.windows_per_class, args.length, args.dims,
        args.seed, noise=args.noise,
    )
    synth.write_csv(args.out, values, labels)
    _log(f"wrote {len(values)} rows to {args.out}")
    _write_manifest(
        args.out + ".manifest.json", "synth",
        {
            "classes": args.classes, "windows_per_class": args.windows_per_class,
            "length": args.length, "dims": args.dims, "noise": args.noise,
        },
        args.seed, [], [args.out], started,
    )
    return 0


_MODEL_DEFAULTS = {"d": 64, "layers": 2, "heads": 4, "ff_mult": 4, "L": 300}


def _model_config_from(cfg, n, k, arch, seed):
    return ModelConfig(
        n=n, d=cfg["d"], L=cfg["L"], layers=cfg["layers"], heads=cfg["heads"],
        ff_mult=cfg["ff_mult"], k=k, arch=arch, seed=seed,
    )


def cmd_pretrain(args):
    started = time.monotonic()
    task = args.task.replace("-", "_")
    file_cfg = _load_config_file(args.config)

    defaults = dict(_MODEL_DEFAULTS)
    defaults.update(
        batch_size=25, lr=5e-5, epochs=1, mask_ratio=0.25, mask_value=-100.0,
        next_token_skip=70, val_fraction=0.2, winsor_fraction=0.05,
        weight_decay=0.01, arch=None,
    )
    cfg = _merged(defaults, file_cfg, {
        "batch_size": args.batch_size, "lr": args.lr, "epochs": args.epochs,
        "arch": args.arch, "d": args.dim, "layers": args.layers,
        "heads": args.heads, "L": args.seq_len,
    })
    arch = cfg["arch"] or ("decoder" if task == "next_token" else "encoder")
    if task == "next_token" and arch != "decoder":
        raise ConfigError(
            "next-token pretraining is a causal task and requires --arch decoder"
        )

    frame = load_csv(args.data)
    n = frame.values.shape[1]
    model_config = _model_config_from(cfg, n, args.bins, arch, args.seed)
    run_config = pt.PretrainRunConfig(
        task=task, k=args.bins, batch_size=cfg["batch_size"], lr=cfg["lr"],
        epochs=cfg["epochs"], mask_ratio=cfg["mask_ratio"],
        mask_value=cfg["mask_value"], next_token_skip=cfg["next_token_skip"],
        val_fraction=cfg["val_fraction"], winsor_fraction=cfg["winsor_fraction"],
        weight_decay=cfg["weight_decay"], seed=args.seed,
    )

    def on_step(step, value):
        _log(f"step {step}: train loss {value:.4f}")

    model, scaler, curve = pt.run_pretraining(frame, run_config, model_config, on_step)
    save_checkpoint(model, scaler, args.out_checkpoint)
    if args.loss_csv:
        _write_text_atomic(args.loss_csv, _loss_csv(curve))
    outputs = [args.out_checkpoint] + ([args.loss_csv] if args.loss_csv else [])
    _write_manifest(
        args.out_checkpoint + ".manifest.json", "pretrain",
        {"task": task, "bins": args.bins, "run": asdict(run_config),
         "model": asdict(model_config)},
        args.seed, [args.data], outputs, started,
    )
    _log(f"pretraining done; checkpoint at {args.out_checkpoint}")
    return 0


def _split_windows(windows, labels, fractions, seed):
    num = len(windows)
    rng = np.random.default_rng(seed)
    order = rng.permutation(num)
    n_train = int(round(fractions[0] * num))
    n_val = int(round(fractions[1] * num))
    n_train = max(1, min(n_train, num - 2))
    n_val = max(1, min(n_val, num - n_train - 1))
    idx = {
        "train": order[:n_train],
        "validation": order[n_train: n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {
        name: ds.LabeledWindowSet(windows=windows[i], labels=labels[i])
        for name, i in idx.items()
    }


def _load_labeled_windows(data_path, L, scaler):
    frame = load_csv(data_path)
    if frame.labels is None:
        raise ConfigError(f"{data_path}: a label column is required")
    if scaler is None:
        scaler = fit_scaler(frame)
    scaled = preprocess_values(frame.values, scaler)
    batch, win_labels = segment_sequences(scaled, L, frame.labels)
    if batch.data.shape[0] == 0:
        raise ConfigError(f"{data_path}: fewer than L={L} timesteps, zero windows")
    labels = np.array([central_label(wl) for wl in win_labels])
    return batch.data, labels, scaler


def cmd_finetune(args):
    started = time.monotonic()
    file_cfg = _load_config_file(args.config)
    defaults = dict(_MODEL_DEFAULTS)
    defaults.update(
        lr=5e-5, batch_size=25, max_epochs=30, patience=5, weight_decay=0.01,
        split_fractions=[0.7, 0.15, 0.15], bins=100, arch="encoder",
    )
    cfg = _merged(defaults, file_cfg, {
        "lr": args.lr, "batch_size": args.batch_size,
        "max_epochs": args.max_epochs, "patience": args.patience,
        "d": args.dim, "layers": args.layers, "heads": args.heads,
        "L": args.seq_len,
    })

    pretrained = None
    scaler = None
    if args.checkpoint:
        pretrained, ckpt_config, ckpt_scaler = load_checkpoint(args.checkpoint)
        if pretrained.mode != "pretrain":
            raise ConfigError(f"{args.checkpoint}: expected a pretrain-mode checkpoint")
        L = ckpt_config.L
        if args.reuse_scaler:
            scaler = ckpt_scaler
    else:
        L = cfg["L"]

    windows, labels, scaler = _load_labeled_windows(args.data, L, scaler)
    num_classes = int(labels.max()) + 1
    splits = _split_windows(windows, labels, cfg["split_fractions"], args.seed)

    ft_config = ds.FinetuneConfig(
        lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], weight_decay=cfg["weight_decay"], seed=args.seed,
    )
    if pretrained is not None:
        model, metrics, curve = ds.run_finetune(
            splits, num_classes, ft_config, pretrained=pretrained
        )
    else:
        n = windows.shape[2]
        model_config = _model_config_from(cfg, n, cfg["bins"], cfg["arch"], args.seed)
        model, metrics, curve = ds.run_finetune(
            splits, num_classes, ft_config, model_config=model_config
        )

    save_checkpoint(model, scaler, args.out_checkpoint)
    confusion_path = args.confusion_csv or (
        os.path.splitext(args.metrics_json)[0] + "_confusion.csv"
    )
    ds.emit_confusion_csv(metrics, confusion_path)
    report = metrics.to_dict()
    report["confusion_csv_path"] = confusion_path
    _write_json_atomic(args.metrics_json, report)
    if args.loss_csv:
        _write_text_atomic(args.loss_csv, _loss_csv(curve))

    outputs = [args.out_checkpoint, args.metrics_json, confusion_path]
    if args.loss_csv:
        outputs.append(args.loss_csv)
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    _write_manifest(
        args.metrics_json + ".manifest.json", "finetune",
        {"resolved": cfg, "finetune": asdict(ft_config),
         "scratch": args.checkpoint is None, "num_classes": num_classes},
        args.seed, inputs, outputs, started,
    )
    _log(f"test accuracy {metrics.accuracy:.4f}, weighted F1 {metrics.weighted_f1:.4f}")
    return 0


def cmd_evaluate(args):
    started = time.monotonic()
    model, config, scaler = load_checkpoint(args.checkpoint)
    if model.mode != "classify":
        raise ConfigError(
            f"{args.checkpoint}: evaluation needs a downstream-mode checkpoint"
        )
    windows, labels, scaler = _load_labeled_windows(args.data, config.L, scaler)
    if args.split == "all":
        dataset = ds.LabeledWindowSet(windows=windows, labels=labels)
    else:
        splits = _split_windows(windows, labels, args.split_fractions, args.seed)
        dataset = splits[args.split]
    metrics = ds.evaluate(model, dataset)
    confusion_path = args.confusion_csv or (
        os.path.splitext(args.metrics_json)[0] + "_confusion.csv"
    )
    ds.emit_confusion_csv(metrics, confusion_path)
    report = metrics.to_dict()
    report["confusion_csv_path"] = confusion_path
    _write_json_atomic(args.metrics_json, report)
    _write_manifest(
        args.metrics_json + ".manifest.json", "evaluate",
        {"split": args.split, "split_fractions": args.split_fractions},
        args.seed, [args.checkpoint, args.data],
        [args.metrics_json, confusion_path], started,
    )
    _log(f"accuracy {metrics.accuracy:.4f}, weighted F1 {metrics.weighted_f1:.4f}")
    return 0


def cmd_inspect(args):
    if args.checkpoint:
        model, config, scaler = load_checkpoint(args.checkpoint)
        print(f"checkpoint: {args.checkpoint}")
        print(f"mode: {model.mode}")
        print(f"parameters: {count_parameters(model)}")
        for key, value in sorted(asdict(config).items()):
            print(f"config.{key}: {value}")
        if scaler is not None:
            for j in range(len(scaler.x_min)):
                print(
                    f"scaler.d{j}: min={scaler.x_min[j]:.6f} "
                    f"max={scaler.x_max[j]:.6f} mean={scaler.mean[j]:.6f}"
                )
    else:
        frame = load_csv(args.data)
        values = frame.values
        missing = ~np.isfinite(values)
        print(f"data: {args.data}")
        print(f"timesteps: {values.shape[0]}, dimensions: {values.shape[1]}")
        for j in range(values.shape[1]):
            col = values[:, j]
            finite = col[np.isfinite(col)]
            print(
                f"d{j}: min={finite.min():.6f} max={finite.max():.6f} "
                f"mean={finite.mean():.6f} missing={missing[:, j].mean():.4f}"
            )
        scaler = fit_scaler(values)
        scaled = preprocess_values(values, scaler)
        bins = discretize_bins(scaled, args.bins)
        counts = np.bincount(bins.labels.reshape(-1), minlength=args.bins)
        print(f"bin occupancy (k={args.bins}):")
        for b, count in enumerate(counts):
            print(f"bin {b}: {count}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="binformer",
        description="Binned self-supervised transformer for multichannel sensor sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset CSV")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--windows-per-class", type=int, required=True)
    p.add_argument("--length", type=int, default=300)
    p.add_argument("--dims", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True,
                   choices=["reconstruction", "mlm", "next-token"])
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--arch", choices=["encoder", "decoder"])
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for window classification")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--scratch", action="store_true")
    p.add_argument("--config")
    p.add_argument("--reuse-scaler", action="store_true",
                   help="reuse the checkpoint scaler instead of refitting")
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--metrics-json", required=True)
    p.add_argument("--confusion-csv")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a downstream checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "validation", "test"])
    p.add_argument("--split-fractions", type=float, nargs=3,
                   default=[0.7, 0.15, 0.15])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics-json", required=True)
    p.add_argument("--confusion-csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="report on a checkpoint or dataset")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--data")
    p.add_argument("--bins", type=int, default=100)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FitError, ContractError, FileNotFoundError) as e:
        _log(f"error: {e}")
        return 2
    except (DivergedError, NumericError) as e:
        _log(f"aborted: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
