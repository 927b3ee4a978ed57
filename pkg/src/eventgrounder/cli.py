"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``predict`` and ``pseudo-events``.
Exit codes are fixed so that scripts can branch on them: 0 success, 2 bad
configuration or schema, 3 missing artifact, 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    SyntheticConfig,
    annotation_path,
    collate,
    generate_synthetic,
    load_dataset,
    parse_record,
    read_feature_matrix,
)
from .errors import (
    CheckpointVersionError,
    ConfigurationError,
    DatasetSchemaError,
    FeatureFormatError,
    FeatureLengthError,
    GroundingError,
    MissingFeatureError,
    TrainingDivergenceError,
)
from .losses import LossWeights
from .metrics import write_report, write_top1_csv
from .pseudo_events import event_boundaries
from .training import TrainConfig, baseline_config, evaluate, load_checkpoint, predict, train

logger = logging.getLogger("eventgrounder")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

SEED_ENV = "EATR_SEED"
MANIFEST_NAME = "run_manifest.json"

# flat config-file keys that live on the nested loss weights
_LOSS_KEYS = {"lambda_sal", "lambda_event", "alpha", "background_weight"}
_COST_KEYS = {"lambda_l1", "lambda_iou", "lambda_c"}


class MissingArtifact(GroundingError):
    """A file named on the command line does not exist."""


# ---------------------------------------------------------------------------
# manifests and hashing


def _hash_paths(paths) -> str:
    """Content hash over files (directories are walked in sorted order).

    File names enter the hash relative to the root they were found under, so a
    copied dataset hashes the same as the original.
    """
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            rel = f.relative_to(root).as_posix() if root.is_dir() else f.name
            h.update(rel.encode())
            h.update(b"\0")
            h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def write_manifest(path, command, config, inputs, outputs, seed, started):
    manifest = {
        "tool": "eventgrounder",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "input_hash": _hash_paths(inputs),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return manifest


def _manifest_for(output) -> Path:
    output = Path(output)
    return output.with_name(output.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# config resolution


def resolve_seed(flag_value, file_value=None) -> int:
    """Flag, then config file, then ``EATR_SEED``, then 0."""
    if flag_value is not None:
        return int(flag_value)
    if file_value is not None:
        return int(file_value)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _read_config_file(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"config file {path} not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return data


def _nest_loss_keys(flat):
    """Fold flat loss keys (``lambda_sal``, ``lambda_l1``, ...) into ``loss``."""
    out = dict(flat)
    loss = dict(out.pop("loss", None) or {})
    cost = dict(loss.pop("cost", None) or {})
    for key in list(out):
        if key in _LOSS_KEYS:
            loss[key] = out.pop(key)
        elif key in _COST_KEYS:
            cost[key] = out.pop(key)
    if loss or cost:
        base = LossWeights()
        merged = {f.name: getattr(base, f.name) for f in fields(LossWeights) if f.name != "cost"}
        merged.update(loss)
        merged["cost"] = {f.name: getattr(base.cost, f.name) for f in fields(base.cost)}
        merged["cost"].update(cost)
        out["loss"] = merged
    return out


TRAIN_FLAGS = ("d_model", "num_heads", "num_layers", "num_queries", "slot_iters", "dropout", "lr",
               "weight_decay", "batch_size", "epochs", "grad_clip_norm")


def resolve_train_config(args) -> TrainConfig:
    file_cfg = _read_config_file(args.config)
    profile = args.profile or file_cfg.pop("profile", "paper")
    file_cfg.pop("profile", None)
    overrides = dict(file_cfg)
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    for flag, key in (("no_event_reasoning", "event_reasoning"), ("no_event_loss", "event_loss"),
                      ("no_gf_layer", "gf_layer"), ("no_aux_loss", "aux_loss")):
        if getattr(args, flag, False):
            overrides[key] = False
    overrides["seed"] = resolve_seed(args.seed, file_cfg.get("seed"))
    try:
        config = TrainConfig.profile(profile, **_nest_loss_keys(overrides))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    if args.baseline:
        config = baseline_config(config)
    return config


# ---------------------------------------------------------------------------
# helpers


def _require_file(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} {path} not found")
    return path


def _load_samples(path):
    _require_file(path, "dataset")
    ann = annotation_path(path)
    if not ann.is_file():
        raise MissingArtifact(f"annotations {ann} not found")
    return list(load_dataset(path))


def _load_model(ckpt):
    _require_file(ckpt, "checkpoint")
    return load_checkpoint(ckpt)


def _plot_curves(out_dir, history, losses):
    """PNG loss/metric curves next to the CSVs; silently skipped without matplotlib."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping PNG plots")
        return []
    written = []
    if losses:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = [r["step"] for r in losses]
        for key in ("L_moment", "L_sal", "L_event", "total"):
            ax.plot(steps, [r[key] for r in losses], label=key, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "losses.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "losses.png")
    if history:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        epochs = [h["epoch"] for h in history]
        for key in ("R1@0.5", "R1@0.7", "mAP_avg"):
            ax.plot(epochs, [h[key] for h in history], marker=".", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("%")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "metrics.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "metrics.png")
    return written


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    try:
        lo, hi = (int(v) for v in args.num_events_range.split(","))
    except ValueError:
        raise ConfigurationError(
            f"--num-events-range expects 'min,max', got {args.num_events_range!r}"
        ) from None
    seed = resolve_seed(args.seed)
    config = SyntheticConfig(
        num_samples=args.num_samples, num_frames=args.num_frames, num_tokens=args.num_tokens,
        feature_dim=args.feature_dim, num_events_range=(lo, hi), noise_sigma=args.noise_sigma, seed=seed,
    )
    try:
        config.validate()
        if args.num_val < 0:
            raise ConfigurationError("num_val must be nonnegative")
    except ConfigurationError as exc:
        flag = next((f"--{k.replace('_', '-')}" for k in ("num_events_range", "num_samples", "num_tokens",
                                                            "feature_dim", "noise_sigma", "num_val")
                     if k in str(exc)), None)
        raise ConfigurationError(f"{flag}: {exc}" if flag else str(exc)) from None
    out = Path(args.out)
    generate_synthetic(config, out)
    outputs = [out]
    if args.num_val:
        val_cfg = SyntheticConfig(**{**config.__dict__, "num_samples": args.num_val})
        generate_synthetic(val_cfg, out / "val", start_index=args.num_samples)
    cfg = {**config.__dict__, "num_events_range": [lo, hi], "num_val": args.num_val}
    write_manifest(out / MANIFEST_NAME, "gen-data", cfg, [], outputs, seed, started)
    print(f"wrote {args.num_samples} samples to {out}" + (f" and {args.num_val} to {out / 'val'}"
                                                        if args.num_val else ""))
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    config = resolve_train_config(args)
    if args.threads:
        torch.set_num_threads(args.threads)
    data = Path(args.data)
    samples = _load_samples(data)
    val_path = Path(args.val) if args.val else (data / "val" if (data / "val").is_dir() else None)
    val = _load_samples(val_path) if val_path is not None else None
    resume = _load_model(args.resume) if args.resume else None
    out = Path(args.out)

    def report(entry):
        logger.info("epoch %d  loss %.4f  R1@0.5 %.2f  R1@0.7 %.2f  mAP %.2f", entry["epoch"],
                    entry["train_loss"], entry["R1@0.5"], entry["R1@0.7"], entry["mAP_avg"])

    result = train(config, samples, val, out_dir=out, max_steps=args.max_steps, resume=resume,
                   progress=report)
    outputs = [out / "best.ckpt", out / "last.ckpt", out / "history.csv", out / "losses.csv"]
    if args.plot:
        outputs += _plot_curves(out, result.history, result.losses)
    inputs = [data] + ([val_path] if val_path is not None and not str(val_path).startswith(str(data)) else [])
    write_manifest(out / MANIFEST_NAME, "train", config.to_dict(), inputs, outputs, config.seed, started)
    print(f"best epoch {result.best_epoch} (mAP_avg {result.best_metric:.2f}); checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = _load_model(args.ckpt)
    samples = _load_samples(args.data)
    report, preds = evaluate(ckpt.model, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    csv_path = Path(args.top1_csv) if args.top1_csv else out.with_suffix(".top1.csv")
    write_top1_csv(csv_path, [s.qid for s in samples], preds, [[m.as_tuple() for m in s.gt_moments]
                                                                for s in samples])
    write_manifest(_manifest_for(out), "eval", {"ckpt": str(args.ckpt)}, [args.ckpt, args.data],
                   [out, csv_path], ckpt.train_config.seed, started)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _read_sample_file(path):
    path = _require_file(path, "sample")
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"{path}: {exc}", 1) from None
    return parse_record(record, 1, path.parent)


@torch.no_grad()
def _attention_dump(model, sample):
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = collate([sample], dtype)
    out = model(batch["video"], batch["video_mask"], batch["text"], batch["text_mask"], need_weights=True)
    layers = [state.cross_attention[0].double().tolist() for state in out["states"]]
    return {
        "qid": sample.qid,
        "vid": sample.vid,
        "num_video": int(batch["video"].shape[1]),
        "num_sentence": int(batch["text"].shape[1]),
        "layers": layers,
    }


def cmd_predict(args) -> int:
    started = time.time()
    ckpt = _load_model(args.ckpt)
    if (args.sample is None) == (args.data is None):
        raise ConfigurationError("predict needs exactly one of --sample or --data")
    samples = [_read_sample_file(args.sample)] if args.sample else _load_samples(args.data)
    if args.top_k < 1:
        raise ConfigurationError("--top-k must be positive")
    preds = predict(ckpt.model, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for s, p in zip(samples, preds):
        top = p[:args.top_k]
        lines.append(json.dumps({
            "qid": s.qid,
            "vid": s.vid,
            "spans": [[c, w, conf] for (c, w), conf in top],
            "pred_relevant_windows": [[max(0.0, c - w / 2) * s.duration, min(1.0, c + w / 2) * s.duration, conf]
                                      for (c, w), conf in top],
        }))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs = [out]
    if args.dump_attention:
        dump = [_attention_dump(ckpt.model, s) for s in samples]
        path = Path(args.dump_attention)
        path.write_text(json.dumps(dump[0] if args.sample else dump), encoding="utf-8")
        outputs.append(path)
    inputs = [args.ckpt, args.sample or args.data]
    write_manifest(_manifest_for(out), "predict", {"ckpt": str(args.ckpt), "top_k": args.top_k}, inputs,
                   outputs, ckpt.train_config.seed, started)
    return EXIT_OK


def cmd_pseudo_events(args) -> int:
    started = time.time()
    if not args.features and not args.data:
        raise ConfigurationError("pseudo-events needs --features or --data")
    records = []
    for path in args.features or []:
        feats = read_feature_matrix(_require_file(path, "feature file"))
        records.append((Path(path).stem, feats))
    if args.data:
        for s in _load_samples(args.data):
            records.append((s.vid, s.video_features.tokens.numpy()))
    lines = []
    for vid, feats in records:
        bounds = event_boundaries(np.asarray(feats, dtype=np.float64))
        edges = [0] + bounds + [len(feats)]
        lines.append(json.dumps({"vid": vid, "events": [[a, b] for a, b in zip(edges[:-1], edges[1:])]}))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        inputs = list(args.features or []) + ([args.data] if args.data else [])
        write_manifest(_manifest_for(out), "pseudo-events", {}, inputs, [out], None, started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eventgrounder", description="Event-aware moment grounding.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic planted-event dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-samples", type=int, default=100)
    g.add_argument("--num-val", type=int, default=0, help="also write this many held-out samples to OUT/val")
    g.add_argument("--num-frames", type=int, default=50)
    g.add_argument("--num-tokens", type=int, default=6)
    g.add_argument("--feature-dim", type=int, default=32)
    g.add_argument("--num-events-range", default="2,5", help="min,max events per video")
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset directory or annotations file")
    t.add_argument("--val", help="validation set (default: DATA/val if present, else a split)")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--config", help="flat JSON config; flags override its values")
    t.add_argument("--profile", choices=("paper", "desk"))
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--threads", type=int, help="torch intra-op threads")
    t.add_argument("--plot", action="store_true", help="also write PNG curves")
    for name in TRAIN_FLAGS:
        kind = float if name in ("dropout", "lr", "weight_decay", "grad_clip_norm") else int
        t.add_argument("--" + name.replace("_", "-"), type=kind)
    t.add_argument("--no-event-reasoning", action="store_true")
    t.add_argument("--no-event-loss", action="store_true")
    t.add_argument("--no-gf-layer", action="store_true")
    t.add_argument("--no-aux-loss", action="store_true")
    t.add_argument("--baseline", action="store_true", help="all ablation flags off")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="metrics.json")
    e.add_argument("--top1-csv", help="per-sample top-1 IoU CSV (default: next to --out)")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write top-k spans per sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", help="single annotation record (JSON)")
    p.add_argument("--data", help="dataset directory or annotations file")
    p.add_argument("--out", default="predictions.jsonl")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--dump-attention", help="JSON file for per-layer decoder cross-attention")
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("pseudo-events", help="unsupervised event spans from video features")
    s.add_argument("--features", nargs="+", help="EATF video feature files")
    s.add_argument("--data", help="dataset directory or annotations file")
    s.add_argument("--out", help="JSONL output (default: stdout)")
    s.set_defaults(func=cmd_pseudo_events)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifact, MissingFeatureError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigurationError, DatasetSchemaError, FeatureFormatError, FeatureLengthError,
            CheckpointVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
