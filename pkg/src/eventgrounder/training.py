"""Optimization loop, evaluation, checkpointing and ablation variants."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .assignment import CostWeights
from .data import collate, decode_feature_matrix, encode_feature_matrix
from .errors import CheckpointVersionError, ConfigurationError, TrainingDivergenceError
from .losses import GroundingCriterion, LossWeights
from .metrics import evaluation_report
from .model import GroundingModel, ModelConfig, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "eventgrounder-checkpoint"
CHECKPOINT_VERSION = 1
MIN_WIDTH = 1e-6
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    d_model: int = 256
    num_heads: int = 8
    num_layers: int = 3
    num_queries: int = 10
    slot_iters: int = 3
    dropout: float = 0.1
    attn_dropout: float = 0.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    grad_clip_norm: float = 0.1
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    aux_loss: bool = True
    event_reasoning: bool = True
    event_loss: bool = True
    gf_layer: bool = True
    tsm_include_pe: bool = False
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            loss = dict(self.loss)
            loss["cost"] = CostWeights(**loss.get("cost", {}))
            self.loss = LossWeights(**loss)
        for name in ("d_model", "num_heads", "num_layers", "num_queries", "slot_iters", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")

    @classmethod
    def profile(cls, name="paper", **overrides):
        """``paper`` keeps the full-scale defaults; ``desk`` is the CPU-sized variant."""
        if name == "paper":
            base = {}
        elif name == "desk":
            # 1e-4 with clip 0.1 stalls near 60% R1@0.5 at this scale within 30 epochs
            base = {"d_model": 64, "epochs": 30, "batch_size": 32, "num_queries": 5,
                    "lr": 5e-4, "grad_clip_norm": 1.0, "dropout": 0.0}
        else:
            raise ConfigurationError(f"unknown profile {name!r}")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def model_config(self, video_dim, text_dim) -> ModelConfig:
        return ModelConfig(
            video_dim=video_dim, text_dim=text_dim, d_model=self.d_model, num_heads=self.num_heads,
            enc_layers=self.num_layers, dec_layers=self.num_layers, num_queries=self.num_queries,
            slot_iters=self.slot_iters, dropout=self.dropout, attn_dropout=self.attn_dropout, event_reasoning=self.event_reasoning,
            gf_layer=self.gf_layer, tsm_include_pe=self.tsm_include_pe,
        )

    def ablation(self, event_reasoning=True, event_loss=True, gf_layer=True):
        return replace(self, event_reasoning=event_reasoning, event_loss=event_loss, gf_layer=gf_layer)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Input-agnostic queries, no event loss, plain first decoder layer."""
    return config.ablation(event_reasoning=False, event_loss=False, gf_layer=False)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: GroundingModel
    train_config: TrainConfig
    optimizer_state: dict = None
    epoch: int = 0
    global_step: int = 0
    best_metric: float = -math.inf
    torch_rng: torch.Tensor = None
    extra: dict = field(default_factory=dict)


def _as_matrix(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().to(torch.float32).numpy()
    return a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1)


def save_checkpoint(path, model: GroundingModel, train_config: TrainConfig, optimizer=None, epoch=0,
                    global_step=0, best_metric=-math.inf, extra=None) -> None:
    """Write a zip container: manifest JSON plus one EATF matrix per tensor."""
    params = {}
    for name, t in model.state_dict().items():
        if not torch.isfinite(t).all():
            raise TrainingDivergenceError(f"refusing to checkpoint non-finite tensor {name}")
        params[name] = t
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "config_hash": train_config.digest(),
        "epoch": epoch,
        "global_step": global_step,
        "best_metric": best_metric if math.isfinite(best_metric) else None,
        "params": {name: list(t.shape) for name, t in params.items()},
        "extra": extra or {},
    }
    blobs = {f"params/{name}.eatf": encode_feature_matrix(_as_matrix(t)) for name, t in params.items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"param_groups": state["param_groups"], "state": {}}
        for pid, st in state["state"].items():
            entry = {}
            for key, value in st.items():
                if torch.is_tensor(value) and value.dim() > 0:
                    blobs[f"optim/{pid}/{key}.eatf"] = encode_feature_matrix(_as_matrix(value))
                    entry[key] = {"shape": list(value.shape)}
                else:
                    entry[key] = {"scalar": float(value)}
            opt_meta["state"][str(pid)] = entry
        manifest["optimizer"] = opt_meta
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    entries = {"manifest.json": json.dumps(manifest, indent=1, sort_keys=True).encode(), **blobs,
               "rng/torch.bin": torch.random.get_rng_state().numpy().tobytes()}
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, blob in entries.items():
            # fixed timestamps keep reruns byte-identical
            zf.writestr(zipfile.ZipInfo(name, date_time=ZIP_EPOCH), blob)
    tmp.replace(path)


def load_checkpoint(path, expected_config: TrainConfig = None) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint {manifest.get('format')} v{manifest.get('version')} is incompatible "
                f"with {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"
            )
        train_config = TrainConfig.from_dict(manifest["train_config"])
        if expected_config is not None and expected_config.digest() != manifest["config_hash"]:
            warnings.warn(f"{path}: checkpoint config hash {manifest['config_hash']} differs from "
                          f"the requested config {expected_config.digest()}", stacklevel=2)
        model = GroundingModel(ModelConfig(**manifest["model_config"]))
        state = {}
        for name, shape in manifest["params"].items():
            mat = decode_feature_matrix(zf.read(f"params/{name}.eatf"), name)
            state[name] = torch.from_numpy(mat.copy()).reshape(shape)
        model.load_state_dict(state)
        opt_state = None
        if "optimizer" in manifest:
            meta = manifest["optimizer"]
            opt_state = {"param_groups": meta["param_groups"], "state": {}}
            for pid, entry in meta["state"].items():
                st = {}
                for key, spec in entry.items():
                    if "scalar" in spec:
                        st[key] = torch.tensor(spec["scalar"])
                    else:
                        mat = decode_feature_matrix(zf.read(f"optim/{pid}/{key}.eatf"), key)
                        st[key] = torch.from_numpy(mat.copy()).reshape(spec["shape"])
                opt_state["state"][int(pid)] = st
        rng = torch.from_numpy(np.frombuffer(zf.read("rng/torch.bin"), dtype=np.uint8).copy())
    best = manifest.get("best_metric")
    return Checkpoint(model, train_config, opt_state, manifest["epoch"], manifest["global_step"],
                      -math.inf if best is None else best, rng, manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def predict(model: GroundingModel, samples, batch_size=64):
    """Per-sample lists of ``((center, width), confidence)`` sorted by confidence."""
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i:i + batch_size], dtype)
        out = model(batch["video"], batch["video_mask"], batch["text"], batch["text_mask"])
        spans = out["pred_spans"].double()
        spans[..., 1] = spans[..., 1].clamp(min=MIN_WIDTH)
        for s, c in zip(spans.tolist(), out["pred_confidence"].double().tolist()):
            order = sorted(range(len(c)), key=lambda k: -c[k])
            preds.append([(tuple(s[k]), c[k]) for k in order])
    return preds


def evaluate(model, samples, batch_size=64):
    preds = predict(model, samples, batch_size)
    gts = [[m.as_tuple() for m in s.gt_moments] for s in samples]
    return evaluation_report(preds, gts), preds


# ---------------------------------------------------------------------------
# training


LOSS_FIELDS = ["step", "L_moment", "L_sal", "L_event", "total"]
HISTORY_FIELDS = ["epoch", "train_loss", "R1@0.5", "R1@0.7", "mAP@0.5", "mAP@0.75", "mAP_avg"]


@dataclass
class TrainResult:
    model: GroundingModel
    history: list
    losses: list
    best_epoch: int
    best_metric: float
    global_step: int


def split_train_val(samples, val_fraction, seed):
    order = np.random.default_rng([seed, 7919]).permutation(len(samples))
    n_val = max(1, int(round(len(samples) * val_fraction)))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


class _CsvStream:
    def __init__(self, path, header, append=False):
        self.fh = None
        if path is not None:
            exists = Path(path).exists() and append
            self.fh = open(path, "a" if append else "w", newline="", encoding="utf-8")
            self.writer = csv.writer(self.fh)
            if not exists:
                self.writer.writerow(header)

    def write(self, row):
        if self.fh is not None:
            self.writer.writerow(row)
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(config: TrainConfig, train_samples, val_samples=None, out_dir=None, max_steps=None,
          resume: Checkpoint = None, eval_every=1, progress=None) -> TrainResult:
    """Train on ``train_samples`` and select the best epoch by validation mean AP.

    With ``out_dir`` the loss stream (``losses.csv``), per-epoch history
    (``history.csv``), ``best.ckpt`` and ``last.ckpt`` are written there.
    ``max_steps`` stops early (mid-epoch allowed) and ``resume`` continues a run
    from a checkpoint taken by a previous call.
    """
    train_samples = list(train_samples)
    if val_samples is None:
        train_samples, val_samples = split_train_val(train_samples, config.val_fraction, config.seed)
    val_samples = list(val_samples)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    video_dim = train_samples[0].video_features.tokens.shape[1]
    text_dim = train_samples[0].sentence_features.tokens.shape[1]
    if resume is not None:
        model = resume.model
        start_step, best_metric = resume.global_step, resume.best_metric
    else:
        model = build_model(config.model_config(video_dim, text_dim), seed=config.seed)
        start_step, best_metric = 0, -math.inf
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)
    if resume is not None and resume.torch_rng is not None:
        torch.random.set_rng_state(resume.torch_rng)
    else:
        torch.manual_seed(config.seed)

    criterion = GroundingCriterion(config.loss, aux_loss=config.aux_loss, use_event_loss=config.event_loss)
    loss_csv = _CsvStream(out / "losses.csv" if out else None, LOSS_FIELDS, append=resume is not None)
    hist_csv = _CsvStream(out / "history.csv" if out else None, HISTORY_FIELDS, append=resume is not None)

    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    history, losses = [], []
    best_epoch = resume.extra.get("best_epoch", -1) if resume is not None else -1
    step = start_step
    try:
        for epoch in range(start_step // steps_per_epoch, config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
            epoch_losses = []
            completed = True
            for b in range(steps_per_epoch):
                if epoch * steps_per_epoch + b < step:
                    continue
                if max_steps is not None and step >= max_steps:
                    completed = False
                    break
                model.train()
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = collate([train_samples[i] for i in idx])
                out_t = model(batch["video"], batch["video_mask"], batch["text"], batch["text_mask"])
                rng = np.random.default_rng([config.seed, step, 1])
                try:
                    parts = criterion(out_t, batch["targets"], rng)
                except TrainingDivergenceError as exc:
                    _dump_divergence(out, step, exc, model, config, optimizer, epoch, best_metric)
                    raise
                optimizer.zero_grad()
                parts["total"].backward()
                if config.grad_clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
                optimizer.step()
                step += 1
                row = [step] + [float(parts[k].detach()) for k in ("moment", "saliency", "event", "total")]
                losses.append(dict(zip(LOSS_FIELDS, row)))
                loss_csv.write(row)
                epoch_losses.append(row[-1])
            if not completed:
                break
            if (epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs:
                report, _ = evaluate(model, val_samples)
                entry = {"epoch": epoch + 1, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else
                         float("nan"), **report}
                history.append(entry)
                hist_csv.write([entry[k] for k in HISTORY_FIELDS])
                if progress is not None:
                    progress(entry)
                if report["mAP_avg"] > best_metric:
                    best_metric, best_epoch = report["mAP_avg"], epoch + 1
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", model, config, optimizer, epoch + 1, step,
                                        best_metric, {"best_epoch": best_epoch})
            if max_steps is not None and step >= max_steps:
                break
    finally:
        loss_csv.close()
        hist_csv.close()
    if out is not None:
        save_checkpoint(out / "last.ckpt", model, config, optimizer, step // steps_per_epoch, step,
                        best_metric, {"best_epoch": best_epoch})
    return TrainResult(model, history, losses, best_epoch, best_metric, step)


def _dump_divergence(out, step, exc, model, config, optimizer, epoch, best_metric):
    logger.error("training diverged at step %d: %s", step, exc)
    if out is None:
        return
    with open(out / "divergence.json", "w", encoding="utf-8") as fh:
        json.dump({"step": step, "error": str(exc), "components": exc.diagnostics}, fh, indent=2)
    # parameters are still those of the last successful step
    save_checkpoint(out / "last_good.ckpt", model, config, optimizer, epoch, step, best_metric)


def epochs_to_reach(history, metric="R1@0.5", target=80.0):
    """First epoch whose ``metric`` reaches ``target`` (percent), or None."""
    for entry in history:
        if entry[metric] >= target:
            return entry["epoch"]
    return None
