"""Synthetic planted-event datasets, the EATF feature format, and dataset loading.

A dataset is a directory holding ``annotations.jsonl`` (QVHighlights-style
records with times in seconds) plus the feature files the records reference.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .encoder import FeatureSequence
from .errors import (ConfigurationError, DatasetSchemaError, FeatureFormatError, FeatureLengthError,
                     InvalidSpanError, MissingFeatureError, SpanValidationError)
from .geometry import MomentSpan

MAGIC = b"EATF"
HEADER = struct.Struct("<4sII")
ANNOTATIONS = "annotations.jsonl"
MIN_BLOCK = 3


def write_feature_matrix(path, matrix) -> None:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def decode_feature_matrix(buf: bytes, name="<buffer>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FeatureFormatError(f"{name}: file shorter than the {HEADER.size}-byte header")
    magic, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FeatureFormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = rows * cols * 4
    payload = len(buf) - HEADER.size
    if payload != expected:
        raise FeatureLengthError(f"{name}: payload is {payload} bytes, header implies {expected} ({rows}x{cols})")
    return np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(rows, cols).astype(np.float32)


def encode_feature_matrix(matrix) -> bytes:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    return HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + m.tobytes(order="C")


def read_feature_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_feature_matrix(fh.read(), str(path))


@dataclass
class GroundingSample:
    qid: int
    vid: str
    duration: float
    video_features: FeatureSequence
    sentence_features: FeatureSequence
    gt_moments: list
    meta: dict = None
    relevant_windows: list = field(default_factory=list)

    def gt_tensor(self, dtype=torch.float32):
        return torch.tensor([m.as_tuple() for m in self.gt_moments], dtype=dtype)


def window_to_span(window, duration) -> MomentSpan:
    start, end = float(window[0]), float(window[1])
    return MomentSpan((start + end) / (2.0 * duration), (end - start) / duration)


def _require(record, key, types, line):
    if key not in record:
        raise DatasetSchemaError("missing required field", line, key)
    value = record[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise DatasetSchemaError(f"expected {types}, got {type(value).__name__}", line, key)
    return value


def parse_record(record, line, root: Path) -> GroundingSample:
    if not isinstance(record, dict):
        raise DatasetSchemaError("record must be a JSON object", line)
    qid = _require(record, "qid", int, line)
    vid = _require(record, "vid", str, line)
    duration = float(_require(record, "duration", (int, float), line))
    if duration <= 0:
        raise DatasetSchemaError("duration must be positive", line, "duration")
    windows = _require(record, "relevant_windows", list, line)
    if not windows:
        raise DatasetSchemaError("at least one relevant window is required", line, "relevant_windows")
    spans = []
    for win in windows:
        if not (isinstance(win, list) and len(win) == 2 and all(isinstance(v, (int, float)) for v in win)):
            raise DatasetSchemaError("each window must be [start, end]", line, "relevant_windows")
        s, e = win[0] / duration, win[1] / duration
        if not (0.0 <= s < e <= 1.0):
            raise SpanValidationError(f"window {win} maps to [{s:.4f}, {e:.4f}], outside [0, 1]",
                                      line, "relevant_windows")
        try:
            spans.append(window_to_span(win, duration))
        except InvalidSpanError as exc:
            raise SpanValidationError(str(exc), line, "relevant_windows") from exc
    video_ref = _require(record, "video_feature_ref", str, line)
    text_ref = _require(record, "sentence_feature_ref", str, line)
    meta = record.get("meta")
    if meta is not None and not isinstance(meta, dict):
        raise DatasetSchemaError("meta must be an object or null", line, "meta")

    feats = []
    for ref in (video_ref, text_ref):
        path = root / ref
        if not path.is_file():
            raise MissingFeatureError(vid, path)
        feats.append(read_feature_matrix(path))
    return GroundingSample(qid, vid, duration, FeatureSequence(torch.from_numpy(feats[0])),
                           FeatureSequence(torch.from_numpy(feats[1])), spans, meta, windows)


def annotation_path(path) -> Path:
    path = Path(path)
    return path / ANNOTATIONS if path.is_dir() else path


def load_dataset(path) -> Iterator[GroundingSample]:
    """Lazily yield validated samples from a dataset directory or JSONL file."""
    ann = annotation_path(path)
    if not ann.is_file():
        raise FileNotFoundError(f"no annotations at {ann}")
    root = ann.parent
    with open(ann, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetSchemaError(f"invalid JSON ({exc.msg})", lineno) from exc
            yield parse_record(record, lineno, root)


def collate(samples, dtype=torch.float32):
    """Pad a list of samples into batch tensors; masks are True at valid tokens."""
    b = len(samples)
    lv = max(len(s.video_features) for s in samples)
    ls = max(len(s.sentence_features) for s in samples)
    dv = samples[0].video_features.tokens.shape[1]
    ds = samples[0].sentence_features.tokens.shape[1]
    video = torch.zeros(b, lv, dv, dtype=dtype)
    text = torch.zeros(b, ls, ds, dtype=dtype)
    vmask = torch.zeros(b, lv, dtype=torch.bool)
    tmask = torch.zeros(b, ls, dtype=torch.bool)
    for i, s in enumerate(samples):
        n, m = len(s.video_features), len(s.sentence_features)
        video[i, :n] = s.video_features.tokens.to(dtype)
        vmask[i, :n] = s.video_features.mask
        text[i, :m] = s.sentence_features.tokens.to(dtype)
        tmask[i, :m] = s.sentence_features.mask
    return {
        "video": video,
        "video_mask": vmask,
        "text": text,
        "text_mask": tmask,
        "targets": [s.gt_tensor(dtype) for s in samples],
    }


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticConfig:
    num_samples: int = 100
    num_frames: int = 50
    num_tokens: int = 6
    feature_dim: int = 32
    num_events_range: tuple = (2, 5)
    noise_sigma: float = 0.05
    seed: int = 0
    clip_seconds: float = 2.0

    def validate(self):
        lo, hi = self.num_events_range
        if self.num_samples < 1:
            raise ConfigurationError("num_samples must be positive")
        if self.num_tokens < 1 or self.feature_dim < 1:
            raise ConfigurationError("num_tokens and feature_dim must be positive")
        if not (2 <= lo <= hi <= self.num_frames / 4):
            raise ConfigurationError(
                f"num_events_range {tuple(self.num_events_range)} must lie within [2, {self.num_frames / 4:g}]"
            )
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")


def _prototypes(rng, count, dim):
    raw = rng.standard_normal((dim, count))
    if count <= dim:
        q, r = np.linalg.qr(raw)
        protos = (q * np.sign(np.diag(r))).T
    else:
        protos = raw.T
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _block_starts(rng, num_frames, num_events):
    spare = num_frames - MIN_BLOCK * num_events
    # stars and bars: uniform composition of the spare frames into num_events parts
    bars = np.sort(rng.choice(spare + num_events - 1, size=num_events - 1, replace=False))
    parts = np.diff(np.concatenate([[-1], bars, [spare + num_events - 1]])) - 1
    lengths = parts + MIN_BLOCK
    return np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int).tolist()


def synthesize_sample(config: SyntheticConfig, index: int):
    """Deterministic arrays and record for one sample, seeded by (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    lo, hi = config.num_events_range
    num_events = int(rng.integers(lo, hi + 1))
    protos = _prototypes(rng, num_events, config.feature_dim)
    starts = _block_starts(rng, config.num_frames, num_events)
    bounds = starts + [config.num_frames]
    labels = np.repeat(np.arange(num_events), np.diff(bounds))
    video = protos[labels] + config.noise_sigma * rng.standard_normal((config.num_frames, config.feature_dim))
    target = int(rng.integers(num_events))
    text = protos[target] + config.noise_sigma * rng.standard_normal((config.num_tokens, config.feature_dim))
    t0, t1 = bounds[target], bounds[target + 1]
    vid = f"syn{index:06d}"
    record = {
        "qid": index,
        "vid": vid,
        "duration": config.num_frames * config.clip_seconds,
        "relevant_windows": [[t0 * config.clip_seconds, t1 * config.clip_seconds]],
        "video_feature_ref": f"features/{vid}_video.eatf",
        "sentence_feature_ref": f"features/{vid}_text.eatf",
        "meta": {
            "event_starts": starts,
            "prototype_ids": list(range(num_events)),
            "target_event": target,
            "num_frames": config.num_frames,
        },
    }
    return record, video.astype(np.float32), text.astype(np.float32)


def generate_synthetic(config: SyntheticConfig, out_dir, start_index=0) -> Path:
    """Write a planted-event dataset; identical config gives byte-identical files.

    Sample ``i`` depends only on ``(seed, i)``, so a held-out split can be drawn
    from the same generator by starting past the training indices.
    """
    config.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(start_index, start_index + config.num_samples):
        record, video, text = synthesize_sample(config, i)
        write_feature_matrix(out / record["video_feature_ref"], video)
        write_feature_matrix(out / record["sentence_feature_ref"], text)
        lines.append(json.dumps(record, sort_keys=True))
    tmp = out / (ANNOTATIONS + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, out / ANNOTATIONS)
    return out
