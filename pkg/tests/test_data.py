import json
import struct

import numpy as np
import pytest
import torch

from eventgrounder.data import (
    SyntheticConfig,
    collate,
    decode_feature_matrix,
    encode_feature_matrix,
    generate_synthetic,
    load_dataset,
    read_feature_matrix,
    window_to_span,
    write_feature_matrix,
)
from eventgrounder.errors import (
    ConfigurationError,
    DatasetSchemaError,
    FeatureFormatError,
    FeatureLengthError,
    MissingFeatureError,
    SpanValidationError,
)
from eventgrounder.pseudo_events import event_boundaries


def write_record(root, record, video=None, text=None, name="annotations.jsonl"):
    """One-record dataset with features written next to it."""
    (root / "features").mkdir(exist_ok=True)
    if video is not None:
        write_feature_matrix(root / record["video_feature_ref"], video)
    if text is not None:
        write_feature_matrix(root / record["sentence_feature_ref"], text)
    (root / name).write_text(json.dumps(record) + "\n")
    return root / name


def base_record(**overrides):
    record = {
        "qid": 5, "vid": "clip_a", "duration": 60.0, "relevant_windows": [[15, 30]],
        "video_feature_ref": "features/clip_a_v.eatf", "sentence_feature_ref": "features/clip_a_s.eatf",
        "meta": None,
    }
    record.update(overrides)
    return record


# ---------------------------------------------------------------------------
# feature files


def test_feature_round_trip_exact(tmp_path, rng):
    m = rng.standard_normal((12, 8)).astype(np.float32)
    write_feature_matrix(tmp_path / "m.eatf", m)
    back = read_feature_matrix(tmp_path / "m.eatf")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, m)


def test_feature_header_bytes(tmp_path):
    write_feature_matrix(tmp_path / "m.eatf", np.zeros((12, 8), dtype=np.float32))
    raw = (tmp_path / "m.eatf").read_bytes()
    assert raw[:4] == b"EATF"
    assert raw[4:12] == struct.pack("<II", 12, 8)
    assert len(raw) == 12 + 12 * 8 * 4


def test_feature_payload_is_row_major_little_endian():
    m = np.array([[1.0, 2.0], [3.0, -0.5]], dtype=np.float32)
    payload = encode_feature_matrix(m)[12:]
    assert payload == struct.pack("<4f", 1.0, 2.0, 3.0, -0.5)


def test_bad_magic_rejected():
    blob = bytearray(encode_feature_matrix(np.ones((2, 2), dtype=np.float32)))
    blob[:4] = b"NOPE"
    with pytest.raises(FeatureFormatError):
        decode_feature_matrix(bytes(blob))


@pytest.mark.parametrize("delta", [-4, -1, 4])
def test_wrong_payload_length_rejected(delta):
    blob = encode_feature_matrix(np.ones((3, 2), dtype=np.float32))
    blob = blob[:delta] if delta < 0 else blob + b"\0" * delta
    with pytest.raises(FeatureLengthError):
        decode_feature_matrix(blob)


def test_truncated_header_rejected():
    with pytest.raises((FeatureFormatError, FeatureLengthError)):
        decode_feature_matrix(b"EATF\x01")


# ---------------------------------------------------------------------------
# annotations


def test_window_to_span_arithmetic():
    span = window_to_span([15, 30], 60)
    assert span.center == pytest.approx(0.375, abs=1e-12)
    assert span.width == pytest.approx(0.25, abs=1e-12)


def test_load_record_with_external_features(tmp_path, rng):
    video = rng.standard_normal((20, 7)).astype(np.float32)
    text = rng.standard_normal((3, 5)).astype(np.float32)
    write_record(tmp_path, base_record(), video, text)
    (sample,) = load_dataset(tmp_path)
    assert sample.qid == 5 and sample.vid == "clip_a"
    assert sample.gt_moments[0].as_tuple() == pytest.approx((0.375, 0.25))
    np.testing.assert_array_equal(sample.video_features.tokens.numpy(), video)
    assert len(sample.sentence_features) == 3


def test_load_accepts_jsonl_path(tmp_path, rng):
    path = write_record(tmp_path, base_record(), np.ones((6, 2), np.float32), np.ones((2, 2), np.float32),
                        name="custom.jsonl")
    assert len(list(load_dataset(path))) == 1


def test_missing_feature_names_vid(tmp_path):
    write_record(tmp_path, base_record())
    with pytest.raises(MissingFeatureError, match="clip_a"):
        list(load_dataset(tmp_path))


@pytest.mark.parametrize("field, value", [
    ("qid", "five"),
    ("duration", -1.0),
    ("relevant_windows", []),
    ("relevant_windows", [[1, 2, 3]]),
    ("video_feature_ref", 7),
])
def test_schema_errors_name_line_and_field(tmp_path, field, value):
    write_record(tmp_path, base_record(**{field: value}))
    with pytest.raises(DatasetSchemaError) as info:
        list(load_dataset(tmp_path))
    assert info.value.line == 1
    assert info.value.field == field
    assert field in str(info.value)


def test_missing_key_is_schema_error(tmp_path):
    record = base_record()
    del record["duration"]
    write_record(tmp_path, record)
    with pytest.raises(DatasetSchemaError, match="duration"):
        list(load_dataset(tmp_path))


@pytest.mark.parametrize("window", [[50, 70], [-1, 10], [30, 30]])
def test_window_outside_unit_interval_is_validation_error(tmp_path, window):
    write_record(tmp_path, base_record(relevant_windows=[window]))
    with pytest.raises(SpanValidationError):
        list(load_dataset(tmp_path))


def test_error_reports_the_offending_line(tmp_path):
    good = base_record()
    bad = base_record(qid=None)
    write_record(tmp_path, good, np.ones((6, 2), np.float32), np.ones((2, 2), np.float32))
    (tmp_path / "annotations.jsonl").write_text(json.dumps(good) + "\n\n" + json.dumps(bad) + "\n")
    with pytest.raises(DatasetSchemaError) as info:
        list(load_dataset(tmp_path))
    assert info.value.line == 3


def test_loading_is_lazy(tmp_path):
    write_record(tmp_path, base_record())
    it = load_dataset(tmp_path)  # nothing read yet, so no error here
    with pytest.raises(MissingFeatureError):
        next(iter(it))


# ---------------------------------------------------------------------------
# synthetic generation


def test_generate_counts_and_round_trip(tmp_path):
    cfg = SyntheticConfig(num_samples=10, num_frames=24, feature_dim=8, seed=4)
    generate_synthetic(cfg, tmp_path)
    lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert len(list((tmp_path / "features").glob("*_video.eatf"))) == 10
    assert len(list((tmp_path / "features").glob("*_text.eatf"))) == 10
    samples = list(load_dataset(tmp_path))
    for line, s in zip(lines, samples):
        rec = json.loads(line)
        starts = rec["meta"]["event_starts"] + [cfg.num_frames]
        t = rec["meta"]["target_event"]
        a, b = starts[t] / cfg.num_frames, starts[t + 1] / cfg.num_frames
        assert s.gt_moments[0].center == pytest.approx((a + b) / 2, abs=1e-9)
        assert s.gt_moments[0].width == pytest.approx(b - a, abs=1e-9)
        assert s.video_features.tokens.shape == (24, 8)
        assert s.sentence_features.tokens.shape == (6, 8)


def test_generate_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(num_samples=5, seed=9)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_generate_blocks_respect_minimum_length(tmp_path):
    cfg = SyntheticConfig(num_samples=30, num_frames=20, num_events_range=(2, 5), seed=1)
    generate_synthetic(cfg, tmp_path)
    for s in load_dataset(tmp_path):
        edges = s.meta["event_starts"] + [20]
        assert min(np.diff(edges)) >= 3
        assert 2 <= len(s.meta["event_starts"]) <= 5


def test_zero_noise_separability(tmp_path):
    cfg = SyntheticConfig(num_samples=3, noise_sigma=0.0, seed=2)
    generate_synthetic(cfg, tmp_path)
    for s in load_dataset(tmp_path):
        v = s.video_features.tokens.double().numpy()
        starts = s.meta["event_starts"]
        assert event_boundaries(v) == starts[1:]
        # sentence tokens equal the target block's prototype
        t = s.meta["target_event"]
        np.testing.assert_allclose(s.sentence_features.tokens.numpy()[0], v[starts[t]], atol=1e-7)


def test_held_out_split_is_disjoint(tmp_path):
    cfg = SyntheticConfig(num_samples=4, seed=3)
    generate_synthetic(cfg, tmp_path / "tr")
    generate_synthetic(cfg, tmp_path / "va", start_index=4)
    tr = {s.vid for s in load_dataset(tmp_path / "tr")}
    va = {s.vid for s in load_dataset(tmp_path / "va")}
    assert not tr & va


@pytest.mark.parametrize("kwargs", [
    {"num_events_range": (1, 3)},
    {"num_events_range": (2, 20)},
    {"noise_sigma": -0.1},
    {"num_samples": 0},
])
def test_invalid_synthetic_config(tmp_path, kwargs):
    with pytest.raises(ConfigurationError):
        generate_synthetic(SyntheticConfig(**kwargs), tmp_path)


def test_collate_pads_and_masks(small_samples):
    a, b = small_samples[:2]
    short = type(a)(a.qid, a.vid, a.duration, type(a.video_features)(a.video_features.tokens[:7]),
                    a.sentence_features, a.gt_moments, a.meta, a.relevant_windows)
    batch = collate([short, b])
    assert batch["video"].shape[:2] == (2, len(b.video_features))
    assert batch["video_mask"][0].sum() == 7
    assert torch.all(batch["video"][0, 7:] == 0)
    assert batch["video_mask"][1].all()
    assert [t.shape for t in batch["targets"]] == [(1, 2), (1, 2)]
