import argparse
import json

import pytest

from eventgrounder import cli
from eventgrounder.errors import TrainingDivergenceError

TINY = ["--profile", "desk", "--d-model", "8", "--num-heads", "2", "--num-layers", "2", "--num-queries", "3",
        "--slot-iters", "2", "--batch-size", "8", "--epochs", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus a trained tiny checkpoint, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "d", "--num-samples", 24, "--num-val", 8, "--num-frames", 20,
               "--feature-dim", 8, "--num-events-range", "2,4", "--seed", 7) == 0
    assert run("train", "--data", root / "d", "--out", root / "run", *TINY) == 0
    return root


def test_gen_data_writes_records(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--num-samples", 100, "--seed", 7) == 0
    lines = (tmp_path / "d" / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 100
    manifest = json.loads((tmp_path / "d" / cli.MANIFEST_NAME).read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 7


def test_gen_data_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--num-samples", 6, "--num-val", 2, "--seed", 1) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*")
                   if p.name != cli.MANIFEST_NAME)
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("value", ["1,3", "2,40", "two"])
def test_gen_data_bad_event_range(tmp_path, capsys, value):
    assert run("gen-data", "--out", tmp_path / "d", "--num-events-range", value) == cli.EXIT_CONFIG
    assert "--num-events-range" in capsys.readouterr().err


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "13")
    assert run("gen-data", "--out", tmp_path / "d", "--num-samples", 2) == 0
    assert json.loads((tmp_path / "d" / cli.MANIFEST_NAME).read_text())["seed"] == 13
    assert cli.resolve_seed(4, 5) == 4
    assert cli.resolve_seed(None, 5) == 5
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert run("gen-data", "--out", tmp_path / "e", "--num-samples", 2) == cli.EXIT_CONFIG


def test_train_outputs_and_manifest(workspace):
    run_dir = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "history.csv", "losses.csv", cli.MANIFEST_NAME):
        assert (run_dir / name).is_file()
    manifest = json.loads((run_dir / cli.MANIFEST_NAME).read_text())
    assert manifest["config"]["d_model"] == 8
    assert len(manifest["input_hash"]) == 64


def test_eval_writes_five_fields(workspace, tmp_path):
    out = tmp_path / "metrics.json"
    assert run("eval", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "d" / "val",
               "--out", out) == 0
    report = json.loads(out.read_text())
    assert set(report) == {"R1@0.5", "R1@0.7", "mAP@0.5", "mAP@0.75", "mAP_avg"}
    assert (tmp_path / "metrics.top1.csv").read_text().count("\n") == 9


def test_eval_is_idempotent(workspace, tmp_path):
    manifests = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.json"
        assert run("eval", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "d" / "val",
                   "--out", out) == 0
        manifests.append(json.loads((tmp_path / f"{name}.manifest.json").read_text()))
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    for m in manifests:
        m.pop("wall_clock_seconds")
        m.pop("outputs")
    assert manifests[0] == manifests[1]


def test_missing_checkpoint_exit_3(workspace, tmp_path):
    assert run("eval", "--ckpt", tmp_path / "nope.ckpt", "--data", workspace / "d") == cli.EXIT_MISSING


def test_missing_dataset_exit_3(tmp_path):
    assert run("train", "--data", tmp_path / "missing", *TINY) == cli.EXIT_MISSING


def test_schema_error_exit_2(tmp_path):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "annotations.jsonl").write_text('{"qid": "x"}\n')
    assert run("train", "--data", tmp_path / "bad", *TINY) == cli.EXIT_CONFIG


def test_divergence_exit_4(workspace, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise TrainingDivergenceError("loss became nan", {"saliency": float("nan")})

    monkeypatch.setattr(cli, "train", explode)
    assert run("train", "--data", workspace / "d", "--out", tmp_path / "r", *TINY) == cli.EXIT_DIVERGED


def test_config_file_merged_flags_win(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"profile": "desk", "epochs": 7, "lr": 0.01, "lambda_event": 0.5,
                               "lambda_l1": 3, "seed": 21}))
    ns = argparse.Namespace(config=cfg, profile=None, seed=None, baseline=False,
                            **{name: None for name in cli.TRAIN_FLAGS})
    ns.epochs = 2
    config = cli.resolve_train_config(ns)
    assert config.epochs == 2
    assert config.lr == 0.01
    assert config.d_model == 64
    assert config.seed == 21
    assert config.loss.lambda_event == 0.5 and config.loss.cost.lambda_l1 == 3
    assert config.loss.cost.lambda_c == 4


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert run("train", "--data", tmp_path, "--config", cfg) in (cli.EXIT_CONFIG, cli.EXIT_MISSING)
    ns = argparse.Namespace(config=cfg, profile=None, seed=None, baseline=False,
                            **{name: None for name in cli.TRAIN_FLAGS})
    with pytest.raises(cli.ConfigurationError):
        cli.resolve_train_config(ns)


def test_pseudo_events_recovers_planted_blocks(tmp_path):
    assert run("gen-data", "--out", tmp_path / "z", "--num-samples", 5, "--noise-sigma", 0, "--seed", 3) == 0
    records = [json.loads(l) for l in (tmp_path / "z" / "annotations.jsonl").read_text().splitlines()]
    feats = [tmp_path / "z" / r["video_feature_ref"] for r in records]
    out = tmp_path / "events.jsonl"
    assert run("pseudo-events", "--features", *feats, "--out", out) == 0
    got = [json.loads(l) for l in out.read_text().splitlines()]
    for rec, ev in zip(records, got):
        edges = rec["meta"]["event_starts"] + [rec["meta"]["num_frames"]]
        assert ev["events"] == [[a, b] for a, b in zip(edges[:-1], edges[1:])]


def test_pseudo_events_from_dataset_to_stdout(workspace, capsys):
    assert run("pseudo-events", "--data", workspace / "d" / "val") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8
    first = json.loads(lines[0])
    assert first["events"][0][0] == 0 and first["events"][-1][1] == 20


def test_predict_with_attention_dump(workspace, tmp_path):
    line = (workspace / "d" / "annotations.jsonl").read_text().splitlines()[0]
    sample = workspace / "d" / "one.json"
    sample.write_text(line)
    out, att = tmp_path / "p.jsonl", tmp_path / "att.json"
    assert run("predict", "--ckpt", workspace / "run" / "best.ckpt", "--sample", sample, "--out", out,
               "--dump-attention", att, "--top-k", 2) == 0
    pred = json.loads(out.read_text())
    assert len(pred["spans"]) == 2 and len(pred["pred_relevant_windows"]) == 2
    assert pred["spans"][0][2] >= pred["spans"][1][2]
    dump = json.loads(att.read_text())
    assert len(dump["layers"]) == 2  # one per decoder layer
    for matrix in dump["layers"]:
        assert len(matrix) == 3
        assert all(len(row) == 20 + 6 for row in matrix)
        assert all(abs(sum(row) - 1) < 1e-5 for row in matrix)


def test_predict_needs_one_source(workspace):
    assert run("predict", "--ckpt", workspace / "run" / "best.ckpt") == cli.EXIT_CONFIG


def test_inputs_not_mutated(workspace, tmp_path):
    before = cli._hash_paths([workspace / "d"])
    run("pseudo-events", "--data", workspace / "d", "--out", tmp_path / "e.jsonl")
    run("eval", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "d", "--out", tmp_path / "m.json")
    assert cli._hash_paths([workspace / "d"]) == before
