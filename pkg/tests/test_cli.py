import json

import pytest

from m2se.cli import main
from m2se.records import read_records
from m2se.scheduler import read_stream, stream_counts

from conftest import FIXTURES, TOY_DISTINCT, TOY_TASK_MATRIX

MANIFEST = FIXTURES / "toy_corpus" / "manifest.yaml"

MINI_CONFIG = """\
corpus_manifest: {manifest}
output_root: {output}
seed: 0
schedule:
  stage1:
    budget: 6
model:
  d_model: 16
  n_heads: 2
  n_layers: 2
  max_len: 640
  encoder:
    d_vision: 12
    image_size: 64
    patch_size: 32
    max_frames: 2
train:
  learning_rate: 2.0e-3
  epochs: 1
  batch_size: 2
  lora:
    r: 4
decode:
  max_new_tokens: 6
"""


@pytest.fixture()
def mini_config(tmp_path, monkeypatch):
    monkeypatch.delenv("M2SE_OUTPUT_ROOT", raising=False)
    path = tmp_path / "mini.yaml"
    path.write_text(MINI_CONFIG.format(manifest=MANIFEST, output=tmp_path / "out"))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_build_dataset_writes_artifacts(mini_config, tmp_path, capsys):
    assert run("build-dataset", "--config", mini_config) == 0
    out = capsys.readouterr().out
    assert "distinct samples: 12" in out
    root = tmp_path / "out" / "dataset"
    records = read_records(root / "records.jsonl")
    assert len(records) == sum(TOY_TASK_MATRIX.values())
    stats = json.loads((root / "stats.json").read_text())
    assert stats["task_counts"] == TOY_TASK_MATRIX
    assert stats["distinct_samples"] == TOY_DISTINCT
    assert (root / "rejections.jsonl").read_text() == ""

    # rebuilds are byte-identical
    first = (root / "records.jsonl").read_bytes()
    assert run("build-dataset", "--config", mini_config) == 0
    assert (root / "records.jsonl").read_bytes() == first


def test_build_dataset_task_subset(mini_config, tmp_path, capsys):
    assert run("build-dataset", "--config", mini_config, "--tasks", "MSA,ER") == 0
    records = read_records(tmp_path / "out" / "dataset" / "records.jsonl")
    assert {r.task.value for r in records} == {"MSA", "ER"}
    assert run("build-dataset", "--config", mini_config, "--tasks", "MSA,SONG") == 1
    assert "unknown task" in capsys.readouterr().err


def test_build_dataset_reject_gate(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("M2SE_OUTPUT_ROOT", raising=False)
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "rows.jsonl").write_text(
        '{"sample_id": "a", "media_ref": "x.png", "utterance_text": "t",'
        ' "sentiment_score": 1.0}\n'
        '{"sample_id": "b", "media_ref": "x.png", "utterance_text": "t",'
        ' "sentiment_score": 99.0}\n'
    )
    (corpus / "manifest.yaml").write_text(
        "sources:\n  - name: broken\n    samples: rows.jsonl\n"
    )
    config = tmp_path / "run.yaml"
    config.write_text(
        f"corpus_manifest: {corpus / 'manifest.yaml'}\n"
        f"output_root: {tmp_path / 'out'}\n"
    )
    assert run("build-dataset", "--config", config) == 1
    assert "rejected rows: 1" in capsys.readouterr().err
    rejections = (tmp_path / "out" / "dataset" / "rejections.jsonl").read_text()
    assert "outside" in rejections
    assert run("build-dataset", "--config", config, "--allow-rejects") == 0


def test_plan_is_deterministic_and_prints_provenance(mini_config, capsys):
    assert run("plan", "--config", mini_config) == 0
    first = capsys.readouterr().out
    assert "stage 1: budget=20" not in first  # mini config uses 6
    assert "stage 1: budget=6" in first
    assert "stage 2: budget=remaining" in first
    assert "MSA=0.4000" in first and "ER=0.2000" in first

    assert run("plan", "--config", mini_config) == 0
    assert capsys.readouterr().out == first

    assert run("plan", "--config", mini_config, "--print") == 0
    verbose = capsys.readouterr().out
    assert "budget source: config override" in verbose
    assert "published" in verbose

    assert run("plan", "--config", mini_config, "--seed", "9") == 0
    assert "seed=9" in capsys.readouterr().out


def test_train_stage_flow_and_resume(mini_config, tmp_path, capsys):
    train_dir = tmp_path / "out" / "train"
    assert run("train", "--config", mini_config, "--stage", "1") == 0
    out = capsys.readouterr().out
    assert "stage 1:" in out and "stage 2:" not in out
    assert (train_dir / "stage1.pt").exists()
    assert not (train_dir / "stage2.pt").exists()
    # both stream files exist even though only stage 1 trained
    counts1 = stream_counts(read_stream(train_dir / "stage1_stream.jsonl"))
    counts2 = stream_counts(read_stream(train_dir / "stage2_stream.jsonl"))
    assert counts1 == {"MSA": 2, "FER": 3, "ER": 1}
    assert set(counts2) == {"MSA", "ER", "ERI", "ECPE"}

    assert run("train", "--config", mini_config,
               "--resume", train_dir / "stage1.pt") == 0
    out = capsys.readouterr().out
    assert "stage 2:" in out and "stage 1:" not in out
    assert (train_dir / "stage2.pt").exists()
    assert (train_dir / "loss_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    manifest = [json.loads(line) for line in
                (train_dir / "run_manifest.jsonl").read_text().splitlines()]
    assert manifest[0]["event"] == "run_config"
    assert manifest[0]["train"]["lora"]["r"] == 4
    assert manifest[0]["stages_trained"] == [2]
    assert manifest[0]["provenance"]["stage1.budget"] == "config override"


def test_evaluate_checkpoint_end_to_end(mini_config, tmp_path, capsys):
    assert run("train", "--config", mini_config) == 0
    capsys.readouterr()
    assert run("evaluate", "--config", mini_config, "--tasks", "MSA") == 0
    out = capsys.readouterr().out
    assert "acc2_nn" in out and "acc2_np" in out

    eval_dir = tmp_path / "out" / "eval"
    rows = [json.loads(line) for line in
            (eval_dir / "predictions.jsonl").read_text().splitlines()]
    assert len(rows) == TOY_TASK_MATRIX["MSA"]
    assert all("gold_score" in row for row in rows)
    report = json.loads((eval_dir / "report.json").read_text())
    assert set(report) == {"MSA"}
    assert report["MSA"]["counts"]["items"] == TOY_TASK_MATRIX["MSA"]
    assert report["MSA"]["counts"]["zero_gold"] == 1  # s03 scores exactly 0
    assert (eval_dir / "report.tsv").exists()
    assert (eval_dir / "metrics.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    # a second decode of the same checkpoint is byte-identical
    first = (eval_dir / "predictions.jsonl").read_bytes()
    assert run("evaluate", "--config", mini_config, "--tasks", "MSA") == 0
    capsys.readouterr()
    assert (eval_dir / "predictions.jsonl").read_bytes() == first


def test_evaluate_requires_checkpoint(mini_config, capsys):
    assert run("evaluate", "--config", mini_config) == 1
    err = capsys.readouterr().err
    assert "error:" in err and "no checkpoint" in err


def test_evaluate_golden_predictions(mini_config, tmp_path, capsys,
                                     golden_predictions, golden_report):
    assert run("evaluate", "--config", mini_config,
               "--predictions", golden_predictions) == 0
    out = capsys.readouterr().out
    assert "83.33" in out  # acc2_nn as a percent in the table
    report = json.loads((tmp_path / "out" / "eval" / "report.json").read_text())
    expected = json.loads(golden_report.read_text())
    assert set(report) == set(expected)
    for task, want in expected.items():
        assert report[task]["counts"] == want["counts"]
        for name, value in want["values"].items():
            assert report[task]["values"][name] == pytest.approx(value, abs=1e-12)


def test_evaluate_scheme_flag(mini_config, tmp_path, capsys, golden_predictions):
    assert run("evaluate", "--config", mini_config,
               "--predictions", golden_predictions, "--scheme", "NP") == 0
    capsys.readouterr()
    report = json.loads((tmp_path / "out" / "eval" / "report.json").read_text())
    assert set(report["MSA"]["values"]) == {"acc2_np"}


def test_stats_prints_reference_comparison(mini_config, capsys):
    assert run("stats", "--config", mini_config) == 0
    out = capsys.readouterr().out
    assert "reference" in out
    assert "25859" in out and "32940" in out
    assert f"distinct  {TOY_DISTINCT:>5}" in out


def test_output_root_env_override(mini_config, tmp_path, monkeypatch):
    override = tmp_path / "elsewhere"
    monkeypatch.setenv("M2SE_OUTPUT_ROOT", str(override))
    assert run("build-dataset", "--config", mini_config) == 0
    assert (override / "dataset" / "records.jsonl").exists()
