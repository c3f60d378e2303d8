import json

from m2se import reporting as rp
from m2se.metrics import MetricReport
from m2se.train import RunLog


def sample_reports():
    return {
        "MSA": MetricReport("MSA", {"acc2_nn": 0.8333333333333334, "acc2_np": 1.0},
                            {"items": 6, "zero_gold": 2, "parse_failures": 0}),
        "ER": MetricReport("ER", {"accuracy": 0.75, "weighted_f1": 0.7291666666666666},
                           {"items": 8, "parse_failures": 0}),
    }


def test_render_table_percent_and_fraction():
    table = rp.render_table(sample_reports())
    lines = table.splitlines()
    assert lines[0].split() == ["task", "metric", "value", "n"]
    assert set(lines[1]) == {"-", " "}
    body = "\n".join(lines[2:])
    assert "83.33" in body and "100.00" in body and "72.92" in body
    # ER sorts before MSA
    assert body.index("ER") < body.index("MSA")
    fractions = rp.render_table(sample_reports(), percent=False)
    assert "0.833333" in fractions and "1.000000" in fractions


def test_report_json_roundtrip(tmp_path):
    path = tmp_path / "report.json"
    rp.write_report_json(path, sample_reports())
    text = path.read_text()
    assert text.endswith("\n")
    loaded = rp.read_report_json(path)
    assert loaded == rp.report_payload(sample_reports())
    assert loaded["MSA"]["values"]["acc2_nn"] == 0.8333333333333334  # full precision
    # rendering is deterministic byte for byte
    rp.write_report_json(tmp_path / "again.json", sample_reports())
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_report_tsv_preserves_full_precision(tmp_path):
    path = tmp_path / "report.tsv"
    rp.write_report_tsv(path, sample_reports())
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["task", "metric", "value", "percent"]
    rows = {(cells[0], cells[1]): cells for cells in
            (line.split("\t") for line in lines[1:])}
    cells = rows[("MSA", "acc2_nn")]
    assert float(cells[2]) == 0.8333333333333334  # repr() round-trips exactly
    assert cells[3] == "83.33"
    assert rows[("ER", "weighted_f1")][3] == "72.92"


def test_figures_are_png_files(tmp_path):
    metrics_png = rp.render_metrics_figure(sample_reports(), tmp_path / "metrics.png")
    loss_png = rp.render_loss_figure({1: [5.0, 4.0, 3.0], 2: [3.5, 2.0]},
                                     tmp_path / "loss.png")
    for path in (metrics_png, loss_png):
        data = path.read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000


def test_loss_traces_roundtrip_through_manifest(tmp_path):
    manifest = tmp_path / "run_manifest.jsonl"
    log = RunLog(manifest)
    log.write("run_config", model={})
    log.write("loss_trace", stage_id=1, values=[5.5, 4.25])
    log.write("stage_end", stage_id=1)
    log.write("loss_trace", stage_id=2, values=[3.0])
    traces = rp.load_loss_traces(manifest)
    assert traces == {1: [5.5, 4.25], 2: [3.0]}


def test_predictions_roundtrip(tmp_path):
    rows = [
        {"record_id": "a:MSA", "task": "MSA", "prediction": "négative",
         "gold": "negative", "gold_score": -1.5},
        {"record_id": "b:ER", "task": "ER", "prediction": "joy", "gold": "joy"},
    ]
    path = tmp_path / "predictions.jsonl"
    rp.write_predictions(path, rows)
    assert rp.read_predictions(path) == rows
    raw = path.read_text().splitlines()
    assert json.loads(raw[0])["gold_score"] == -1.5
    assert "négative" in raw[0]  # ensure_ascii off, human-readable
