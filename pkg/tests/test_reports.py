import io
import json

import pandas as pd
import pytest

from detector.reports import ReportFormat, emit_report, report_frame, results_from_json, scenario_label
from detector.sweep import MethodResult, Scenario, ScenarioResult


def _result(delta, accs, error=None, mar=0.02, runtime=1.5):
    scenario = Scenario("delta", delta, 0.0, 0.01, "case14", 0)
    methods = {
        name: MethodResult(acc=acc, acc_std=0.0, mar=mar, mar_std=0.0, runtime=runtime, trials=1)
        for name, acc in accs.items()
    }
    return ScenarioResult(scenario=scenario, methods=methods, sizes={"source": 200}, error=error)


@pytest.fixture
def results():
    return [
        _result(0.0, {"proposed": 1.0, "dnn_b": 0.9988}),
        _result(0.5, {"proposed": 0.9731, "dnn_b": 0.8012}),
    ]


def test_labels():
    assert scenario_label(Scenario("delta", 0.5, 0.0, 0.01, "case14", 0)) == "δ=50%"
    assert scenario_label(Scenario("sigma", 0.5, 0.01, 0.01, "case14", 0)) == "σ=1%"


def test_markdown_layout(results):
    text = emit_report(results, include_runtime=True)
    assert "## Detection accuracy ACC (%)" in text
    assert "## Missing alarm rate MAR (%)" in text
    assert "| Type | Algorithm | δ=0% | δ=50% |" in text
    assert "| Transfer | Proposed | 100.00 | 97.31 |" in text
    assert "| Data-driven | DNN-B | 99.88 | 80.12 |" in text
    assert "| Data-driven | SVM | not implemented | not implemented |" in text
    assert "## Runtime (s)" in text


def test_runtime_and_placeholders_can_be_left_out(results):
    text = emit_report(results, include_runtime=False, include_placeholders=False)
    assert "Runtime" not in text and "SVM" not in text
    frame = report_frame(results, include_placeholders=False)
    assert list(frame["Algorithm"]) == ["DNN-B", "Proposed"]


def test_csv_carries_the_markdown_numbers(results):
    frame = pd.read_csv(io.StringIO(emit_report(results, ReportFormat.CSV, include_runtime=True)), dtype=str)
    assert list(frame.columns[:4]) == ["Type", "Algorithm", "δ=0% ACC", "δ=50% ACC"]
    proposed = frame[frame["Algorithm"] == "Proposed"].iloc[0]
    assert proposed["δ=50% ACC"] == "97.31"
    assert proposed["δ=50% MAR"] == "2.00"
    assert proposed["δ=50% runtime_s"] == "1.50"


def test_json_round_trip(results):
    text = emit_report(results, "json", include_runtime=True)
    assert json.loads(text)["results"][1]["scenario"]["delta"] == 0.5
    again = results_from_json(text)
    assert again == results
    assert emit_report(again, "markdown") == emit_report(results, "markdown")


def test_json_can_drop_runtime(results):
    data = json.loads(emit_report(results, "json", include_runtime=False))
    assert all(m["runtime"] is None for r in data["results"] for m in r["methods"].values())


def test_failed_and_missing_cells(results):
    failed = _result(0.2, {}, error="PowerFlowError: no convergence")
    no_mar = _result(0.1, {"proposed": 0.5, "dnn_b": 0.5}, mar=None)
    text = emit_report([results[0], no_mar, failed])
    assert "| Transfer | Proposed | 100.00 | 50.00 | failed |" in text
    assert "| Transfer | Proposed | 2.00 | n/a | failed |" in text
    assert "Failed scenarios:\n- δ=20%: PowerFlowError: no convergence" in text


def test_absent_method_shows_dash(results):
    partial = _result(0.3, {"proposed": 0.9})
    frame = report_frame([results[0], partial], include_placeholders=False)
    dnn = frame[frame["Algorithm"] == "DNN-B"].iloc[0]
    assert dnn["δ=30%"] == "-"


def test_empty_results():
    with pytest.raises(ValueError):
        emit_report([])
    with pytest.raises(ValueError):
        emit_report([_result(0.0, {"lr": 0.5})], "html")


def test_default_reports_repeat_byte_for_byte(results):
    slower = [_result(0.0, {"proposed": 1.0, "dnn_b": 0.9988}, runtime=9.0), results[1]]
    for fmt in ReportFormat:
        assert emit_report(results, fmt) == emit_report(slower, fmt)
