"""Render sweep results as accuracy tables (markdown, CSV or JSON).

Rows are detectors, columns are scenarios (one per delta or source sigma).
ACC and MAR are percentages with two decimals.
"""

from __future__ import annotations

import json
from enum import Enum
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import pandas as pd

from detector.sweep import MethodResult, Scenario, ScenarioResult


class ReportFormat(str, Enum):
    MARKDOWN = "markdown"
    CSV = "csv"
    JSON = "json"


# (method key, type, algorithm) in table order
ROWS: Tuple[Tuple[str, str, str], ...] = (
    ("bdd", "Model-based", "BDD"),
    ("dnn_b", "Data-driven", "DNN-B"),
    ("svm", "Data-driven", "SVM"),
    ("lr", "Data-driven", "LR"),
    ("knn", "Data-driven", "KNN"),
    ("gnb", "Data-driven", "GNB"),
    ("rf", "Data-driven", "RF"),
    ("proposed", "Transfer", "Proposed"),
)
NOT_IMPLEMENTED = ("svm", "rf")


def scenario_label(scenario: Scenario) -> str:
    if scenario.kind == "sigma":
        return f"σ={scenario.sigma_source * 100:g}%"
    return f"δ={scenario.delta * 100:g}%"


def _pct(value: Any) -> str:
    return "n/a" if value is None else f"{value * 100:.2f}"


def _cell(result: ScenarioResult, method: str, metric: str) -> str:
    if method in NOT_IMPLEMENTED:
        return "not implemented"
    if result.error is not None:
        return "failed"
    entry = result.methods.get(method)
    if entry is None:
        return "-"
    if metric == "runtime":
        return "n/a" if entry.runtime is None else f"{entry.runtime:.2f}"
    return _pct(getattr(entry, metric))


def _rows(results: Sequence[ScenarioResult], include_placeholders: bool) -> List[Tuple[str, str, str]]:
    present = {m for r in results for m in r.methods}
    return [
        row
        for row in ROWS
        if row[0] in present or (include_placeholders and row[0] in NOT_IMPLEMENTED)
    ]


def report_frame(
    results: Sequence[ScenarioResult],
    metric: str = "acc",
    include_placeholders: bool = True,
) -> pd.DataFrame:
    """One row per detector, one column per scenario, for ``metric`` in acc/mar/runtime."""

    if not results:
        raise ValueError("no scenario results to report")
    records = []
    for key, kind, name in _rows(results, include_placeholders):
        record = {"Type": kind, "Algorithm": name}
        for result in results:
            record[scenario_label(result.scenario)] = _cell(result, key, metric)
        records.append(record)
    return pd.DataFrame.from_records(records)


def _markdown_table(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "| " + " | ".join("---" for _ in frame.columns) + " |"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body])


def _has_runtime(results: Sequence[ScenarioResult]) -> bool:
    return any(m.runtime is not None for r in results for m in r.methods.values())


def _to_markdown(results: Sequence[ScenarioResult], include_runtime: bool, include_placeholders: bool) -> str:
    sections = [
        "## Detection accuracy ACC (%)",
        _markdown_table(report_frame(results, "acc", include_placeholders)),
        "",
        "## Missing alarm rate MAR (%)",
        _markdown_table(report_frame(results, "mar", include_placeholders)),
    ]
    if include_runtime and _has_runtime(results):
        sections += ["", "## Runtime (s)", _markdown_table(report_frame(results, "runtime", include_placeholders))]
    failed = [r for r in results if r.error]
    if failed:
        sections += ["", "Failed scenarios:"]
        sections += [f"- {scenario_label(r.scenario)}: {r.error}" for r in failed]
    return "\n".join(sections) + "\n"


def _to_csv(results: Sequence[ScenarioResult], include_runtime: bool, include_placeholders: bool) -> str:
    metrics = ["acc", "mar"] + (["runtime"] if include_runtime and _has_runtime(results) else [])
    frames = []
    for metric in metrics:
        frame = report_frame(results, metric, include_placeholders)
        suffix = {"acc": "ACC", "mar": "MAR", "runtime": "runtime_s"}[metric]
        frame = frame.rename(columns={c: f"{c} {suffix}" for c in frame.columns[2:]})
        frames.append(frame if not frames else frame.iloc[:, 2:])
    return pd.concat(frames, axis=1).to_csv(index=False)


def _to_json(results: Sequence[ScenarioResult], include_runtime: bool) -> str:
    records = []
    for result in results:
        record = result.to_dict()
        if not include_runtime:
            for method in record["methods"].values():
                method["runtime"] = None
        records.append(record)
    return json.dumps({"results": records}, indent=2, sort_keys=True) + "\n"


def emit_report(
    results: Sequence[ScenarioResult],
    fmt: ReportFormat | str = ReportFormat.MARKDOWN,
    include_runtime: bool = False,
    include_placeholders: bool = True,
) -> str:
    fmt = ReportFormat(fmt)
    if not results:
        raise ValueError("no scenario results to report")
    if fmt is ReportFormat.JSON:
        return _to_json(results, include_runtime)
    if fmt is ReportFormat.CSV:
        return _to_csv(results, include_runtime, include_placeholders)
    return _to_markdown(results, include_runtime, include_placeholders)


def _method_from_dict(values: Mapping[str, Any]) -> MethodResult:
    return MethodResult(**{key: values.get(key) for key in MethodResult.__dataclass_fields__})


def results_from_json(document: str | Mapping[str, Any]) -> List[ScenarioResult]:
    """Parse a JSON report back into scenario results."""

    data: Dict[str, Any] = json.loads(document) if isinstance(document, str) else dict(document)
    results = []
    for record in data["results"]:
        results.append(
            ScenarioResult(
                scenario=Scenario(**record["scenario"]),
                methods={name: _method_from_dict(m) for name, m in record["methods"].items()},
                sizes=dict(record.get("sizes", {})),
                notes=dict(record.get("notes", {})),
                error=record.get("error"),
            )
        )
    return results
