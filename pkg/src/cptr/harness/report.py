"""Rendering of metrics reports as JSON, CSV or markdown tables.

CSV schema: the fixed columns in :data:`CSV_FIXED_COLUMNS`, then one
``recall_d<distance>`` column per distance and one ``ms_per_token_b<size>``
column per batch size, each taken as the sorted union over all reports.
Missing values are empty cells.
"""

from __future__ import annotations

import csv
import io
import json

from cptr.harness.experiment import MetricsReport, trends

FORMATS = ("json", "csv", "markdown")

CSV_FIXED_COLUMNS = (
    "run_id", "model", "config_fingerprint", "seed", "status", "failed_step", "train_steps",
    "initial_loss", "final_loss", "perplexity", "recall_overall", "tokens_per_second",
    "grad_norm_mean", "grad_norm_variance", "grad_norm_max_ratio", "wall_clock_seconds", "stream_hash",
)


def _distances(reports):
    return sorted({d for r in reports for d in r.recall}, key=int)


def _batch_sizes(reports):
    return sorted({b for r in reports for b in r.ms_per_token}, key=int)


def csv_columns(reports) -> list[str]:
    return (list(CSV_FIXED_COLUMNS) + [f"recall_d{d}" for d in _distances(reports)]
            + [f"ms_per_token_b{b}" for b in _batch_sizes(reports)])


def _pair(reports):
    by_model = {r.model: r for r in reports}
    if "baseline" in by_model and "cptr" in by_model:
        return by_model["baseline"], by_model["cptr"]
    return None


def _display_name(r: MetricsReport) -> str:
    return {"baseline": "Baseline", "cptr": "CPTR-Enhanced"}.get(r.model, r.model)


def _fmt(x, spec: str) -> str:
    return "n/a" if x is None else format(x, spec)


def _pct(x) -> str:
    return "n/a" if x is None else f"{100.0 * x:.1f}"


def _markdown(reports) -> str:
    lines = ["## Performance metrics", "", "| Model | Perplexity | Accuracy (%) | Tokens/sec |", "|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {_display_name(r)} | {_fmt(r.perplexity, '.1f')} | {_pct(r.recall_overall)} "
                     f"| {_fmt(r.tokens_per_second, ',.0f')} |")

    dists = _distances(reports)
    lines += ["", "## Long-range dependency recall accuracy", "",
              "| Model | " + " | ".join(f"{d} Tokens (%)" for d in dists) + " |",
              "|---|" + "---|" * len(dists)]
    for r in reports:
        lines.append(f"| {_display_name(r)} | " + " | ".join(_pct(r.recall.get(d)) for d in dists) + " |")

    sizes = _batch_sizes(reports)
    lines += ["", "## Token generation latency (ms per token)", "",
              "| Model | " + " | ".join(f"Batch Size {b}" for b in sizes) + " |",
              "|---|" + "---|" * len(sizes)]
    for r in reports:
        lines.append(f"| {_display_name(r)} | "
                     + " | ".join(_fmt(r.ms_per_token.get(b), ".1f") for b in sizes) + " |")

    lines += ["", "## Gradient stability", "",
              "| Model | Mean grad norm | Variance | Max/mean |", "|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {_display_name(r)} | {_fmt(r.grad_norm_mean, '.3f')} "
                     f"| {_fmt(r.grad_norm_variance, '.3f')} | {_fmt(r.grad_norm_max_ratio, '.2f')} |")

    failed = [r for r in reports if r.status != "ok"]
    if failed:
        lines += ["", "## Failed runs", ""]
        lines += [f"- {_display_name(r)}: diverged at step {r.failed_step}" for r in failed]

    pair = _pair(reports)
    if pair:
        lines += ["", "## Trend (CPTR vs baseline, informational)", ""]
        lines += [f"- {k}: {v}" for k, v in trends(*pair).items()]
    return "\n".join(lines) + "\n"


def emit_report(reports, fmt: str = "json") -> bytes:
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    if fmt == "json":
        doc = {"reports": [r.to_dict() for r in reports]}
        pair = _pair(reports)
        if pair:
            doc["trends"] = trends(*pair)
        return (json.dumps(doc, indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(csv_columns(reports))
        for r in reports:
            d = r.to_dict()
            row = [d[c] for c in CSV_FIXED_COLUMNS]
            row += [r.recall.get(k) for k in _distances(reports)]
            row += [r.ms_per_token.get(k) for k in _batch_sizes(reports)]
            writer.writerow(["" if v is None else v for v in row])
        return buf.getvalue().encode("utf-8")
    if fmt == "markdown":
        return _markdown(reports).encode("utf-8")
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def load_reports(blob: bytes) -> list[MetricsReport]:
    """Inverse of the JSON form of :func:`emit_report`."""
    return [MetricsReport.from_dict(d) for d in json.loads(blob)["reports"]]
