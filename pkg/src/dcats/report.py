"""Aggregate query results into a metrics table, token counts and traces."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from pathlib import Path

import numpy as np

DISPLAY_NAMES = {"linear": "Linear", "mlp": "MLP", "sparsetsf": "SparseTSF"}
METRICS = ("mae", "rmse", "mape")

STOP_WORDS = frozenset("""
a about above after again against all also am an and any are as at be because been before being
below between both but by can could did do does doing down during each few for from further had
has have having he her here hers him his how i if in into is it its itself just may me might more
most much my no nor not now of off on once only or other our ours out over own same she should so
some such than that the their theirs them then there these they this those through to too under
until up us very was we were what when where which while who whom why will with would you your
""".split())


def tokenize(text: str) -> list:
    return [t for t in re.findall(r"[a-z]+", text.lower()) if t not in STOP_WORDS and len(t) > 1]


def token_frequencies(explanations) -> Counter:
    counts = Counter()
    for text in explanations:
        counts.update(tokenize(text))
    return counts


def improvement_pct(base: float, ours: float) -> float:
    return (base - ours) / base * 100.0


def _as_dict(r) -> dict:
    return r if isinstance(r, dict) else r.to_dict()


def summarize(results, split: str = "test") -> dict:
    """Per model kind: mean over queries of the per-query metrics, for each method."""
    results = [_as_dict(r) for r in results]
    table = {}
    for kind in sorted({r["model_kind"] for r in results}, key=lambda k: (k not in DISPLAY_NAMES, k)):
        rs = [r for r in results if r["model_kind"] == kind]
        rows = {"dcats": {m: float(np.mean([r[f"{split}_metrics"][m] for r in rs])) for m in METRICS}}
        with_base = [r for r in rs if r.get("baselines")]
        if with_base:
            for name in ("alldata", "foundation"):
                rows[name] = {m: float(np.mean([r["baselines"][f"{name}_{split}"][m] for r in with_base]))
                              for m in METRICS}
        rows["n_queries"] = len(rs)
        table[kind] = rows
    return table


def _fmt(metric, value):
    return f"{value:.2f}%" if metric == "mape" else f"{value:.2f}"


def render_table(summary: dict, baseline: str = "alldata") -> str:
    """Markdown table laid out as method / +DCATS / % improvement blocks."""
    lines = ["| Method | MAE | RMSE | MAPE |", "|---|---|---|---|"]
    for kind, rows in summary.items():
        name = DISPLAY_NAMES.get(kind, kind)
        ours = rows["dcats"]
        if baseline in rows:
            base = rows[baseline]
            lines.append(f"| {name} | " + " | ".join(_fmt(m, base[m]) for m in METRICS) + " |")
        lines.append(f"| {name}+DCATS | " + " | ".join(_fmt(m, ours[m]) for m in METRICS) + " |")
        if baseline in rows:
            lines.append("| % improvement | " + " | ".join(
                f"{improvement_pct(rows[baseline][m], ours[m]):.2f}%" for m in METRICS) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results, out_dir) -> dict:
    """Write table.md, table.csv, token_frequencies.csv and traces.jsonl under ``out_dir``.

    ``results`` may hold QueryResult objects or their ``to_dict()`` traces.
    """
    results = [_as_dict(r) for r in results]
    if not results:
        raise ValueError("no query results to report")
    results.sort(key=lambda r: (r["model_kind"], r["backend"], r["target_id"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(results)

    md = ["Test-range metrics, mean over queries of per-query means "
          "(all horizon steps).", "",
          "Baseline: foundation fine-tuned on all locations.", "",
          render_table(summary, "alldata")]
    if any("foundation" in rows for rows in summary.values()):
        md += ["Baseline: foundation model without fine-tuning.", "",
               render_table(summary, "foundation")]
    paths = {"table_md": out / "table.md", "table_csv": out / "table.csv",
             "tokens": out / "token_frequencies.csv", "traces": out / "traces.jsonl"}
    paths["table_md"].write_text("\n".join(md), encoding="utf-8")

    with open(paths["table_csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "method", "mae", "rmse", "mape", "n_queries"])
        for kind, rows in summary.items():
            for method in ("foundation", "alldata", "dcats"):
                if method in rows:
                    w.writerow([kind, method] + [f"{rows[method][m]:.6f}" for m in METRICS]
                               + [rows["n_queries"]])
            for method in ("foundation", "alldata"):
                if method in rows:
                    w.writerow([kind, f"improvement_vs_{method}_pct"]
                               + [f"{improvement_pct(rows[method][m], rows['dcats'][m]):.6f}" for m in METRICS]
                               + [rows["n_queries"]])

    counts = token_frequencies(r["best"]["explanation"] for r in results)
    with open(paths["tokens"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "count"])
        for token, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            w.writerow([token, n])

    with open(paths["traces"], "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r, sort_keys=True, allow_nan=False) + "\n")
    return paths
