"""Report emission: metrics JSON, plot-data CSVs and optional figures.

The CSV files are the stable contract. Figures are drawn from the same data
and skipped with a warning when rendering fails.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Sequence

from .metrics import MetricsReport, ScoreSet, compute_report

log = logging.getLogger(__name__)

COMPARISON_ROWS = ("clean", "per_image", "universal")
COMPARISON_COLUMNS = ("auc", "accuracy", "fake_to_real_rate")


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    return path


def histogram_rows(report: MetricsReport) -> list[tuple]:
    edges = report.histograms["edges"]
    rows = []
    for label in ("real", "synthetic"):
        for b, count in enumerate(report.histograms["counts"][label]):
            rows.append((label, edges[b], edges[b + 1], count))
    return rows


def reliability_rows(report: MetricsReport) -> list[tuple]:
    return [(b.lo, b.hi, b.mean_confidence, b.accuracy, b.count) for b in report.reliability_bins]


def per_prompt_rows(report: MetricsReport) -> list[tuple]:
    return [(p, report.per_prompt[p], report.per_prompt_n[p]) for p in sorted(report.per_prompt)]


def write_scoreset_report(report: MetricsReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report.to_json())
    _write_csv(out / "histogram.csv", ("label", "bin_lo", "bin_hi", "count"), histogram_rows(report))
    _write_csv(out / "reliability.csv", ("bin_lo", "bin_hi", "mean_confidence", "accuracy", "count"),
               reliability_rows(report))
    _write_csv(out / "per_prompt.csv", ("prompt_id", "rate", "n"), per_prompt_rows(report))
    return out


def comparison_table(reports: Sequence[MetricsReport]) -> list[dict[str, Any]]:
    """One row per condition in the fixed clean/per-image/universal order.

    Empty unless at least two conditions are present. When a condition was
    scored in both modes, the deployment row is preferred.
    """
    by_cond: dict[str, MetricsReport] = {}
    for r in reports:
        if r.condition not in by_cond or r.eval_mode == "deployment":
            by_cond[r.condition] = r
    if len(by_cond) < 2:
        return []
    rows = []
    for cond in COMPARISON_ROWS:
        if cond in by_cond:
            r = by_cond[cond]
            row = {"condition": cond, "eval_mode": r.eval_mode}
            row.update({c: getattr(r, c) for c in COMPARISON_COLUMNS})
            rows.append(row)
    return rows


def _figures(reports: Sequence[MetricsReport], table: list[dict[str, Any]], out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    def save(fig, path: Path):
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(str(path))

    for r in reports:
        sub = out / f"{r.condition}_{r.eval_mode}"
        edges = r.histograms["edges"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        width = edges[1] - edges[0]
        for label, colour in (("real", "tab:blue"), ("synthetic", "tab:red")):
            ax.bar(edges[:-1], r.histograms["counts"][label], width=width, align="edge",
                   alpha=0.6, label=label, color=colour)
        ax.axvline(0.5, color="k", lw=0.8, ls="--")
        ax.set(xlabel="P(synthetic)", ylabel="count", title=f"{r.condition} / {r.eval_mode}")
        ax.legend()
        save(fig, sub / "histogram.png")

        fig, ax = plt.subplots(figsize=(4, 4))
        occupied = [b for b in r.reliability_bins if b.count]
        ax.plot([0.5, 1.0], [0.5, 1.0], "k--", lw=0.8)
        ax.bar([(b.lo + b.hi) / 2 for b in occupied], [b.accuracy for b in occupied],
               width=(r.reliability_bins[0].hi - r.reliability_bins[0].lo), alpha=0.7, edgecolor="k")
        ax.set(xlim=(0.5, 1.0), ylim=(0.0, 1.0), xlabel="confidence", ylabel="accuracy",
               title=f"ECE {r.ece:.3f}")
        save(fig, sub / "reliability.png")

        if r.per_prompt:
            prompts = sorted(r.per_prompt)
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.bar(prompts, [r.per_prompt[p] for p in prompts], color="tab:purple")
            ax.set(ylim=(0, 1), ylabel="fake-to-real rate", title="per prompt")
            save(fig, sub / "per_prompt.png")

    if table:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([row["condition"] for row in table],
               [row["fake_to_real_rate"] or 0.0 for row in table], color="tab:orange")
        ax.set(ylim=(0, 1), ylabel="fake-to-real rate", title="attack regimes")
        save(fig, out / "comparison.png")
    return written


def write_report(scoresets: Sequence[ScoreSet], out_dir: str | Path, n_bins: int = 15,
                 hist_bins: int = 20, n_resamples: int = 2000, level: float = 0.95, seed: int = 0,
                 stratified: bool = False, figures: bool = True) -> dict[str, Any]:
    """Compute and write every report file; returns the comparison document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for s in scoresets:
        r = compute_report(s, n_bins=n_bins, hist_bins=hist_bins, n_resamples=n_resamples,
                           level=level, seed=seed, stratified=stratified)
        write_scoreset_report(r, out / s.name)
        reports.append(r)

    table = comparison_table(reports)
    doc = {"columns": list(COMPARISON_COLUMNS), "rows": table,
           "scoresets": [{"condition": r.condition, "eval_mode": r.eval_mode, "n": r.n} for r in reports]}
    write_json(out / "comparison.json", doc)
    _write_csv(out / "comparison.csv", ("condition", "eval_mode", *COMPARISON_COLUMNS),
               [tuple(row[k] for k in ("condition", "eval_mode", *COMPARISON_COLUMNS)) for row in table])

    if figures:
        try:
            doc["figures"] = _figures(reports, table, out)
        except Exception as exc:  # figures are optional; CSVs already written
            log.warning("figure rendering failed, CSV output only: %s", exc)
            doc["figures"] = []
    return doc
