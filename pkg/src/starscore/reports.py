"""Assemble and serialize the evaluation report.

One report bundles the Spearman tables, the MAD self-consistency tables, the
top-profile histograms per main panel, and exclusion counts. It is written
as machine-readable JSON, aligned plain-text tables, and one CSV per table;
all output is deterministic for fixed inputs so replayed evaluations are
byte-identical.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .analytics import (
    ConsistencySummary,
    Profile,
    SpearmanReport,
    consistency_mad,
    evaluate,
    profile_histogram,
    profile_label,
)
from .corpus import MAIN_PANELS, Article
from .errors import InputError
from .scoring import ScoredResult, aggregate_all


@dataclass(frozen=True)
class EvalReport:
    spearman: SpearmanReport
    consistency: dict[str, ConsistencySummary]  # keyed by strategy value
    histograms: dict[str, list[Profile]]  # keyed "panel/strategy"
    flag_counts: dict[str, dict[str, int]]  # strategy -> reason -> count
    unusable_articles: list[tuple[str, str, str]]
    n_results: int
    n_articles_scored: int


def build_report(
    results: Sequence[ScoredResult],
    articles: Sequence[Article],
    proxy: Mapping[tuple[str, int], float],
    top_k: int = 20,
    include_out_of_tolerance: bool = False,
) -> EvalReport:
    if not results:
        raise InputError("no scored results to evaluate")
    article_scores, unusable = aggregate_all(results, include_out_of_tolerance)
    if not article_scores:
        raise InputError("every scored article was flagged; nothing to evaluate")
    spearman_report = evaluate(article_scores, articles, proxy)

    strategies = sorted({r.strategy for r in results}, key=lambda s: s.value)
    consistency = {
        strategy.value: consistency_mad([r for r in results if r.strategy is strategy])
        for strategy in strategies
    }

    panel_by_article = {a.id: a.main_panel for a in articles}
    histograms: dict[str, list[Profile]] = {}
    for panel in MAIN_PANELS:
        for strategy in strategies:
            top = profile_histogram(
                [r for r in results if r.strategy is strategy],
                panel_by_article,
                panel,
                top_k,
            )
            if top:
                histograms[f"{panel}/{strategy.value}"] = top

    flag_counts: dict[str, dict[str, int]] = {}
    for strategy in strategies:
        counter: Counter = Counter()
        for r in results:
            if r.strategy is strategy:
                counter.update(r.flags)
        flag_counts[strategy.value] = dict(sorted(counter.items()))

    return EvalReport(
        spearman=spearman_report,
        consistency=consistency,
        histograms=histograms,
        flag_counts=flag_counts,
        unusable_articles=[(a, s.value, reason) for a, s, reason in unusable],
        n_results=len(results),
        n_articles_scored=len(article_scores),
    )


def report_to_dict(report: EvalReport) -> dict:
    sp = report.spearman
    return {
        "spearman": {
            "cells": [
                {
                    "unit": c.unit,
                    "year": c.year,
                    "strategy": c.strategy.value,
                    "n": c.n,
                    "rho_weighted": c.rho_weighted,
                    "rho_winner": c.rho_winner,
                }
                for c in sp.cells
            ],
            "units": [
                {
                    "unit": u.unit,
                    "strategy": u.strategy.value,
                    "n_articles": u.n_articles,
                    "n_year_cells": u.n_year_cells,
                    "mean_rho_weighted": u.mean_rho_weighted,
                    "mean_rho_winner": u.mean_rho_winner,
                    "pooled_rho_weighted": u.pooled_rho_weighted,
                    "pooled_rho_winner": u.pooled_rho_winner,
                }
                for u in sp.unit_summaries
            ],
            "overall": [
                {
                    "strategy": o.strategy.value,
                    "n_articles": o.n_articles,
                    "mean_of_unit_means_weighted": o.mean_of_unit_means_weighted,
                    "mean_of_unit_means_winner": o.mean_of_unit_means_winner,
                    "pooled_rho_weighted": o.pooled_rho_weighted,
                    "pooled_rho_winner": o.pooled_rho_winner,
                }
                for o in sp.overall
            ],
            "skipped": [
                {
                    "unit": s.unit,
                    "year": s.year,
                    "strategy": s.strategy.value,
                    "n": s.n,
                    "reason": s.reason,
                }
                for s in sp.skipped
            ],
        },
        "consistency": {
            strategy: {
                "weighted_mean_mad": summary.weighted_mean_mad,
                "unweighted_mean_mad": summary.unweighted_mean_mad,
                "n_occurrences": summary.n_occurrences,
                "rows": [
                    {
                        "profile": profile_label(row.profile),
                        "predicted_pct": list(row.predicted_pct),
                        "observed_pct": list(row.observed_pct),
                        "mad": row.mad,
                        "weight": row.weight,
                    }
                    for row in summary.rows
                ],
            }
            for strategy, summary in sorted(report.consistency.items())
        },
        "histograms": {
            key: [{"profile": p.label, "count": p.count} for p in profiles]
            for key, profiles in sorted(report.histograms.items())
        },
        "flag_counts": report.flag_counts,
        "unusable_articles": [list(t) for t in report.unusable_articles],
        "n_results": report.n_results,
        "n_articles_scored": report.n_articles_scored,
    }


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _table(headers: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    str_rows = [[_fmt(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in str_rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in str_rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def render_text(data: dict) -> str:
    """Aligned plain-text tables from the dict form of a report."""
    parts: list[str] = []
    sp = data["spearman"]

    parts.append("Spearman correlation vs departmental proxy, per unit and year")
    parts.append(
        _table(
            ("strategy", "unit", "year", "n", "rho_weighted", "rho_winner"),
            [
                (c["strategy"], c["unit"], c["year"], c["n"], c["rho_weighted"], c["rho_winner"])
                for c in sp["cells"]
            ],
        )
    )
    if sp["skipped"]:
        parts.append("\nSkipped cells")
        parts.append(
            _table(
                ("strategy", "unit", "year", "n", "reason"),
                [(s["strategy"], s["unit"], s["year"], s["n"], s["reason"]) for s in sp["skipped"]],
            )
        )
    parts.append("\nPer-unit summary (mean over year cells; pooled over all years)")
    parts.append(
        _table(
            (
                "strategy", "unit", "articles", "year_cells",
                "mean_rho_w", "mean_rho_win", "pooled_rho_w", "pooled_rho_win",
            ),
            [
                (
                    u["strategy"], u["unit"], u["n_articles"], u["n_year_cells"],
                    u["mean_rho_weighted"], u["mean_rho_winner"],
                    u["pooled_rho_weighted"], u["pooled_rho_winner"],
                )
                for u in sp["units"]
            ],
        )
    )
    parts.append("\nOverall (mean of unit means; all articles pooled)")
    parts.append(
        _table(
            (
                "strategy", "articles",
                "mean_units_w", "mean_units_win", "pooled_rho_w", "pooled_rho_win",
            ),
            [
                (
                    o["strategy"], o["n_articles"],
                    o["mean_of_unit_means_weighted"], o["mean_of_unit_means_winner"],
                    o["pooled_rho_weighted"], o["pooled_rho_winner"],
                )
                for o in sp["overall"]
            ],
        )
    )

    for strategy, summary in data["consistency"].items():
        parts.append(
            f"\nSelf-consistency for {strategy}: "
            f"occurrence-weighted mean MAD = {_fmt(summary['weighted_mean_mad'])} "
            f"(unweighted {_fmt(summary['unweighted_mean_mad'])}, "
            f"{summary['n_occurrences']} occurrences)"
        )
        parts.append(
            _table(
                ("profile", "weight", "mad", "observed_pct"),
                [
                    (
                        row["profile"],
                        row["weight"],
                        row["mad"],
                        "-".join(f"{v:.1f}" for v in row["observed_pct"]),
                    )
                    for row in summary["rows"][:20]
                ],
            )
        )

    if data["histograms"]:
        parts.append("\nMost common profiles per main panel")
        for key, profiles in data["histograms"].items():
            parts.append(f"\n[{key}]")
            parts.append(
                _table(("profile", "count"), [(p["profile"], p["count"]) for p in profiles])
            )

    parts.append("\nFlagged iterations by reason")
    flag_rows = [
        (strategy, reason, count)
        for strategy, reasons in data["flag_counts"].items()
        for reason, count in reasons.items()
    ]
    parts.append(_table(("strategy", "reason", "count"), flag_rows or [("-", "none", 0)]))
    if data["unusable_articles"]:
        parts.append("\nArticles excluded entirely (all iterations flagged)")
        parts.append(
            _table(("article_id", "strategy", "reason"), data["unusable_articles"])
        )
    parts.append(
        f"\n{data['n_results']} scored iterations; "
        f"{data['n_articles_scored']} (article, strategy) aggregates evaluated"
    )
    return "\n".join(parts) + "\n"


def _write_csv(path: Path, headers: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    import csv

    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def write_report(report: EvalReport, out_dir: str | Path) -> dict:
    """Write report.json, report.txt, and per-table CSVs; returns the dict form."""
    out_dir = Path(out_dir)
    tables = out_dir / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    data = report_to_dict(report)

    (out_dir / "report.json").write_text(
        json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )
    (out_dir / "report.txt").write_text(render_text(data), encoding="utf-8", newline="\n")

    sp = data["spearman"]
    _write_csv(
        tables / "spearman_cells.csv",
        ("strategy", "unit", "year", "n", "rho_weighted", "rho_winner"),
        [
            (c["strategy"], c["unit"], c["year"], c["n"], c["rho_weighted"], c["rho_winner"])
            for c in sp["cells"]
        ],
    )
    _write_csv(
        tables / "spearman_units.csv",
        (
            "strategy", "unit", "n_articles", "n_year_cells",
            "mean_rho_weighted", "mean_rho_winner",
            "pooled_rho_weighted", "pooled_rho_winner",
        ),
        [
            (
                u["strategy"], u["unit"], u["n_articles"], u["n_year_cells"],
                u["mean_rho_weighted"], u["mean_rho_winner"],
                u["pooled_rho_weighted"], u["pooled_rho_winner"],
            )
            for u in sp["units"]
        ],
    )
    _write_csv(
        tables / "spearman_overall.csv",
        (
            "strategy", "n_articles",
            "mean_of_unit_means_weighted", "mean_of_unit_means_winner",
            "pooled_rho_weighted", "pooled_rho_winner",
        ),
        [
            (
                o["strategy"], o["n_articles"],
                o["mean_of_unit_means_weighted"], o["mean_of_unit_means_winner"],
                o["pooled_rho_weighted"], o["pooled_rho_winner"],
            )
            for o in sp["overall"]
        ],
    )
    for strategy, summary in data["consistency"].items():
        _write_csv(
            tables / f"consistency_{strategy}.csv",
            ("profile", "weight", "mad", "p1", "p2", "p3", "p4", "o1", "o2", "o3", "o4"),
            [
                (row["profile"], row["weight"], row["mad"], *row["predicted_pct"], *row["observed_pct"])
                for row in summary["rows"]
            ],
        )
    for key, profiles in data["histograms"].items():
        panel, strategy = key.split("/")
        _write_csv(
            tables / f"profiles_{panel}_{strategy}.csv",
            ("profile", "count"),
            [(p["profile"], p["count"]) for p in profiles],
        )
    return data
