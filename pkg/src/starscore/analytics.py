"""Evaluation statistics: rank correlation, self-consistency, profile counts.

Spearman correlation against the departmental proxy is the core evaluation;
it uses average (fractional) ranks for ties and is computed per unit and
year, then averaged over years, with pooled variants for small corpora.

Self-consistency compares each quantized distribution ("profile", e.g.
10-20-40-30) against the winner categories of the *other* iterations of the
same articles, pooled across all articles sharing the profile. The deviation
measure per profile is

    mad = sum over the four levels of |predicted% - observed%|

which lies in [0, 200]; the headline figure weights profiles by occurrences.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import Article
from .errors import InputError, StarscoreError
from .parsing import SCORES, ScoreDistribution
from .prompting import Strategy
from .scoring import ArticleScore, ScoredResult


class DegenerateDataError(StarscoreError):
    """Correlation undefined: a vector is constant or too short."""


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    start = 0
    while start < len(order):
        end = start
        while end + 1 < len(order) and values[order[end + 1]] == values[order[start]]:
            end += 1
        mean_rank = (start + end) / 2 + 1
        for pos in range(start, end + 1):
            ranks[order[pos]] = mean_rank
        start = end + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rho: Pearson correlation of the average-rank vectors."""
    if len(x) != len(y):
        raise InputError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DegenerateDataError("need at least two observations")
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise DegenerateDataError("correlation undefined for a constant vector")
    rx = average_ranks(x)
    ry = average_ranks(y)
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    dx = [r - mx for r in rx]
    dy = [r - my for r in ry]
    cov = sum(a * b for a, b in zip(dx, dy))
    denom = math.sqrt(sum(a * a for a in dx) * sum(b * b for b in dy))
    return cov / denom


def quantize(distribution: ScoreDistribution) -> tuple[int, int, int, int]:
    """Distribution as whole percentage points (half rounds up)."""
    return tuple(int(math.floor(p * 100 + 0.5)) for p in distribution.p)


def profile_label(quantized: Sequence[int]) -> str:
    return "-".join(str(v) for v in quantized)


@dataclass(frozen=True)
class Profile:
    quantized: tuple[int, int, int, int]
    count: int

    @property
    def label(self) -> str:
        return profile_label(self.quantized)

    @property
    def sum_in_range(self) -> bool:
        return 98 <= sum(self.quantized) <= 102


@dataclass(frozen=True)
class ConsistencyRow:
    profile: tuple[int, int, int, int]
    predicted_pct: tuple[float, float, float, float]
    observed_pct: tuple[float, float, float, float]
    mad: float
    weight: int


@dataclass(frozen=True)
class ConsistencySummary:
    rows: tuple[ConsistencyRow, ...]
    weighted_mean_mad: float | None
    unweighted_mean_mad: float | None
    n_occurrences: int


def consistency_mad(results: Iterable[ScoredResult]) -> ConsistencySummary:
    """How well stated distributions predict the model's own other outputs.

    For every occurrence of a profile, the winner categories of the same
    article's other iterations are tallied; tallies pool across articles
    sharing the profile. Articles with a single usable iteration contribute
    nothing (they have no "other" predictions).
    """
    results = list(results)
    strategies = {r.strategy for r in results}
    if len(strategies) > 1:
        raise InputError(f"consistency expects a single strategy, got {sorted(strategies)}")
    by_article: dict[str, list[ScoredResult]] = defaultdict(list)
    for r in results:
        if r.distribution is not None and not r.flags:
            by_article[r.article_id].append(r)

    pooled: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    occurrences: Counter = Counter()
    for rows in by_article.values():
        if len(rows) < 2:
            continue
        winners = [r.winner for r in rows]
        for idx, r in enumerate(rows):
            profile = quantize(r.distribution)
            occurrences[profile] += 1
            for jdx, won in enumerate(winners):
                if jdx != idx:
                    pooled[profile][won] += 1

    out: list[ConsistencyRow] = []
    for profile in pooled:
        tally = pooled[profile]
        total = sum(tally.values())
        observed = tuple(100.0 * tally.get(s, 0) / total for s in SCORES)
        predicted = tuple(float(v) for v in profile)
        mad = sum(abs(p - o) for p, o in zip(predicted, observed))
        out.append(
            ConsistencyRow(
                profile=profile,
                predicted_pct=predicted,
                observed_pct=observed,
                mad=mad,
                weight=occurrences[profile],
            )
        )
    out.sort(key=lambda row: (-row.weight, row.profile))
    total_weight = sum(row.weight for row in out)
    weighted = (
        sum(row.mad * row.weight for row in out) / total_weight if total_weight else None
    )
    unweighted = sum(row.mad for row in out) / len(out) if out else None
    return ConsistencySummary(
        rows=tuple(out),
        weighted_mean_mad=weighted,
        unweighted_mean_mad=unweighted,
        n_occurrences=total_weight,
    )


def profile_histogram(
    results: Iterable[ScoredResult],
    panel_by_article: Mapping[str, str],
    main_panel: str,
    k: int = 20,
) -> list[Profile]:
    """Top-k quantized profiles for one main panel, most common first;
    equal counts order lexicographically by profile."""
    counts: Counter = Counter(
        quantize(r.distribution)
        for r in results
        if r.distribution is not None
        and not r.flags
        and panel_by_article.get(r.article_id) == main_panel
    )
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [Profile(quantized=q, count=c) for q, c in ranked[:k]]


@dataclass(frozen=True)
class SpearmanCell:
    unit: int
    year: int
    strategy: Strategy
    n: int
    rho_weighted: float | None
    rho_winner: float | None


@dataclass(frozen=True)
class UnitSummary:
    unit: int
    strategy: Strategy
    n_articles: int
    n_year_cells: int
    mean_rho_weighted: float | None  # unweighted mean over year cells
    mean_rho_winner: float | None
    pooled_rho_weighted: float | None  # all years of the unit pooled
    pooled_rho_winner: float | None


@dataclass(frozen=True)
class OverallSummary:
    strategy: Strategy
    n_articles: int
    mean_of_unit_means_weighted: float | None
    mean_of_unit_means_winner: float | None
    pooled_rho_weighted: float | None
    pooled_rho_winner: float | None


@dataclass(frozen=True)
class SkippedCell:
    unit: int
    year: int
    strategy: Strategy
    n: int
    reason: str


@dataclass(frozen=True)
class SpearmanReport:
    cells: tuple[SpearmanCell, ...]
    unit_summaries: tuple[UnitSummary, ...]
    overall: tuple[OverallSummary, ...]
    skipped: tuple[SkippedCell, ...]


def _safe_spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float | None, str | None]:
    try:
        return spearman(x, y), None
    except DegenerateDataError as exc:
        return None, str(exc)


def evaluate(
    scores: Iterable[ArticleScore],
    articles: Iterable[Article],
    proxy: Mapping[tuple[str, int], float],
) -> SpearmanReport:
    """Correlate article scores with departmental proxy means.

    Rho is computed per (unit, year, strategy) cell for both the weighted and
    the winner score columns; cells with fewer than two articles or a
    constant side are skipped and listed. Unit summaries average the year
    cells (unweighted) and also pool all years.
    """
    article_by_id = {a.id: a for a in articles}
    # (strategy, unit, year) -> parallel value lists
    cells: dict[tuple[Strategy, int, int], dict[str, list[float]]] = defaultdict(
        lambda: {"weighted": [], "winner": [], "proxy": []}
    )
    for score in scores:
        article = article_by_id.get(score.article_id)
        if article is None:
            raise InputError(f"scored article {score.article_id!r} is not in the corpus")
        key = (article.department_id, article.unit)
        if key not in proxy:
            raise InputError(f"proxy table has no entry for (dept, unit) {key}")
        cell = cells[(score.strategy, article.unit, article.year)]
        cell["weighted"].append(score.mean_weighted_score)
        cell["winner"].append(score.mean_winner_score)
        cell["proxy"].append(proxy[key])

    out_cells: list[SpearmanCell] = []
    skipped: list[SkippedCell] = []
    for (strategy, unit, year), cell in sorted(
        cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1], kv[0][2])
    ):
        n = len(cell["proxy"])
        if n < 2:
            skipped.append(SkippedCell(unit, year, strategy, n, "fewer than 2 articles"))
            continue
        rho_w, why_w = _safe_spearman(cell["weighted"], cell["proxy"])
        rho_n, why_n = _safe_spearman(cell["winner"], cell["proxy"])
        if rho_w is None and rho_n is None:
            skipped.append(SkippedCell(unit, year, strategy, n, why_w or "degenerate"))
            continue
        out_cells.append(SpearmanCell(unit, year, strategy, n, rho_w, rho_n))

    unit_groups: dict[tuple[Strategy, int], list[SpearmanCell]] = defaultdict(list)
    for cell_row in out_cells:
        unit_groups[(cell_row.strategy, cell_row.unit)].append(cell_row)

    def _mean(values: list[float]) -> float | None:
        return sum(values) / len(values) if values else None

    unit_summaries: list[UnitSummary] = []
    for (strategy, unit), group in sorted(
        unit_groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1])
    ):
        pooled = {"weighted": [], "winner": [], "proxy": []}
        for (strat2, unit2, _year), cell in cells.items():
            if strat2 is strategy and unit2 == unit:
                for column, values in cell.items():
                    pooled[column].extend(values)
        pooled_w, _ = _safe_spearman(pooled["weighted"], pooled["proxy"])
        pooled_n, _ = _safe_spearman(pooled["winner"], pooled["proxy"])
        unit_summaries.append(
            UnitSummary(
                unit=unit,
                strategy=strategy,
                n_articles=len(pooled["proxy"]),
                n_year_cells=len(group),
                mean_rho_weighted=_mean([c.rho_weighted for c in group if c.rho_weighted is not None]),
                mean_rho_winner=_mean([c.rho_winner for c in group if c.rho_winner is not None]),
                pooled_rho_weighted=pooled_w,
                pooled_rho_winner=pooled_n,
            )
        )

    overall: list[OverallSummary] = []
    for strategy in sorted({s for s, _, _ in cells}, key=lambda s: s.value):
        units = [u for u in unit_summaries if u.strategy is strategy]
        pooled = {"weighted": [], "winner": [], "proxy": []}
        for (strat2, _unit, _year), cell in cells.items():
            if strat2 is strategy:
                for column, values in cell.items():
                    pooled[column].extend(values)
        pooled_w, _ = _safe_spearman(pooled["weighted"], pooled["proxy"])
        pooled_n, _ = _safe_spearman(pooled["winner"], pooled["proxy"])
        overall.append(
            OverallSummary(
                strategy=strategy,
                n_articles=len(pooled["proxy"]),
                mean_of_unit_means_weighted=_mean(
                    [u.mean_rho_weighted for u in units if u.mean_rho_weighted is not None]
                ),
                mean_of_unit_means_winner=_mean(
                    [u.mean_rho_winner for u in units if u.mean_rho_winner is not None]
                ),
                pooled_rho_weighted=pooled_w,
                pooled_rho_winner=pooled_n,
            )
        )

    return SpearmanReport(
        cells=tuple(out_cells),
        unit_summaries=tuple(unit_summaries),
        overall=tuple(overall),
        skipped=tuple(skipped),
    )
