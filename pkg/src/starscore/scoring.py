"""Distribution-to-score conversion and per-article aggregation.

The weighted score is the expectation of the distribution over the 1..4
scale; the winner is its argmax, with ties broken toward the lower score so
reruns are reproducible. Iterations whose responses could not be parsed are
retained with a reason code and excluded from aggregate means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Iterable, Sequence

from .errors import InputError, StarscoreError
from .gateway import ResponseRecord
from .parsing import (
    CLASSIFICATION_SUM_TOLERANCE,
    FLAG_SUM_OUT_OF_TOLERANCE,
    SCORES,
    ResponseParseError,
    ScoreDistribution,
    parse_classification_table,
    parse_standard_score,
    parse_token_score,
)
from .prompting import Strategy


class UnusableArticleError(StarscoreError):
    """Every iteration of an article was flagged; nothing to aggregate."""


@dataclass(frozen=True)
class ScoredResult:
    """One parsed iteration; flagged rows may lack a distribution entirely."""

    article_id: str
    strategy: Strategy
    iteration: int
    distribution: ScoreDistribution | None
    weighted_score: float | None
    winner: int | None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.distribution is None:
            if not self.flags:
                raise ValueError("a result without a distribution must carry a flag")
            if self.weighted_score is not None or self.winner is not None:
                raise ValueError("scores require a distribution")
        else:
            if self.weighted_score is None or self.winner is None:
                raise ValueError("distribution present but scores missing")


@dataclass(frozen=True)
class ArticleScore:
    article_id: str
    strategy: Strategy
    mean_weighted_score: float
    mean_winner_score: float
    n_iterations_used: int


def weighted_score(distribution: ScoreDistribution) -> float:
    """Expectation of the score under the distribution; always in [1, 4]."""
    return sum(s * distribution.prob(s) for s in SCORES)


def winner(distribution: ScoreDistribution) -> int:
    """Argmax score; ties go to the lower score."""
    best = 1
    for s in (2, 3, 4):
        if distribution.prob(s) > distribution.prob(best):
            best = s
    return best


def score_record(
    record: ResponseRecord,
    sum_tolerance: float = CLASSIFICATION_SUM_TOLERANCE,
) -> ScoredResult:
    """Parse one record under its strategy's rule.

    Unparseable responses come back flagged with the parse reason instead of
    raising, so batch scoring can report exclusion rates. Classification
    tables whose stated percentages do not sum to ~100 keep their normalized
    distribution but are flagged.
    """
    flags: tuple[str, ...] = ()
    try:
        if record.strategy is Strategy.CLASSIFICATION_TABLE:
            parsed = parse_classification_table(record)
            if not parsed.within_tolerance(sum_tolerance):
                flags = (FLAG_SUM_OUT_OF_TOLERANCE,)
            distribution = parsed.to_distribution()
        elif record.strategy is Strategy.TOKEN_SCORE:
            distribution = parse_token_score(record)
        else:
            distribution = ScoreDistribution.point_mass(parse_standard_score(record))
    except ResponseParseError as exc:
        return ScoredResult(
            article_id=record.article_id,
            strategy=record.strategy,
            iteration=record.iteration,
            distribution=None,
            weighted_score=None,
            winner=None,
            flags=(exc.reason,),
        )
    return ScoredResult(
        article_id=record.article_id,
        strategy=record.strategy,
        iteration=record.iteration,
        distribution=distribution,
        weighted_score=weighted_score(distribution),
        winner=winner(distribution),
        flags=flags,
    )


def score_records(
    records: Iterable[ResponseRecord],
    sum_tolerance: float = CLASSIFICATION_SUM_TOLERANCE,
) -> list[ScoredResult]:
    results = [score_record(r, sum_tolerance) for r in records]
    results.sort(key=lambda r: (r.article_id, r.strategy.value, r.iteration))
    return results


def usable(result: ScoredResult, include_out_of_tolerance: bool = False) -> bool:
    if result.distribution is None:
        return False
    if not result.flags:
        return True
    return include_out_of_tolerance and set(result.flags) == {FLAG_SUM_OUT_OF_TOLERANCE}


def aggregate(
    results: Sequence[ScoredResult],
    include_out_of_tolerance: bool = False,
) -> ArticleScore:
    """Arithmetic means of weighted score and winner over usable iterations."""
    if not results:
        raise InputError("cannot aggregate an empty result list")
    article_ids = {r.article_id for r in results}
    strategies = {r.strategy for r in results}
    if len(article_ids) != 1 or len(strategies) != 1:
        raise InputError(
            f"aggregate expects one article and strategy, got {article_ids} / {strategies}"
        )
    used = [r for r in results if usable(r, include_out_of_tolerance)]
    if not used:
        raise UnusableArticleError(
            f"article {next(iter(article_ids))!r}: all {len(results)} iteration(s) flagged"
        )
    return ArticleScore(
        article_id=used[0].article_id,
        strategy=used[0].strategy,
        mean_weighted_score=fmean(r.weighted_score for r in used),
        mean_winner_score=fmean(r.winner for r in used),
        n_iterations_used=len(used),
    )


def aggregate_all(
    results: Iterable[ScoredResult],
    include_out_of_tolerance: bool = False,
) -> tuple[list[ArticleScore], list[tuple[str, Strategy, str]]]:
    """Aggregate per (article, strategy); unusable articles are reported, not fatal."""
    groups: dict[tuple[str, Strategy], list[ScoredResult]] = {}
    for r in results:
        groups.setdefault((r.article_id, r.strategy), []).append(r)
    scores: list[ArticleScore] = []
    unusable: list[tuple[str, Strategy, str]] = []
    for (article_id, strategy), group in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        try:
            scores.append(aggregate(group, include_out_of_tolerance))
        except UnusableArticleError as exc:
            unusable.append((article_id, strategy, str(exc)))
    return scores, unusable


_SCORE_COLUMNS = (
    "article_id", "strategy", "iteration",
    "p1", "p2", "p3", "p4", "weighted", "winner", "flags",
)


def _result_row(result: ScoredResult) -> list[str]:
    probs = result.distribution.p if result.distribution else (None,) * 4
    return [
        result.article_id,
        result.strategy.value,
        str(result.iteration),
        *(("" if v is None else repr(v)) for v in probs),
        "" if result.weighted_score is None else repr(result.weighted_score),
        "" if result.winner is None else str(result.winner),
        ";".join(result.flags),
    ]


def write_scores(results: Iterable[ScoredResult], path: str | Path) -> None:
    """Persist scored rows as CSV or JSONL (by suffix); floats round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for r in results:
                fh.write(json.dumps(dict(zip(_SCORE_COLUMNS, _result_row(r))), sort_keys=True))
                fh.write("\n")
    else:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(_SCORE_COLUMNS)
            for r in results:
                writer.writerow(_result_row(r))


def read_scores(path: str | Path) -> list[ScoredResult]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"scores file not found: {path}")
    rows: list[dict] = []
    if path.suffix.lower() == ".jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    else:
        with path.open(encoding="utf-8", newline="") as fh:
            rows.extend(csv.DictReader(fh))
    results = []
    for row in rows:
        missing = [c for c in ("article_id", "strategy", "iteration") if not row.get(c)]
        if missing:
            raise InputError(f"{path}: scored rows lack column(s) {', '.join(missing)}")
        probs = [row.get(f"p{s}") or None for s in SCORES]
        distribution = (
            ScoreDistribution(tuple(float(v) for v in probs)) if all(probs) else None
        )
        weighted = row.get("weighted") or None
        win = row.get("winner") or None
        flags = tuple(f for f in (row.get("flags") or "").split(";") if f)
        results.append(
            ScoredResult(
                article_id=row["article_id"],
                strategy=Strategy(row["strategy"]),
                iteration=int(row["iteration"]),
                distribution=distribution,
                weighted_score=float(weighted) if weighted else None,
                winner=int(win) if win else None,
                flags=flags,
            )
        )
    return results
