"""Article corpus and proxy-score ingestion.

Articles arrive as JSONL (one object per line) or CSV with a fixed header;
the proxy table is a CSV of departmental mean quality scores keyed by
(department, unit). A deterministic synthetic generator covers desk-scale
runs where no real corpus is available.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import InputError

MAIN_PANELS = ("A", "B", "C", "D")

# Unit-of-assessment ranges per main panel (inclusive).
_PANEL_RANGES = (("A", 1, 6), ("B", 7, 12), ("C", 13, 24), ("D", 25, 34))

CSV_COLUMNS = ("id", "title", "abstract", "unit", "main_panel", "department_id", "year")
PROXY_COLUMNS = ("dept", "unit", "mean")

MIN_SCORE = 1.0
MAX_SCORE = 4.0


class CorpusError(InputError):
    """A corpus or proxy file failed validation."""


def main_panel_for_unit(unit: int) -> str:
    """Map a unit of assessment (1..34) to its main panel letter."""
    for panel, lo, hi in _PANEL_RANGES:
        if lo <= unit <= hi:
            return panel
    raise CorpusError(f"unit must be in 1..34, got {unit!r}")


@dataclass(frozen=True)
class Article:
    """One scorable item: title and abstract are the only content the LLM sees."""

    id: str
    title: str
    abstract: str
    unit: int
    main_panel: str
    department_id: str
    year: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "title", self.title.strip())
        object.__setattr__(self, "abstract", self.abstract.strip())
        if not self.id:
            raise CorpusError("field 'id' must be nonempty")
        if not self.title:
            raise CorpusError("field 'title' must be nonempty")
        if not self.abstract:
            raise CorpusError("field 'abstract' must be nonempty")
        if not isinstance(self.unit, int) or not 1 <= self.unit <= 34:
            raise CorpusError(f"field 'unit' must be an integer in 1..34, got {self.unit!r}")
        derived = main_panel_for_unit(self.unit)
        if self.main_panel != derived:
            raise CorpusError(
                f"field 'main_panel' is {self.main_panel!r} but unit {self.unit} "
                f"belongs to panel {derived!r}"
            )
        if not self.department_id:
            raise CorpusError("field 'department_id' must be nonempty")
        if not isinstance(self.year, int):
            raise CorpusError(f"field 'year' must be an integer, got {self.year!r}")


@dataclass(frozen=True)
class ProxyScore:
    """Published departmental mean quality score, the evaluation gold standard."""

    department_id: str
    unit: int
    mean_score: float

    def __post_init__(self) -> None:
        if not self.department_id:
            raise CorpusError("field 'dept' must be nonempty")
        if not 1 <= self.unit <= 34:
            raise CorpusError(f"field 'unit' must be in 1..34, got {self.unit!r}")
        if not MIN_SCORE <= self.mean_score <= MAX_SCORE:
            raise CorpusError(
                f"field 'mean' must be in [{MIN_SCORE}, {MAX_SCORE}], got {self.mean_score!r}"
            )


def _article_from_fields(fields: Mapping[str, object], context: str) -> Article:
    missing = [k for k in CSV_COLUMNS if k not in ("main_panel",) and k not in fields]
    if missing:
        raise CorpusError(f"{context}: missing field(s) {', '.join(missing)}")
    try:
        unit = int(str(fields["unit"]))
        year = int(str(fields["year"]))
    except (TypeError, ValueError) as exc:
        raise CorpusError(f"{context}: {exc}") from exc
    panel = str(fields.get("main_panel") or "").strip().upper() or main_panel_for_unit(unit)
    try:
        return Article(
            id=str(fields["id"]),
            title=str(fields["title"]),
            abstract=str(fields["abstract"]),
            unit=unit,
            main_panel=panel,
            department_id=str(fields["department_id"]),
            year=year,
        )
    except CorpusError as exc:
        raise CorpusError(f"{context}: {exc}") from exc


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise CorpusError(f"unknown corpus format {fmt!r}; expected jsonl or csv")
        return fmt
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise CorpusError(f"cannot infer format from {path.name!r}; pass jsonl or csv explicitly")


def load_corpus(path: str | Path, fmt: str | None = None) -> list[Article]:
    """Load and validate articles, rejecting duplicate ids.

    Validation errors carry ``file:line`` context and the failing field name.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    fmt = _detect_format(path, fmt)
    articles: list[Article] = []
    seen: set[str] = set()
    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                context = f"{path}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{context}: invalid JSON: {exc}") from exc
                if not isinstance(obj, dict):
                    raise CorpusError(f"{context}: expected a JSON object")
                articles.append(_article_from_fields(obj, context))
    else:
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise CorpusError(f"{path}:1: empty CSV file")
            unknown = set(reader.fieldnames) - set(CSV_COLUMNS)
            if unknown:
                raise CorpusError(f"{path}:1: unexpected column(s) {sorted(unknown)}")
            for row in reader:
                context = f"{path}:{reader.line_num}"
                if None in row or None in row.values():
                    raise CorpusError(f"{context}: wrong number of columns")
                articles.append(_article_from_fields(row, context))
    for article in articles:
        if article.id in seen:
            raise CorpusError(f"duplicate article id {article.id!r} in {path}")
        seen.add(article.id)
    return articles


def write_corpus(articles: Iterable[Article], path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for a in articles:
                fh.write(json.dumps(a.__dict__, ensure_ascii=False, sort_keys=True))
                fh.write("\n")
    else:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for a in articles:
                writer.writerow([getattr(a, col) for col in CSV_COLUMNS])


def load_proxy_scores(path: str | Path) -> dict[tuple[str, int], float]:
    """Load the proxy table; keys are (department_id, unit), values mean scores."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"proxy file not found: {path}")
    scores: dict[tuple[str, int], float] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CorpusError(f"{path}:1: empty CSV file")
        names = {n.strip(): n for n in reader.fieldnames}
        # Accept the long field names as synonyms for the canonical short header.
        dept_col = names.get("dept") or names.get("department_id")
        unit_col = names.get("unit")
        mean_col = names.get("mean") or names.get("mean_score")
        if not (dept_col and unit_col and mean_col):
            raise CorpusError(f"{path}:1: expected columns {','.join(PROXY_COLUMNS)}")
        for row in reader:
            context = f"{path}:{reader.line_num}"
            try:
                entry = ProxyScore(
                    department_id=str(row[dept_col]),
                    unit=int(row[unit_col]),
                    mean_score=float(row[mean_col]),
                )
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"{context}: {exc}") from exc
            except CorpusError as exc:
                raise CorpusError(f"{context}: {exc}") from exc
            key = (entry.department_id, entry.unit)
            if key in scores:
                raise CorpusError(f"{context}: duplicate (dept, unit) key {key}")
            scores[key] = entry.mean_score
    return scores


def write_proxy_scores(scores: Mapping[tuple[str, int], float], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROXY_COLUMNS)
        for (dept, unit), mean in sorted(scores.items()):
            writer.writerow([dept, unit, repr(mean)])


_TITLE_HEADS = (
    "Robust estimation of", "A longitudinal study of", "Rethinking", "Quantifying",
    "Adaptive methods for", "On the limits of", "Comparative analysis of",
    "A framework for", "Emergent patterns in", "Mechanisms underlying",
)
_TITLE_TOPICS = (
    "network dynamics", "policy diffusion", "protein folding", "soil degradation",
    "market volatility", "narrative identity", "catalytic selectivity",
    "urban mobility", "sensor fusion", "collective memory", "gene regulation",
    "acoustic scattering",
)
_TITLE_TAILS = (
    "in coastal ecosystems", "under resource constraints", "across institutional contexts",
    "with sparse observations", "during rapid transitions", "at continental scale",
    "in heterogeneous populations", "over long horizons",
)
_ABSTRACT_SENTENCES = (
    "We examine how {topic} responds to sustained perturbation using newly assembled panel data.",
    "Prior work has treated {topic} as static; we relax that assumption and model its evolution directly.",
    "Our approach combines established measurement instruments with a purpose-built inference procedure.",
    "Results across three independent samples show consistent effects that survive extensive robustness checks.",
    "The findings carry practical implications for practitioners who must act under uncertainty.",
    "We close by outlining the conditions under which the observed mechanism is likely to generalise.",
    "A replication package accompanies the study.",
)


def generate_synthetic_corpus(
    seed: int,
    n: int,
    units: Sequence[int],
    departments_per_unit: int = 4,
    years: Sequence[int] = tuple(range(2014, 2021)),
) -> tuple[list[Article], dict[tuple[str, int], float]]:
    """Generate a deterministic corpus plus a planted proxy table.

    Each unit gets ``departments_per_unit`` departments with distinct planted
    mean scores spread over the quality scale, so rank statistics computed on
    the output are nondegenerate.
    """
    if n < 1:
        raise CorpusError(f"n must be >= 1, got {n}")
    units = list(dict.fromkeys(units))
    if not units:
        raise CorpusError("unit list is empty")
    for unit in units:
        main_panel_for_unit(unit)
    if departments_per_unit < 2:
        raise CorpusError("need at least 2 departments per unit")

    rng = random.Random(seed)
    proxy: dict[tuple[str, int], float] = {}
    dept_ids: dict[int, list[str]] = {}
    spread = (3.9 - 1.6) / (departments_per_unit - 1)
    for unit in units:
        ids = [f"u{unit:02d}-d{k + 1}" for k in range(departments_per_unit)]
        dept_ids[unit] = ids
        for k, dept in enumerate(ids):
            # Jitter is well under half the gap between planted levels, so the
            # means stay distinct within every unit.
            mean = 1.6 + k * spread + rng.uniform(-0.1, 0.1) * min(1.0, spread / 2)
            proxy[(dept, unit)] = round(min(MAX_SCORE, max(MIN_SCORE, mean)), 3)

    articles: list[Article] = []
    for idx in range(n):
        unit = units[idx % len(units)]
        dept = rng.choice(dept_ids[unit])
        topic = rng.choice(_TITLE_TOPICS)
        title = f"{rng.choice(_TITLE_HEADS)} {topic} {rng.choice(_TITLE_TAILS)}"
        n_sentences = rng.randint(2, len(_ABSTRACT_SENTENCES))
        abstract = " ".join(
            s.format(topic=topic) for s in _ABSTRACT_SENTENCES[:n_sentences]
        )
        articles.append(
            Article(
                id=f"syn-{idx:05d}",
                title=title,
                abstract=abstract,
                unit=unit,
                main_panel=main_panel_for_unit(unit),
                department_id=dept,
                year=rng.choice(list(years)),
            )
        )
    return articles, proxy


def drop_short_abstracts(articles: Sequence[Article], fraction: float = 0.10) -> list[Article]:
    """Drop the shortest ``fraction`` of abstracts within each unit.

    The cut is rank-based per unit (ties broken by id for determinism), so the
    threshold adapts to whatever corpus is loaded.
    """
    if not 0 <= fraction < 1:
        raise CorpusError(f"fraction must be in [0, 1), got {fraction}")
    by_unit: dict[int, list[Article]] = {}
    for a in articles:
        by_unit.setdefault(a.unit, []).append(a)
    dropped: set[str] = set()
    for unit_articles in by_unit.values():
        ranked = sorted(unit_articles, key=lambda a: (len(a.abstract), a.id))
        n_drop = int(len(ranked) * fraction)
        dropped.update(a.id for a in ranked[:n_drop])
    return [a for a in articles if a.id not in dropped]
