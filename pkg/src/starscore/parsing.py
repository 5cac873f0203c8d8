"""Turn raw responses into score distributions.

Two parsing rules, one per strategy:

* classification tables: extract the four "N*: x%" lines, tolerating variable
  spacing and a short review paragraph occasionally appended after the table;
  a table whose percentages stray more than 1 point from 100 is flagged.
* token scores: scan output positions in order until the *chosen* token
  normalizes to a score (alternatives never trigger a match on their own,
  since early positions can be preamble like "Score"); then keep that
  position's score-like alternatives, exponentiate their logprobs,
  renormalize to sum 1, and zero-fill the scores that never appeared.
  Number words (" three") are not scores.

Long-form responses give the score only after a discussion, so the standard
rule takes the last digit-asterisk match in the text.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

from .errors import StarscoreError
from .gateway import ResponseRecord

SCORES = (1, 2, 3, 4)
PROB_SUM_TOLERANCE = 1e-9

# A stated percentage table may be off by up to one point before it is flagged.
CLASSIFICATION_SUM_TOLERANCE = 1.0

FLAG_SUM_OUT_OF_TOLERANCE = "sum-out-of-tolerance"


class ResponseParseError(StarscoreError):
    """A response could not be parsed under its strategy's rule."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class ScoreDistribution:
    """Probabilities over the four quality levels, ordered 1* to 4*."""

    p: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.p) != 4:
            raise ValueError("expected exactly four probabilities")
        if any(v < 0 for v in self.p):
            raise ValueError(f"probabilities must be nonnegative: {self.p}")
        total = sum(self.p)
        if abs(total - 1.0) > PROB_SUM_TOLERANCE:
            raise ValueError(f"probabilities must sum to 1, got {total!r}")

    def prob(self, score: int) -> float:
        return self.p[score - 1]

    def as_dict(self) -> dict[int, float]:
        return {s: self.p[s - 1] for s in SCORES}

    @classmethod
    def from_weights(cls, weights: Mapping[int, float]) -> "ScoreDistribution":
        """Renormalize nonnegative weights over a subset of scores; absent
        scores get probability zero."""
        total = sum(weights.values())
        if total <= 0:
            raise ValueError("weights must have positive total")
        return cls(tuple(weights.get(s, 0.0) / total for s in SCORES))

    @classmethod
    def point_mass(cls, score: int) -> "ScoreDistribution":
        if score not in SCORES:
            raise ValueError(f"score must be in 1..4, got {score}")
        return cls(tuple(1.0 if s == score else 0.0 for s in SCORES))


@dataclass(frozen=True)
class ParsedPercentages:
    """The four stated percentages, as written, before normalization."""

    raw_pct: tuple[float, float, float, float]
    trailing_commentary: str | None = None

    def __post_init__(self) -> None:
        if any(not 0 <= v <= 100 for v in self.raw_pct):
            raise ValueError(f"percentages must be in [0, 100]: {self.raw_pct}")

    @property
    def total(self) -> float:
        return sum(self.raw_pct)

    def within_tolerance(self, tolerance: float = CLASSIFICATION_SUM_TOLERANCE) -> bool:
        return abs(self.total - 100.0) <= tolerance

    def to_distribution(self) -> ScoreDistribution:
        return ScoreDistribution.from_weights(
            {s: self.raw_pct[s - 1] for s in SCORES}
        )


_PCT_LINE = re.compile(
    r"^[ \t]*[-*•]*[ \t]*([1-4])\*[ \t]*:[ \t]*(\d+(?:\.\d+)?)[ \t]*%",
    re.MULTILINE,
)


def parse_classification_table(record: ResponseRecord) -> ParsedPercentages:
    """Extract the four "N*: x%" lines from a classification response.

    Raises ``ResponseParseError`` when any score line is missing or a stated
    percentage is outside [0, 100]. The sum-vs-100 check is left to the
    caller via ``within_tolerance`` so flagged tables can still be retained.
    """
    found: dict[int, float] = {}
    last_end = 0
    for match in _PCT_LINE.finditer(record.content):
        score = int(match.group(1))
        if score not in found:
            found[score] = float(match.group(2))
        last_end = max(last_end, match.end())
    missing = [s for s in SCORES if s not in found]
    if missing:
        raise ResponseParseError(
            "missing-score-lines",
            f"found percentage lines for {sorted(found)} but not {missing}",
        )
    out_of_range = {s: v for s, v in found.items() if v > 100}
    if out_of_range:
        raise ResponseParseError(
            "bad-percentage", f"percentage out of [0, 100]: {out_of_range}"
        )
    commentary = record.content[last_end:].strip() or None
    return ParsedPercentages(
        raw_pct=tuple(found[s] for s in SCORES),
        trailing_commentary=commentary,
    )


# A token "is" a score when it is one digit 1-4 dressed only in whitespace
# and/or asterisks: "3", "4*", " 3", "*2*". Multi-digit tokens and number
# words never qualify.
_SCORE_TOKEN = re.compile(r"[\s*]*([1-4])[\s*]*")


def normalize_score_token(token: str) -> int | None:
    match = _SCORE_TOKEN.fullmatch(token)
    return int(match.group(1)) if match else None


def parse_token_score(record: ResponseRecord) -> ScoreDistribution:
    """Distribution from the first output position whose chosen token is a score.

    At that position, alternatives normalizing to scores have their logprobs
    exponentiated and renormalized; scores not among them get probability 0.
    If two alternatives normalize to the same score their probabilities add.
    """
    if not record.token_logprobs:
        raise ResponseParseError(
            "missing-logprobs", f"record {record.article_id!r} carries no token logprobs"
        )
    for position in record.token_logprobs:
        if normalize_score_token(position.chosen_token) is None:
            continue
        weights: dict[int, float] = {}
        for token, logprob in position.alternatives:
            score = normalize_score_token(token)
            if score is not None:
                weights[score] = weights.get(score, 0.0) + math.exp(logprob)
        # The chosen token itself normalizes, so the set cannot be empty.
        assert weights, "matched position lost its own chosen token"
        return ScoreDistribution.from_weights(weights)
    raise ResponseParseError(
        "no-score-token",
        f"no output token normalizes to a score in {record.content!r}",
    )


_FINAL_SCORE = re.compile(r"(?<!\d)([1-4])\*")


def parse_standard_score(record: ResponseRecord) -> int:
    """Last digit-asterisk score in a long-form response (score after discussion)."""
    matches = _FINAL_SCORE.findall(record.content)
    if not matches:
        raise ResponseParseError(
            "no-score", f"no digit-asterisk score found in {record.content[:80]!r}"
        )
    return int(matches[-1])
