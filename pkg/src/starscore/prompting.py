"""Prompt construction for the three scoring strategies.

The user-prompt templates are frozen strings pinned by golden-file tests;
prompts carry only the article title and abstract, never authors, journal,
or citation data. System instructions are per-panel text files supplied by
the operator; the packaged defaults are placeholders and scoring runs refuse
them unless explicitly overridden.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

from .corpus import MAIN_PANELS, Article
from .errors import InputError


class Strategy(str, Enum):
    CLASSIFICATION_TABLE = "classification_table"
    TOKEN_SCORE = "token_score"
    STANDARD = "standard"

    @classmethod
    def from_cli(cls, name: str) -> "Strategy":
        aliases = {
            "classification": cls.CLASSIFICATION_TABLE,
            "token": cls.TOKEN_SCORE,
            "standard": cls.STANDARD,
        }
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise InputError(
                f"unknown strategy {name!r}; expected classification, token, or standard"
            ) from None


# The token-score strategy caps the response at five tokens so the first
# star rating met is the final score, and requests the maximum number of
# alternative token probabilities.
TOKEN_SCORE_MAX_TOKENS = 5
TOKEN_SCORE_TOP_LOGPROBS = 5
# Longer strategies allow a discussion before (or after) the score.
LONG_RESPONSE_MAX_TOKENS = 1000

CLASSIFICATION_PREAMBLE = (
    "Given the following article, estimate the likelihood (in percentages) that it "
    "belongs to each of the four quality categories and then stop. "
    "The total should add up to 100%.\n"
    "\n"
    "Categories:\n"
    "\n"
    "- 1*\n"
    "- 2*\n"
    "- 3*\n"
    "- 4*\n"
    "\n"
    "Respond with a list like:\n"
    "\n"
    "- 1*: __%\n"
    "- 2*: __%\n"
    "- 3*: __%\n"
    "- 4*: __%\n"
    "\n"
    "Article:\n"
)

TOKEN_SCORE_FIRST_LINE = (
    "Score this article, giving your answer as one of 1*, 2*, 3*, or 4* then stop:"
)
STANDARD_FIRST_LINE = "Score this journal article:"


class MissingInstructionsError(InputError):
    """No system instructions loaded for a required main panel."""


class PlaceholderInstructionsError(InputError):
    """Placeholder instruction files would be sent to the endpoint."""


PANEL_FILENAMES = {panel: f"panel_{panel.lower()}.txt" for panel in MAIN_PANELS}
PLACEHOLDER_MARKER = "[PLACEHOLDER]"


@dataclass(frozen=True)
class SystemInstructionSet:
    """Per-panel system instruction texts, keyed by main panel letter."""

    texts: Mapping[str, str]

    @classmethod
    def load_dir(cls, directory: str | Path) -> "SystemInstructionSet":
        """Load panel_a.txt..panel_d.txt from a directory; missing files are
        simply absent panels and only error once an article needs them."""
        directory = Path(directory)
        if not directory.is_dir():
            raise MissingInstructionsError(f"instructions directory not found: {directory}")
        texts = {}
        for panel, filename in PANEL_FILENAMES.items():
            path = directory / filename
            if path.exists():
                texts[panel] = path.read_text(encoding="utf-8").strip()
        return cls(texts=texts)

    @classmethod
    def packaged_defaults(cls) -> "SystemInstructionSet":
        """The placeholder instruction files shipped with the package."""
        root = resources.files("starscore").joinpath("instructions")
        texts = {
            panel: root.joinpath(filename).read_text(encoding="utf-8").strip()
            for panel, filename in PANEL_FILENAMES.items()
        }
        return cls(texts=texts)

    def for_panel(self, panel: str) -> str:
        try:
            return self.texts[panel]
        except KeyError:
            raise MissingInstructionsError(
                f"no system instructions loaded for main panel {panel!r} "
                f"(expected {PANEL_FILENAMES.get(panel, '?')})"
            ) from None

    def placeholder_panels(self) -> list[str]:
        return sorted(p for p, t in self.texts.items() if PLACEHOLDER_MARKER in t)

    def require_real(self, allow_placeholders: bool = False) -> None:
        placeholders = self.placeholder_panels()
        if placeholders and not allow_placeholders:
            raise PlaceholderInstructionsError(
                "placeholder instructions loaded for panel(s) "
                f"{', '.join(placeholders)}; supply real instruction files or "
                "override explicitly"
            )


@dataclass(frozen=True)
class PromptBundle:
    """Everything one exchange needs: texts plus the response-shaping knobs."""

    system_text: str
    user_text: str
    strategy: Strategy
    max_response_tokens: int
    logprobs_requested: bool
    top_logprobs: int

    def __post_init__(self) -> None:
        if self.max_response_tokens < 1:
            raise ValueError("max_response_tokens must be positive")
        if not 0 <= self.top_logprobs <= 5:
            raise ValueError("top_logprobs must be in 0..5")
        if self.top_logprobs > 0 and not self.logprobs_requested:
            raise ValueError("top_logprobs > 0 requires logprobs_requested")
        if self.strategy is Strategy.TOKEN_SCORE:
            if (
                self.max_response_tokens != TOKEN_SCORE_MAX_TOKENS
                or not self.logprobs_requested
                or self.top_logprobs != TOKEN_SCORE_TOP_LOGPROBS
            ):
                raise ValueError(
                    "token_score bundles must use max_response_tokens=5, "
                    "logprobs_requested=True, top_logprobs=5"
                )


def build_classification_prompt(
    article: Article, instructions: SystemInstructionSet
) -> PromptBundle:
    """Prompt asking for a percentage-likelihood table over the four levels."""
    return PromptBundle(
        system_text=instructions.for_panel(article.main_panel),
        user_text=CLASSIFICATION_PREAMBLE + article.title + "\n" + article.abstract,
        strategy=Strategy.CLASSIFICATION_TABLE,
        max_response_tokens=LONG_RESPONSE_MAX_TOKENS,
        logprobs_requested=False,
        top_logprobs=0,
    )


def build_token_prompt(article: Article, instructions: SystemInstructionSet) -> PromptBundle:
    """Prompt asking for a single score, with top-5 token logprobs requested."""
    return PromptBundle(
        system_text=instructions.for_panel(article.main_panel),
        user_text=_score_prompt(TOKEN_SCORE_FIRST_LINE, article),
        strategy=Strategy.TOKEN_SCORE,
        max_response_tokens=TOKEN_SCORE_MAX_TOKENS,
        logprobs_requested=True,
        top_logprobs=TOKEN_SCORE_TOP_LOGPROBS,
    )


def build_standard_prompt(article: Article, instructions: SystemInstructionSet) -> PromptBundle:
    """The long-form prompt: score often arrives only after a discussion."""
    return PromptBundle(
        system_text=instructions.for_panel(article.main_panel),
        user_text=_score_prompt(STANDARD_FIRST_LINE, article),
        strategy=Strategy.STANDARD,
        max_response_tokens=LONG_RESPONSE_MAX_TOKENS,
        logprobs_requested=False,
        top_logprobs=0,
    )


def _score_prompt(first_line: str, article: Article) -> str:
    return f"{first_line}\n{article.title}\nAbstract\n{article.abstract}"


_BUILDERS = {
    Strategy.CLASSIFICATION_TABLE: build_classification_prompt,
    Strategy.TOKEN_SCORE: build_token_prompt,
    Strategy.STANDARD: build_standard_prompt,
}


def build_prompt(
    article: Article, strategy: Strategy, instructions: SystemInstructionSet
) -> PromptBundle:
    return _BUILDERS[strategy](article, instructions)
