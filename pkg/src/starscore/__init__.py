"""Research-quality scoring from LLM score-probability distributions.

Pipeline: load a corpus of (title, abstract) articles, request quality
scores on the 1*-4* scale from a chat-completion endpoint under one of three
strategies (explicit percentage tables, single score with token logprobs,
long-form standard prompt), convert responses into probability-weighted
scores, and evaluate them by rank correlation against departmental proxy
means plus a self-consistency MAD analysis.
"""

from .analytics import consistency_mad, evaluate, profile_histogram, spearman
from .corpus import Article, ProxyScore, generate_synthetic_corpus, load_corpus, load_proxy_scores
from .gateway import ChatCompletionClient, GatewayConfig, ResponseRecord, ResponseStore, replay, run_batch
from .parsing import (
    ParsedPercentages,
    ScoreDistribution,
    parse_classification_table,
    parse_standard_score,
    parse_token_score,
)
from .prompting import (
    PromptBundle,
    Strategy,
    SystemInstructionSet,
    build_classification_prompt,
    build_standard_prompt,
    build_token_prompt,
)
from .reports import EvalReport, build_report, write_report
from .scoring import ArticleScore, ScoredResult, aggregate, weighted_score, winner

__version__ = "0.1.0"

__all__ = [
    "Article",
    "ArticleScore",
    "ChatCompletionClient",
    "EvalReport",
    "GatewayConfig",
    "ParsedPercentages",
    "PromptBundle",
    "ProxyScore",
    "ResponseRecord",
    "ResponseStore",
    "ScoreDistribution",
    "ScoredResult",
    "Strategy",
    "SystemInstructionSet",
    "aggregate",
    "build_classification_prompt",
    "build_report",
    "build_standard_prompt",
    "build_token_prompt",
    "consistency_mad",
    "evaluate",
    "generate_synthetic_corpus",
    "load_corpus",
    "load_proxy_scores",
    "parse_classification_table",
    "parse_standard_score",
    "parse_token_score",
    "profile_histogram",
    "replay",
    "run_batch",
    "spearman",
    "weighted_score",
    "winner",
    "write_report",
]
