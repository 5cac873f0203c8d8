from __future__ import annotations

import json
import math
from pathlib import Path

import pytest

from starscore.corpus import MAIN_PANELS, Article
from starscore.gateway import ResponseRecord, TokenAlternatives
from starscore.prompting import Strategy, SystemInstructionSet

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def instructions() -> SystemInstructionSet:
    """Non-placeholder instruction texts for all four panels."""
    return SystemInstructionSet(
        texts={
            panel: (
                "You are an academic expert, assessing academic journal articles "
                "based on originality, significance, and rigour in alignment with "
                f"international research quality standards. Panel {panel} guidance "
                "applies."
            )
            for panel in MAIN_PANELS
        }
    )


def make_article(
    article_id: str = "a-001",
    unit: int = 13,
    title: str = "Adaptive reuse of industrial heritage in shrinking cities",
    abstract: str = (
        "This study examines adaptive reuse pathways for industrial heritage "
        "buildings in three shrinking cities, drawing on interviews with "
        "planners and longitudinal land-use data."
    ),
    department_id: str = "dept-1",
    year: int = 2016,
) -> Article:
    from starscore.corpus import main_panel_for_unit

    return Article(
        id=article_id,
        title=title,
        abstract=abstract,
        unit=unit,
        main_panel=main_panel_for_unit(unit),
        department_id=department_id,
        year=year,
    )


@pytest.fixture
def article() -> Article:
    return make_article()


def text_record(
    content: str,
    strategy: Strategy = Strategy.CLASSIFICATION_TABLE,
    article_id: str = "a-001",
    iteration: int = 1,
) -> ResponseRecord:
    """A record with plain text content and no logprobs."""
    return ResponseRecord(
        request_fingerprint="f" * 64,
        article_id=article_id,
        strategy=strategy,
        iteration=iteration,
        model_id="test-model",
        timestamp="2025-04-06T00:00:00+00:00",
        content=content,
    )


def token_record(
    positions: list[tuple[str, list[tuple[str, float]]]],
    content: str = "Score: 3*\n\n",
    article_id: str = "a-001",
    iteration: int = 1,
) -> ResponseRecord:
    """A token-score record from (chosen_token, [(token, logprob), ...]) positions."""
    return ResponseRecord(
        request_fingerprint="f" * 64,
        article_id=article_id,
        strategy=Strategy.TOKEN_SCORE,
        iteration=iteration,
        model_id="test-model",
        timestamp="2025-04-06T00:00:00+00:00",
        content=content,
        token_logprobs=tuple(
            TokenAlternatives(
                chosen_token=chosen,
                alternatives=tuple(sorted(alts, key=lambda p: -p[1])),
            )
            for chosen, alts in positions
        ),
    )


def token_record_from_probs(
    probs: dict[int, float],
    article_id: str = "a-001",
    iteration: int = 1,
) -> ResponseRecord:
    """A single-position token record whose alternatives carry ln(prob) weights."""
    alts = [(str(s), math.log(p)) for s, p in probs.items() if p > 0]
    alts.sort(key=lambda pair: -pair[1])
    return token_record(
        positions=[(alts[0][0], alts)],
        content=f"Score: {alts[0][0]}*\n\n",
        article_id=article_id,
        iteration=iteration,
    )


def planted_token_store(
    store_path,
    articles,
    targets: dict[str, float],
    iterations: int = 5,
    seed: int = 0,
    noise: float = 0.15,
):
    """Fabricate a complete token-strategy store.

    Each stored payload parses to a distribution whose weighted score is the
    article's target value plus bounded noise, so replaying the store drives
    the whole parse/score/evaluate path with a known planted signal.
    """
    import random

    from starscore.gateway import ResponseStore

    rng = random.Random(seed)
    store = ResponseStore(store_path)
    for article in articles:
        for iteration in range(1, iterations + 1):
            target = min(4.0, max(1.0, targets[article.id] + rng.uniform(-noise, noise)))
            lo = min(int(target), 3)
            frac = target - lo
            probs: dict[str, float] = {}
            if 1 - frac > 1e-12:
                probs[str(lo)] = 1 - frac
            if frac > 1e-12:
                probs[str(lo + 1)] = frac
            alts = sorted(((t, math.log(p)) for t, p in probs.items()), key=lambda kv: -kv[1])
            payload = wire_chat_payload(
                f"Score: {alts[0][0]}*\n\n", positions=[(alts[0][0], alts)]
            )
            store.append(
                article.id,
                "token_score",
                iteration,
                "c0ffee" + "0" * 58,
                "test-model",
                f"2025-04-{(iteration % 9) + 1:02d}T00:00:00+00:00",
                payload,
            )
    return store


def wire_chat_payload(
    content: str,
    positions: list[tuple[str, list[tuple[str, float]]]] | None = None,
    model: str = "test-model",
) -> str:
    """A chat-completion response body as JSON text."""
    choice: dict = {
        "index": 0,
        "message": {"role": "assistant", "content": content, "refusal": None},
        "finish_reason": "stop",
    }
    if positions is not None:
        choice["logprobs"] = {
            "content": [
                {
                    "token": chosen,
                    "logprob": dict(alts)[chosen],
                    "top_logprobs": [{"token": t, "logprob": lp} for t, lp in alts],
                }
                for chosen, alts in positions
            ]
        }
    return json.dumps(
        {"id": "chatcmpl-test", "object": "chat.completion", "model": model, "choices": [choice]}
    )
