from __future__ import annotations

import json
import math
import threading

import httpx
import pytest

from starscore.corpus import generate_synthetic_corpus
from starscore.gateway import (
    AuthenticationError,
    ChatCompletionClient,
    ChatRequest,
    GatewayConfig,
    GatewayError,
    MalformedPayloadError,
    MissingCredentialError,
    MissingRecordError,
    RateLimitError,
    ResponseStore,
    StoreCorruptError,
    TokenAlternatives,
    replay,
    replay_batch,
    run_batch,
)
from starscore.prompting import Strategy, build_token_prompt

from conftest import wire_chat_payload


def make_client(handler, **config_kwargs) -> ChatCompletionClient:
    transport = httpx.MockTransport(handler)
    return ChatCompletionClient(
        config=GatewayConfig(base_url="https://fake.test/v1", backoff_base=0.0, **config_kwargs),
        api_key="test-key",
        http_client=httpx.Client(transport=transport),
        sleep=lambda _: None,
    )


def token_payload(probs: dict[str, float]) -> str:
    alts = sorted(((t, math.log(p)) for t, p in probs.items()), key=lambda kv: -kv[1])
    return wire_chat_payload(f"Score: {alts[0][0]}*\n\n", positions=[(alts[0][0], alts)])


def test_send_token_bundle_populates_logprobs(tmp_path, article, instructions):
    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        assert body["logprobs"] is True
        assert body["top_logprobs"] == 5
        assert body["max_tokens"] == 5
        assert body["messages"][0]["role"] == "system"
        assert body["messages"][1]["role"] == "user"
        return httpx.Response(200, text=token_payload({"3": 0.9, "4": 0.1}))

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler) as client:
        record = client.send(bundle, article.id, 1, store)
    assert record.content == "Score: 3*\n\n"
    assert len(record.token_logprobs) == 1
    assert all(len(pos.alternatives) <= 5 for pos in record.token_logprobs)
    assert store.has(article.id, Strategy.TOKEN_SCORE, 1)


def test_send_classification_bundle(tmp_path, article, instructions):
    from starscore.prompting import build_classification_prompt

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        assert body["logprobs"] is False
        assert "top_logprobs" not in body
        return httpx.Response(
            200, text=wire_chat_payload("1*: 10%\n2*: 20%\n3*: 35%\n4*: 35%")
        )

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_classification_prompt(article, instructions)
    with make_client(handler) as client:
        record = client.send(bundle, article.id, 1, store)
    assert record.content.count("%") == 4
    assert record.token_logprobs == ()


def test_retry_cap_surfaces_server_error(tmp_path, article, instructions):
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(1)
        return httpx.Response(500, text="boom")

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler, max_retries=2) as client:
        with pytest.raises(GatewayError, match="after 2 retries"):
            client.send(bundle, article.id, 1, store)
    assert len(calls) == 3  # one attempt plus two retries
    assert not store.has(article.id, Strategy.TOKEN_SCORE, 1)


def test_rate_limit_retried_then_surfaced(tmp_path, article, instructions):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(429, text="slow down")

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler, max_retries=1) as client:
        with pytest.raises(RateLimitError):
            client.send(bundle, article.id, 1, store)


def test_rate_limit_recovers_within_cap(tmp_path, article, instructions):
    state = {"calls": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        state["calls"] += 1
        if state["calls"] < 3:
            return httpx.Response(429, text="slow down")
        return httpx.Response(200, text=token_payload({"3": 1.0}))

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler, max_retries=5) as client:
        record = client.send(bundle, article.id, 1, store)
    assert record.token_logprobs


def test_auth_failure_is_not_retried(tmp_path, article, instructions):
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(1)
        return httpx.Response(401, text="bad key")

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler) as client:
        with pytest.raises(AuthenticationError):
            client.send(bundle, article.id, 1, store)
    assert len(calls) == 1


def test_missing_credential_names_env_var(monkeypatch):
    monkeypatch.delenv("STARSCORE_API_KEY", raising=False)
    with pytest.raises(MissingCredentialError, match="STARSCORE_API_KEY"):
        ChatCompletionClient(config=GatewayConfig())


def test_malformed_payload_persisted_then_rejected(tmp_path, article, instructions):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, text="this is not json")

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler) as client:
        with pytest.raises(MalformedPayloadError):
            client.send(bundle, article.id, 1, store)
    # Persist-before-parse: the raw body is recoverable from the store.
    entry = store.get(article.id, Strategy.TOKEN_SCORE, 1)
    assert entry["payload"] == "this is not json"


def test_logprobs_missing_when_requested_is_malformed(tmp_path, article, instructions):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, text=wire_chat_payload("Score: 3*"))

    store = ResponseStore(tmp_path / "records.jsonl")
    bundle = build_token_prompt(article, instructions)
    with make_client(handler) as client:
        with pytest.raises(MalformedPayloadError, match="logprobs"):
            client.send(bundle, article.id, 1, store)


def test_replay_round_trip(tmp_path, article, instructions):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, text=token_payload({"2": 0.3, "3": 0.7}))

    store_path = tmp_path / "records.jsonl"
    store = ResponseStore(store_path)
    bundle = build_token_prompt(article, instructions)
    with make_client(handler) as client:
        sent = client.send(bundle, article.id, 3, store)
    replayed = replay(store_path, article.id, Strategy.TOKEN_SCORE, 3)
    assert replayed == sent


def test_store_records_filter_and_mixed_strategies(tmp_path):
    store = ResponseStore(tmp_path / "records.jsonl")
    store.append(
        "a1", Strategy.CLASSIFICATION_TABLE, 1, "f" * 64, "m", "t1",
        wire_chat_payload("1*: 10%\n2*: 20%\n3*: 35%\n4*: 35%"),
    )
    store.append(
        "a1", Strategy.STANDARD, 1, "f" * 64, "m", "t2",
        wire_chat_payload("Long discussion... final verdict 3*"),
    )
    store.append(
        "a1", Strategy.TOKEN_SCORE, 1, "f" * 64, "m", "t3", token_payload({"3": 1.0})
    )
    everything, malformed = store.records()
    assert len(everything) == 3 and not malformed
    classification_only, _ = store.records(Strategy.CLASSIFICATION_TABLE)
    assert [r.strategy for r in classification_only] == [Strategy.CLASSIFICATION_TABLE]
    assert classification_only[0].token_logprobs == ()

    # A stored token payload without logprobs is reported, not silently lost.
    store.append(
        "a2", Strategy.TOKEN_SCORE, 1, "f" * 64, "m", "t4", wire_chat_payload("Score: 3*")
    )
    records, malformed = store.records()
    assert len(records) == 3
    assert malformed[0][0] == ("a2", "token_score", 1)


def test_replay_missing_record_names_key(tmp_path):
    store_path = tmp_path / "records.jsonl"
    ResponseStore(store_path).append(
        "a1", Strategy.TOKEN_SCORE, 1, "f" * 64, "m", "t", token_payload({"3": 1.0})
    )
    with pytest.raises(MissingRecordError, match="iteration=6"):
        replay(store_path, "a1", Strategy.TOKEN_SCORE, 6)


def test_corrupted_store_line_reports_offset(tmp_path):
    store_path = tmp_path / "records.jsonl"
    store = ResponseStore(store_path)
    store.append("a1", Strategy.TOKEN_SCORE, 1, "f" * 64, "m", "t", token_payload({"3": 1.0}))
    with store_path.open("a", encoding="utf-8") as fh:
        fh.write("{broken\n")
    with pytest.raises(StoreCorruptError, match=":2:"):
        ResponseStore(store_path).get("a1", Strategy.TOKEN_SCORE, 1)


def test_run_batch_counts(tmp_path, instructions):
    articles, _ = generate_synthetic_corpus(seed=1, n=3, units=[8])

    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, text=token_payload({"3": 0.8, "4": 0.2}))

    store = ResponseStore(tmp_path / "records.jsonl")
    with make_client(handler) as client:
        result = run_batch(
            articles, Strategy.TOKEN_SCORE, instructions, store, client,
            iterations=5, concurrency_limit=3,
        )
    assert len(result.records) == 15
    assert result.fetched == 15
    assert result.failures == []


def test_run_batch_resumes_fetching_only_missing_pairs(tmp_path, instructions):
    articles, _ = generate_synthetic_corpus(seed=1, n=2, units=[8])
    fetched_keys = []
    lock = threading.Lock()

    def handler(request: httpx.Request) -> httpx.Response:
        with lock:
            fetched_keys.append(1)
        return httpx.Response(200, text=token_payload({"3": 1.0}))

    store = ResponseStore(tmp_path / "records.jsonl")
    with make_client(handler) as client:
        first = run_batch(
            articles, Strategy.TOKEN_SCORE, instructions, store, client, iterations=2
        )
        assert first.fetched == 4 and first.reused == 0
        second = run_batch(
            articles, Strategy.TOKEN_SCORE, instructions, store, client, iterations=3
        )
    assert second.fetched == 2  # only iteration 3 of each article
    assert second.reused == 4
    assert len(fetched_keys) == 6


def test_run_batch_aggregates_failures_without_aborting(tmp_path, instructions):
    articles, _ = generate_synthetic_corpus(seed=1, n=3, units=[8])
    bad = articles[1]

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        if bad.abstract in body["messages"][1]["content"]:
            return httpx.Response(503, text="unavailable")
        return httpx.Response(200, text=token_payload({"3": 1.0}))

    store = ResponseStore(tmp_path / "records.jsonl")
    with make_client(handler, max_retries=0) as client:
        result = run_batch(
            articles, Strategy.TOKEN_SCORE, instructions, store, client, iterations=2
        )
    assert len(result.records) == 4
    assert len(result.failures) == 2
    assert all(f.article_id == bad.id for f in result.failures)


def test_run_batch_serialized_when_concurrency_one(tmp_path, instructions):
    articles, _ = generate_synthetic_corpus(seed=1, n=3, units=[8])
    in_flight = {"now": 0, "max": 0}
    lock = threading.Lock()

    def handler(request: httpx.Request) -> httpx.Response:
        with lock:
            in_flight["now"] += 1
            in_flight["max"] = max(in_flight["max"], in_flight["now"])
        try:
            return httpx.Response(200, text=token_payload({"3": 1.0}))
        finally:
            with lock:
                in_flight["now"] -= 1

    store = ResponseStore(tmp_path / "records.jsonl")
    with make_client(handler) as client:
        run_batch(
            articles, Strategy.TOKEN_SCORE, instructions, store, client,
            iterations=2, concurrency_limit=1,
        )
    assert in_flight["max"] == 1
    timestamps = [
        store.get(key[0], Strategy.TOKEN_SCORE, key[2])["timestamp"] for key in store.keys()
    ]
    assert timestamps == sorted(timestamps)


def test_replay_batch_missing_pairs_become_failures(tmp_path, instructions):
    articles, _ = generate_synthetic_corpus(seed=1, n=2, units=[8])
    store = ResponseStore(tmp_path / "records.jsonl")
    store.append(
        articles[0].id, Strategy.TOKEN_SCORE, 1, "f" * 64, "m", "t",
        token_payload({"3": 1.0}),
    )
    result = replay_batch(articles, Strategy.TOKEN_SCORE, store, iterations=2)
    assert len(result.records) == 1
    assert len(result.failures) == 3


def test_chat_request_invariant_and_fingerprint(article, instructions):
    bundle = build_token_prompt(article, instructions)
    request = ChatRequest.from_bundle(bundle, "m1")
    fp1 = request.fingerprint(article.id, 1)
    fp2 = request.fingerprint(article.id, 2)
    assert fp1 != fp2
    assert len(fp1) == 64
    with pytest.raises(ValueError):
        ChatRequest(
            model_id="m", system_text="s", user_text="u",
            max_tokens=5, logprobs=False, top_logprobs=5,
        )


def test_token_alternatives_keep_chosen_when_outside_top_k():
    entry = {
        "token": "3",
        "logprob": -9.5,
        "top_logprobs": [
            {"token": "2", "logprob": -0.5},
            {"token": "1", "logprob": -1.5},
            {"token": "4", "logprob": -2.5},
            {"token": " ", "logprob": -3.5},
            {"token": "**", "logprob": -4.5},
        ],
    }
    alts = TokenAlternatives.from_wire(entry)
    assert ("3", -9.5) in alts.alternatives
    assert len(alts.alternatives) <= 5
