"""Chat-completion exchange with persistence and record/replay.

Every wire payload is appended to a JSONL store *before* parsing, so a
malformed response is still recoverable and a completed batch can be replayed
offline with bit-identical downstream results. Requests retry transient
failures with exponential backoff plus jitter.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .corpus import Article
from .errors import InputError, OperationalError
from .prompting import PromptBundle, Strategy, SystemInstructionSet, build_prompt


class GatewayError(OperationalError):
    """Endpoint or store failure."""


class AuthenticationError(GatewayError):
    """Credential rejected; never retried."""


class RateLimitError(GatewayError):
    """Rate limiting persisted past the retry cap."""


class MalformedPayloadError(GatewayError):
    """The endpoint returned a payload we cannot parse (persisted first)."""


class MissingRecordError(GatewayError):
    """Replay requested a record the store does not hold."""


class StoreCorruptError(GatewayError):
    """A store line failed to parse."""


class MissingCredentialError(OperationalError):
    """The API credential environment variable is unset."""


@dataclass(frozen=True)
class TokenAlternatives:
    """Top-k alternative tokens at one output position, best first."""

    chosen_token: str
    alternatives: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if not self.alternatives:
            raise ValueError("alternatives must be nonempty")
        if len(self.alternatives) > 5:
            raise ValueError("at most 5 alternatives per position")
        logprobs = [lp for _, lp in self.alternatives]
        if any(a < b for a, b in zip(logprobs, logprobs[1:])):
            raise ValueError("alternatives must be sorted by logprob descending")
        if all(tok != self.chosen_token for tok, _ in self.alternatives):
            raise ValueError("chosen token must appear among its alternatives")

    @classmethod
    def from_wire(cls, entry: dict) -> "TokenAlternatives":
        chosen = str(entry["token"])
        chosen_lp = float(entry["logprob"])
        alts = [(str(d["token"]), float(d["logprob"])) for d in entry.get("top_logprobs", [])]
        if all(tok != chosen for tok, _ in alts):
            # Sampling can pick a token outside the reported top-k; keep the
            # chosen token in the set by displacing the weakest alternative.
            if len(alts) >= 5:
                alts = alts[:4]
            alts.append((chosen, chosen_lp))
        alts.sort(key=lambda pair: -pair[1])
        return cls(chosen_token=chosen, alternatives=tuple(alts))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_text: str
    user_text: str
    max_tokens: int
    logprobs: bool
    top_logprobs: int
    temperature: float | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.top_logprobs > 0 and not self.logprobs:
            raise ValueError("top_logprobs > 0 requires logprobs")

    @classmethod
    def from_bundle(
        cls, bundle: PromptBundle, model_id: str, temperature: float | None = None
    ) -> "ChatRequest":
        return cls(
            model_id=model_id,
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            max_tokens=bundle.max_response_tokens,
            logprobs=bundle.logprobs_requested,
            top_logprobs=bundle.top_logprobs,
            temperature=temperature,
        )

    def to_payload(self) -> dict:
        payload: dict = {
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": self.user_text},
            ],
            "max_tokens": self.max_tokens,
            "logprobs": self.logprobs,
        }
        if self.logprobs and self.top_logprobs:
            payload["top_logprobs"] = self.top_logprobs
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        return payload

    def fingerprint(self, article_id: str, iteration: int) -> str:
        blob = json.dumps(
            {
                "article_id": article_id,
                "iteration": iteration,
                "max_tokens": self.max_tokens,
                "logprobs": self.logprobs,
                "top_logprobs": self.top_logprobs,
                "model_id": self.model_id,
                "system_text": self.system_text,
                "temperature": self.temperature,
                "user_text": self.user_text,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ResponseRecord:
    """One parsed exchange, replayable from the store by its key."""

    request_fingerprint: str
    article_id: str
    strategy: Strategy
    iteration: int
    model_id: str
    timestamp: str
    content: str
    token_logprobs: tuple[TokenAlternatives, ...] = ()

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ValueError("iteration must be >= 1")


def parse_wire_payload(
    payload_text: str, expect_logprobs: bool
) -> tuple[str, tuple[TokenAlternatives, ...]]:
    """Extract message content and per-token alternatives from a response body."""
    try:
        data = json.loads(payload_text)
    except json.JSONDecodeError as exc:
        raise MalformedPayloadError(f"response body is not valid JSON: {exc}") from exc
    try:
        choice = data["choices"][0]
        content = choice["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedPayloadError(f"response missing choices[0].message.content: {exc}") from exc
    if not isinstance(content, str):
        raise MalformedPayloadError("message content is not a string")
    if not expect_logprobs:
        return content, ()
    logprobs = choice.get("logprobs")
    entries = (logprobs or {}).get("content")
    if not entries:
        raise MalformedPayloadError("logprobs requested but absent from response")
    try:
        positions = tuple(TokenAlternatives.from_wire(e) for e in entries)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedPayloadError(f"unparseable logprobs entry: {exc}") from exc
    return content, positions


class ResponseStore:
    """Append-only JSONL store of raw exchanges keyed (article, strategy, iteration).

    Appends are serialized with a lock; if a key was somehow written twice the
    last line wins on load.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str, int], dict] | None = None

    @staticmethod
    def _key(article_id: str, strategy: Strategy, iteration: int) -> tuple[str, str, int]:
        return (article_id, Strategy(strategy).value, int(iteration))

    def _load_index(self) -> dict[tuple[str, str, int], dict]:
        if self._index is None:
            index: dict[tuple[str, str, int], dict] = {}
            if self.path.exists():
                with self.path.open(encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, start=1):
                        if not line.strip():
                            continue
                        try:
                            entry = json.loads(line)
                            key = self._key(
                                entry["article_id"], entry["strategy"], entry["iteration"]
                            )
                        except (json.JSONDecodeError, KeyError, ValueError) as exc:
                            raise StoreCorruptError(
                                f"{self.path}:{lineno}: unreadable store line: {exc}"
                            ) from exc
                        index[key] = entry
            self._index = index
        return self._index

    def has(self, article_id: str, strategy: Strategy, iteration: int) -> bool:
        return self._key(article_id, strategy, iteration) in self._load_index()

    def keys(self) -> list[tuple[str, str, int]]:
        return sorted(self._load_index())

    def append(
        self,
        article_id: str,
        strategy: Strategy,
        iteration: int,
        fingerprint: str,
        model_id: str,
        timestamp: str,
        payload_text: str,
    ) -> None:
        entry = {
            "article_id": article_id,
            "strategy": Strategy(strategy).value,
            "iteration": int(iteration),
            "fingerprint": fingerprint,
            "model_id": model_id,
            "timestamp": timestamp,
            "payload": payload_text,
        }
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)
                fh.write("\n")
            self._load_index()[self._key(article_id, strategy, iteration)] = entry

    def get(self, article_id: str, strategy: Strategy, iteration: int) -> dict:
        key = self._key(article_id, strategy, iteration)
        try:
            return self._load_index()[key]
        except KeyError:
            raise MissingRecordError(
                f"no stored record for article={key[0]!r} strategy={key[1]} iteration={key[2]} "
                f"in {self.path}"
            ) from None

    def record(self, article_id: str, strategy: Strategy, iteration: int) -> ResponseRecord:
        entry = self.get(article_id, strategy, iteration)
        return _record_from_entry(entry)

    def records(
        self, strategy: Strategy | None = None
    ) -> tuple[list[ResponseRecord], list[tuple[tuple[str, str, int], str]]]:
        """All parseable records plus (key, reason) for stored-but-malformed lines."""
        records: list[ResponseRecord] = []
        malformed: list[tuple[tuple[str, str, int], str]] = []
        wanted = Strategy(strategy).value if strategy is not None else None
        for key in self.keys():
            if wanted is not None and key[1] != wanted:
                continue
            try:
                records.append(_record_from_entry(self._load_index()[key]))
            except MalformedPayloadError as exc:
                malformed.append((key, str(exc)))
        return records, malformed


def _record_from_entry(entry: dict) -> ResponseRecord:
    strategy = Strategy(entry["strategy"])
    content, positions = parse_wire_payload(
        entry["payload"], expect_logprobs=strategy is Strategy.TOKEN_SCORE
    )
    return ResponseRecord(
        request_fingerprint=entry["fingerprint"],
        article_id=entry["article_id"],
        strategy=strategy,
        iteration=int(entry["iteration"]),
        model_id=entry["model_id"],
        timestamp=entry["timestamp"],
        content=content,
        token_logprobs=positions,
    )


def replay(
    store_path: str | Path, article_id: str, strategy: Strategy, iteration: int
) -> ResponseRecord:
    """Return the stored record for a key without any network use."""
    return ResponseStore(store_path).record(article_id, strategy, iteration)


@dataclass
class GatewayConfig:
    base_url: str = "https://api.openai.com/v1"
    model_id: str = "gpt-4o-mini-2024-07-18"
    credential_env: str = "STARSCORE_API_KEY"
    timeout: float = 60.0
    # Number of retries after the first attempt for transient failures.
    max_retries: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    temperature: float | None = None


class ChatCompletionClient:
    """Thin client for the chat-completion HTTP protocol.

    Tests inject an ``httpx.Client`` with a mock transport and a no-op sleep.
    """

    def __init__(
        self,
        config: GatewayConfig | None = None,
        api_key: str | None = None,
        http_client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.config = config or GatewayConfig()
        if api_key is None:
            api_key = os.environ.get(self.config.credential_env)
        if not api_key:
            raise MissingCredentialError(
                f"no API credential: set the {self.config.credential_env} environment variable"
            )
        self._headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }
        self._http = http_client or httpx.Client(timeout=self.config.timeout)
        self._owns_http = http_client is None
        self._sleep = sleep
        self._rng = rng or random.Random()

    def close(self) -> None:
        if self._owns_http:
            self._http.close()

    def __enter__(self) -> "ChatCompletionClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def send(
        self,
        bundle: PromptBundle,
        article_id: str,
        iteration: int,
        store: ResponseStore,
    ) -> ResponseRecord:
        """POST one request, persist the raw body, then parse it.

        Transient failures (429, 5xx, transport errors) retry with exponential
        backoff up to the configured cap; auth failures never retry.
        """
        if iteration < 1:
            raise InputError(f"iteration must be >= 1, got {iteration}")
        request = ChatRequest.from_bundle(bundle, self.config.model_id, self.config.temperature)
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = request.to_payload()
        body = self._post_with_retries(url, payload)
        timestamp = datetime.now(timezone.utc).isoformat()
        fingerprint = request.fingerprint(article_id, iteration)
        # Persist before parsing so a malformed body is never lost.
        store.append(
            article_id=article_id,
            strategy=bundle.strategy,
            iteration=iteration,
            fingerprint=fingerprint,
            model_id=self.config.model_id,
            timestamp=timestamp,
            payload_text=body,
        )
        content, positions = parse_wire_payload(body, expect_logprobs=bundle.logprobs_requested)
        return ResponseRecord(
            request_fingerprint=fingerprint,
            article_id=article_id,
            strategy=bundle.strategy,
            iteration=iteration,
            model_id=self.config.model_id,
            timestamp=timestamp,
            content=content,
            token_logprobs=positions,
        )

    def _post_with_retries(self, url: str, payload: dict) -> str:
        attempt = 0
        while True:
            failure: str | None = None
            rate_limited = False
            try:
                response = self._http.post(url, json=payload, headers=self._headers)
            except httpx.HTTPError as exc:
                failure = f"transport error: {exc}"
            else:
                status = response.status_code
                if status in (401, 403):
                    raise AuthenticationError(f"endpoint rejected credential (HTTP {status})")
                if status == 429:
                    failure = "rate limited (HTTP 429)"
                    rate_limited = True
                elif status >= 500:
                    failure = f"server error (HTTP {status})"
                elif status != 200:
                    raise GatewayError(f"unexpected HTTP {status}: {response.text[:200]}")
                else:
                    return response.text
            attempt += 1
            if attempt > self.config.max_retries:
                message = f"{failure} after {self.config.max_retries} retries"
                raise RateLimitError(message) if rate_limited else GatewayError(message)
            delay = min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1))
            self._sleep(delay + self._rng.uniform(0, self.config.backoff_base))


@dataclass(frozen=True)
class BatchFailure:
    article_id: str
    iteration: int
    reason: str


@dataclass
class BatchResult:
    records: list[ResponseRecord] = field(default_factory=list)
    failures: list[BatchFailure] = field(default_factory=list)
    fetched: int = 0
    reused: int = 0


def run_batch(
    articles: Sequence[Article],
    strategy: Strategy,
    instructions: SystemInstructionSet,
    store: ResponseStore,
    client: ChatCompletionClient,
    iterations: int = 5,
    concurrency_limit: int = 4,
) -> BatchResult:
    """Fetch ``iterations`` records per article, resuming past partial runs.

    Pairs already in the store are reused without network calls. Per-item
    failures are aggregated rather than aborting the batch, except for
    authentication failures, which would doom every remaining request.
    """
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    if concurrency_limit < 1:
        raise InputError(f"concurrency_limit must be >= 1, got {concurrency_limit}")
    result = BatchResult()
    pending: list[tuple[Article, int]] = []
    for article in articles:
        for iteration in range(1, iterations + 1):
            if store.has(article.id, strategy, iteration):
                try:
                    result.records.append(store.record(article.id, strategy, iteration))
                    result.reused += 1
                except MalformedPayloadError as exc:
                    result.failures.append(
                        BatchFailure(article.id, iteration, f"stored payload malformed: {exc}")
                    )
            else:
                pending.append((article, iteration))

    bundles = {a.id: build_prompt(a, strategy, instructions) for a, _ in pending}
    auth_failure: AuthenticationError | None = None
    with ThreadPoolExecutor(max_workers=concurrency_limit) as executor:
        futures = {
            executor.submit(client.send, bundles[a.id], a.id, iteration, store): (a.id, iteration)
            for a, iteration in pending
        }
        for future in as_completed(futures):
            article_id, iteration = futures[future]
            try:
                result.records.append(future.result())
                result.fetched += 1
            except AuthenticationError as exc:
                auth_failure = exc
            except (GatewayError, InputError) as exc:
                result.failures.append(BatchFailure(article_id, iteration, str(exc)))
    if auth_failure is not None:
        raise auth_failure
    result.records.sort(key=lambda r: (r.article_id, r.iteration))
    result.failures.sort(key=lambda f: (f.article_id, f.iteration))
    return result


def replay_batch(
    articles: Sequence[Article],
    strategy: Strategy,
    store: ResponseStore,
    iterations: int = 5,
) -> BatchResult:
    """Assemble a batch purely from the store; missing pairs become failures."""
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    result = BatchResult()
    for article in articles:
        for iteration in range(1, iterations + 1):
            try:
                result.records.append(store.record(article.id, strategy, iteration))
                result.reused += 1
            except (MissingRecordError, MalformedPayloadError) as exc:
                result.failures.append(BatchFailure(article.id, iteration, str(exc)))
    return result
