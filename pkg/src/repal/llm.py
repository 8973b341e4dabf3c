"""Chat-completion client: dialogue threads, backends, retries, usage accounting.

Two backends speak the same interface: a live client for any OpenAI-compatible
chat-completions endpoint, and a deterministic mock that replays fixtures or
delegates to a scripted generator. Every call is journaled before its reply is
consumed.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass
from threading import BoundedSemaphore, Lock

from .core import canonical_json, sha256_hex

ENV_API_BASE = "REPAL_API_BASE"
ENV_API_KEY = "REPAL_API_KEY"
ENV_MODEL = "REPAL_MODEL"

DEFAULT_TEMPERATURE = 0.6
DEFAULT_MAX_TOKENS = 4096
BASELINE_TEMPERATURE = 0.0


class ChatError(RuntimeError):
    pass


class TransportError(ChatError):
    pass


class ContextLengthError(ChatError):
    def __init__(self, message: str, prompt_tokens: int | None = None, limit: int | None = None):
        super().__init__(message)
        self.prompt_tokens = prompt_tokens
        self.limit = limit


class EmptyCompletionError(ChatError):
    pass


@dataclass(frozen=True)
class ChatParams:
    model: str = "mock"
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    presence_penalty: float = 0.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ChatError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ChatError("max_tokens must be >= 1")

    def for_baseline(self) -> "ChatParams":
        return ChatParams(
            model=self.model,
            temperature=BASELINE_TEMPERATURE,
            max_tokens=self.max_tokens,
            presence_penalty=self.presence_penalty,
        )


@dataclass(frozen=True)
class Message:
    role: str
    text: str


class DialogueThread:
    """Append-only ordered chat messages for one prompt style."""

    def __init__(self, thread_id: str, style_tag: str | None = None):
        self.thread_id = thread_id
        self.style_tag = style_tag
        self._messages: list[Message] = []

    @property
    def messages(self) -> tuple[Message, ...]:
        return tuple(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def append(self, role: str, text: str) -> None:
        if role not in ("system", "user", "assistant"):
            raise ChatError(f"unknown role {role!r}")
        if role == "system":
            if self._messages:
                raise ChatError("system message only allowed first")
        else:
            last = self._messages[-1].role if self._messages else None
            expected = "user" if last in (None, "system", "assistant") else "assistant"
            if role != expected:
                raise ChatError(f"expected {expected} message, got {role}")
        self._messages.append(Message(role, text))

    def digest(self) -> str:
        payload = [self.thread_id] + [[m.role, m.text] for m in self._messages]
        return sha256_hex(canonical_json(payload))

    def fork(self, new_thread_id: str) -> "DialogueThread":
        """Copy of this thread's history under a new identity."""
        other = DialogueThread(new_thread_id, self.style_tag)
        other._messages = list(self._messages)
        return other

    def to_json(self) -> dict:
        return {
            "thread_id": self.thread_id,
            "style_tag": self.style_tag,
            "messages": [{"role": m.role, "text": m.text} for m in self._messages],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DialogueThread":
        thread = cls(data["thread_id"], data.get("style_tag"))
        thread._messages = [Message(m["role"], m["text"]) for m in data["messages"]]
        return thread


@dataclass(frozen=True)
class UsageRecord:
    thread_id: str
    model: str
    prompt_tokens: int
    completion_tokens: int
    cost: float


class UsageLedger:
    """Per-call usage records plus running totals."""

    def __init__(self, prices: dict[str, tuple[float, float]] | None = None):
        self.records: list[UsageRecord] = []
        self.prices = dict(prices or {})
        self._lock = Lock()

    def add(self, thread_id: str, model: str, prompt_tokens: int, completion_tokens: int) -> UsageRecord:
        in_price, out_price = self.prices.get(model, (0.0, 0.0))
        record = UsageRecord(
            thread_id=thread_id,
            model=model,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            cost=prompt_tokens / 1000 * in_price + completion_tokens / 1000 * out_price,
        )
        with self._lock:
            self.records.append(record)
        return record

    @property
    def total_prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.records)

    @property
    def total_completion_tokens(self) -> int:
        return sum(r.completion_tokens for r in self.records)

    @property
    def total_cost(self) -> float:
        return sum(r.cost for r in self.records)

    def to_json(self) -> dict:
        return {
            "records": [
                {
                    "thread_id": r.thread_id,
                    "model": r.model,
                    "prompt_tokens": r.prompt_tokens,
                    "completion_tokens": r.completion_tokens,
                    "cost": r.cost,
                }
                for r in self.records
            ],
            "totals": {
                "prompt_tokens": self.total_prompt_tokens,
                "completion_tokens": self.total_completion_tokens,
                "cost": self.total_cost,
            },
        }


def request_key(thread_id: str, messages: list[dict]) -> str:
    """Digest identifying one completion request: thread identity plus history."""
    return sha256_hex(canonical_json([thread_id, messages]))


def _approx_tokens(texts: list[str]) -> int:
    return sum(len(t) for t in texts) // 4 + len(texts)


class MockBackend:
    """Deterministic offline backend.

    Lookup order: exact fixture keyed on the request digest, then the scripted
    generator. Same thread identity, history, and message always yield the
    same completion.
    """

    def __init__(self, fixtures: dict[str, str] | None = None, generator=None):
        self.fixtures = dict(fixtures or {})
        self.generator = generator

    def add_fixture(self, thread_id: str, messages: list[dict], completion: str) -> str:
        key = request_key(thread_id, messages)
        self.fixtures[key] = completion
        return key

    @classmethod
    def from_journal(cls, journal_path) -> "MockBackend":
        """Replay backend built from a recorded call journal."""
        import json

        backend = cls()
        with open(journal_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                backend.add_fixture(
                    entry["thread_id"],
                    entry["request"]["messages"],
                    entry["response"]["text"],
                )
        return backend

    def complete(self, thread_id: str, messages: list[dict], params: ChatParams):
        key = request_key(thread_id, messages)
        if key in self.fixtures:
            text = self.fixtures[key]
        elif self.generator is not None:
            text = self.generator(thread_id, messages, params)
        else:
            raise ChatError(f"no fixture for request {key[:12]} on thread {thread_id}")
        usage = {
            "prompt_tokens": _approx_tokens([m["content"] for m in messages]),
            "completion_tokens": _approx_tokens([text]),
        }
        return text, usage


class LiveBackend:
    """OpenAI-compatible chat-completions client with bounded retries."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        max_attempts: int = 5,
        timeout: float = 60.0,
        pool_size: int = 4,
    ):
        self.base_url = (base_url or os.environ.get(ENV_API_BASE, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        if not self.base_url:
            raise ChatError(f"no endpoint configured (set {ENV_API_BASE})")
        self.max_attempts = max_attempts
        self.timeout = timeout
        self._slots = BoundedSemaphore(pool_size)

    def complete(self, thread_id: str, messages: list[dict], params: ChatParams):
        import requests

        payload = {
            "model": params.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "presence_penalty": params.presence_penalty,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(min(2 ** (attempt - 1), 30))
            try:
                with self._slots:
                    response = requests.post(
                        url, json=payload, headers=headers, timeout=self.timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code in (429,) or response.status_code >= 500:
                last_error = TransportError(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
                continue
            body = response.json()
            if response.status_code == 400 and "context" in str(body).lower():
                raise ContextLengthError(
                    str(body.get("error", body))[:500],
                    prompt_tokens=_approx_tokens([m["content"] for m in messages]),
                    limit=params.max_tokens,
                )
            if response.status_code != 200:
                raise TransportError(f"HTTP {response.status_code}: {response.text[:500]}")
            choices = body.get("choices") or []
            text = (choices[0].get("message") or {}).get("content") if choices else None
            if not text:
                raise EmptyCompletionError("backend returned an empty completion")
            usage = body.get("usage") or {}
            return text, {
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            }
        raise TransportError(
            f"request failed after {self.max_attempts} attempts: {last_error}"
        )


@dataclass
class JournalEntry:
    seq: int
    thread_id: str
    request: dict
    response: dict


class ChatClient:
    """Drives threads against a backend, journaling and metering every call."""

    def __init__(self, backend, ledger: UsageLedger | None = None, journal_path=None):
        self.backend = backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.journal_path = journal_path
        self._seq = 0
        self._lock = Lock()

    def chat(self, thread: DialogueThread, user_message: str, params: ChatParams) -> str:
        messages = [{"role": m.role, "content": m.text} for m in thread.messages]
        messages.append({"role": "user", "content": user_message})
        text, usage = self.backend.complete(thread.thread_id, messages, params)
        if not text:
            raise EmptyCompletionError("empty completion")
        with self._lock:
            self._seq += 1
            seq = self._seq
        entry = {
            "seq": seq,
            "thread_id": thread.thread_id,
            "request": {
                "messages": messages,
                "params": {
                    "model": params.model,
                    "temperature": params.temperature,
                    "max_tokens": params.max_tokens,
                    "presence_penalty": params.presence_penalty,
                },
            },
            "response": {"text": text, "usage": usage},
        }
        if self.journal_path:
            with self._lock:
                with open(self.journal_path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json(entry) + "\n")
        self.ledger.add(
            thread.thread_id,
            params.model,
            usage["prompt_tokens"],
            usage["completion_tokens"],
        )
        thread.append("user", user_message)
        thread.append("assistant", text)
        return text
