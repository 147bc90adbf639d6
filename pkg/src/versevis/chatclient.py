"""Chat-completion transport: a real HTTP client and a scripted fake.

Both speak the same contract: POST ``{model, messages, temperature}`` and get
assistant text back. The fake keeps a transcript of every payload, serves
deterministic or scripted responses, and tracks its in-flight high-water mark
so rate-ceiling behaviour is observable in tests.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests


class TransportError(RuntimeError):
    """A request failed at the transport level (network, HTTP status, shape)."""


@dataclass(frozen=True)
class ChatRequest:
    """System instructions plus the numbered-lines user message."""

    system: str
    user: str

    @property
    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user},
        ]


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_status: str = "stop"


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retries with fixed backoff steps; temperature pinned for determinism."""

    max_attempts: int = 3
    backoff_s: tuple[float, ...] = (1.0, 4.0, 16.0)
    temperature: float = 0.0

    def delay_before(self, attempt: int) -> float:
        """Sleep before retry ``attempt`` (attempt 2 waits backoff_s[0], and so on)."""
        if attempt <= 1:
            return 0.0
        steps = self.backoff_s or (1.0,)
        return steps[min(attempt - 2, len(steps) - 1)]


class TokenBucket:
    """Thread-safe token bucket; ``rate`` tokens/second, burst up to ``capacity``."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        if self.capacity < 1.0:
            raise ValueError("capacity must allow at least one token")
        self._tokens = self.capacity
        self._clock = clock
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self, sleep: Callable[[float], None] = time.sleep) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            sleep(wait)


class HttpChatClient:
    """Minimal client for any endpoint honoring the chat-completions shape.

    The API key is read from the environment variable named by
    ``api_key_env`` at call time and never stored on the instance.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = "CHAT_API_KEY",
        temperature: float = 0.0,
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        if not url:
            raise ValueError("endpoint url must be set")
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.model,
            "messages": request.messages,
            "temperature": self.temperature,
        }
        try:
            resp = self._session.post(
                self.url, json=payload, headers=headers, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"chat endpoint returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc
        if not isinstance(text, str):
            raise TransportError("assistant content is not text")
        return ChatResponse(text=text, finish_status=finish or "stop")


_SUBJECTS = (
    "a silver wolf", "an old lighthouse", "a paper boat", "a rusty carousel",
    "three crows", "a glass city", "a lone astronaut", "two tangled kites",
    "a marble statue", "a neon jellyfish", "an oak tree", "a clockwork heart",
)
_ACTIONS = (
    "drifting across", "standing beneath", "dissolving into", "circling above",
    "glowing against", "leaning into", "rising over", "frozen inside",
)
_SCENES = (
    "a violet dusk sky", "an endless salt flat", "a flooded ballroom",
    "a field of white poppies", "a storm of falling embers", "a mirror-calm sea",
    "a canyon of stacked books", "an abandoned fairground",
)


def scripted_elaboration(line: str) -> str:
    """Deterministic single-line scene description for a lyric line."""
    digest = hashlib.sha256(line.encode("utf-8")).digest()
    subject = _SUBJECTS[digest[0] % len(_SUBJECTS)]
    action = _ACTIONS[digest[1] % len(_ACTIONS)]
    scene = _SCENES[digest[2] % len(_SCENES)]
    return f"{subject} {action} {scene}"


@dataclass
class FakeChatClient:
    """Offline stand-in for the chat endpoint.

    With ``script`` set, responses (or exceptions) are served in order and the
    default generator takes over once the script is exhausted. Each call's
    payload is appended to ``transcript``; ``max_observed_inflight`` records
    the concurrency high-water mark.
    """

    script: list[str | Exception] | None = None
    latency_s: float = 0.0
    transcript: list[dict] = field(default_factory=list)
    max_observed_inflight: int = 0
    _inflight: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self._inflight += 1
            self.max_observed_inflight = max(self.max_observed_inflight, self._inflight)
            self.transcript.append(
                {"messages": request.messages, "temperature": 0.0}
            )
            step = self.script.pop(0) if self.script else None
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            if isinstance(step, Exception):
                raise step
            if isinstance(step, str):
                return ChatResponse(text=step)
            lines = request.user.splitlines()
            numbered = [
                f"{i}. {scripted_elaboration(_strip_numbering(line))}"
                for i, line in enumerate(lines, start=1)
            ]
            return ChatResponse(text="\n".join(numbered))
        finally:
            with self._lock:
                self._inflight -= 1


def _strip_numbering(line: str) -> str:
    head, _, rest = line.partition(". ")
    return rest if head.strip().isdigit() else line
