"""Drive a chat endpoint to produce one visual elaboration per lyric line.

A request covers a whole song: the pinned system-role asset plus a 1-based
numbered list of its lines, so the model sees the full theme. Responses are
parsed back into line-aligned elaborations; a count mismatch or a refusal is
retried under the policy and the song is discarded when attempts run out.
Corpus runs checkpoint into an append-only JSONL store and resume across
restarts without repeating completed requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .chatclient import ChatClient, ChatRequest, RetryPolicy, TokenBucket, TransportError
from .corpus import Song, tokenize

logger = logging.getLogger(__name__)

SYSTEM_ROLE_VERSION = "v1"
SYSTEM_ROLE_SHA256 = "3e30e6aaaa0d8dad2bf6d981783401c9276a34796aa443f0e3156b884130173b"


class RefusalError(RuntimeError):
    """The endpoint answered with refusal text instead of numbered prompts."""


class AlignmentError(RuntimeError):
    """The response item count does not match the requested line count."""

    def __init__(self, n_found: int, n_expected: int):
        super().__init__(f"expected {n_expected} numbered elaborations, found {n_found}")
        self.n_found = n_found
        self.n_expected = n_expected


class CheckpointError(RuntimeError):
    """The elaboration store is unreadable beyond normal crash damage."""


@dataclass(frozen=True)
class SystemRole:
    """The instruction block sent as the system message, pinned by hash."""

    text: str
    version: str

    @classmethod
    def load(cls) -> "SystemRole":
        text = (
            resources.files("versevis.assets").joinpath("system_role.txt").read_text("utf-8")
        )
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        if digest != SYSTEM_ROLE_SHA256:
            raise RuntimeError(
                f"system role asset drifted: sha256 {digest} != pinned {SYSTEM_ROLE_SHA256}"
            )
        return cls(text=text, version=SYSTEM_ROLE_VERSION)


@dataclass(frozen=True)
class VisualElaboration:
    """One line-aligned scene description returned by the endpoint."""

    artist: str
    title: str
    line_index: int
    text: str
    word_count: int

    @classmethod
    def make(cls, artist: str, title: str, line_index: int, text: str) -> "VisualElaboration":
        return cls(
            artist=artist,
            title=title,
            line_index=line_index,
            text=text,
            word_count=len(tokenize(text)),
        )


@dataclass(frozen=True)
class Discarded:
    """A song dropped after exhausting retries; partial results are never kept."""

    artist: str
    title: str
    reason: str
    attempts: int


def build_request(song: Song, role: SystemRole) -> ChatRequest:
    """One deterministic request per song: system role + numbered lines."""
    if not song.lines:
        raise ValueError(f"song {song.artist!r} - {song.title!r} has no lines")
    user = "\n".join(f"{i}. {line.text}" for i, line in enumerate(song.lines, start=1))
    return ChatRequest(system=role.text, user=user)


_ITEM_RE = re.compile(r"^\s*(\d+)\s*[.)]\s*", re.MULTILINE)


def parse_response(raw: str, expected: int) -> list[str]:
    """Split a numbered response into ``expected`` elaboration texts.

    Accepts "N." and "N)" prefixes and tolerant whitespace; items may wrap
    over several physical lines and are collapsed to single-line text.
    Raises RefusalError when no item numbered 1 exists anywhere (the refusal
    signature) and AlignmentError on any count mismatch.
    """
    if expected < 1:
        raise ValueError("expected must be >= 1")
    matches = list(_ITEM_RE.finditer(raw))
    if not any(m.group(1) == "1" for m in matches):
        raise RefusalError(f"no numbered items in response: {raw[:80]!r}")
    texts: list[str] = []
    for pos, match in enumerate(matches):
        end = matches[pos + 1].start() if pos + 1 < len(matches) else len(raw)
        texts.append(" ".join(raw[match.end() : end].split()))
    texts = [t for t in texts if t]
    if len(texts) != expected:
        raise AlignmentError(len(texts), expected)
    return texts


@dataclass(frozen=True)
class RequestSettings:
    """Fan-out and chunking knobs for corpus runs."""

    max_inflight: int = 1
    requests_per_s: float = 0.0
    max_lines_per_request: int = 100
    chunk_overlap: int = 2

    def __post_init__(self) -> None:
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        if self.max_lines_per_request <= self.chunk_overlap:
            raise ValueError("max_lines_per_request must exceed chunk_overlap")


def _request_once(
    client: ChatClient, role: SystemRole, lines: Sequence[str]
) -> list[str]:
    user = "\n".join(f"{i}. {text}" for i, text in enumerate(lines, start=1))
    response = client.complete(ChatRequest(system=role.text, user=user))
    return parse_response(response.text, expected=len(lines))


def elaborate_song(
    song: Song,
    client: ChatClient,
    policy: RetryPolicy | None = None,
    role: SystemRole | None = None,
    settings: RequestSettings | None = None,
    sleep: Callable[[float], None] = time.sleep,
    bucket: TokenBucket | None = None,
) -> list[VisualElaboration] | Discarded:
    """Elaborate every line of ``song`` or discard the song as a whole.

    Long songs are split into chunks of at most ``settings.max_lines_per_request``
    lines; chunks after the first carry the previous ``chunk_overlap`` lines as
    context whose elaborations are dropped. Each chunk gets the full retry
    budget; any exhausted chunk discards the whole song.
    """
    policy = policy or RetryPolicy()
    role = role or SystemRole.load()
    settings = settings or RequestSettings()
    texts = [line.text for line in song.lines]
    if not texts:
        raise ValueError(f"song {song.artist!r} - {song.title!r} has no lines")

    chunks: list[tuple[int, list[str]]] = []  # (n_context_lines, lines)
    if len(texts) <= settings.max_lines_per_request:
        chunks.append((0, texts))
    else:
        chunks.append((0, texts[: settings.max_lines_per_request]))
        start = settings.max_lines_per_request
        while start < len(texts):
            ctx = settings.chunk_overlap
            chunk = texts[start - ctx : start - ctx + settings.max_lines_per_request]
            chunks.append((ctx, chunk))
            start += len(chunk) - ctx
    collected: list[str] = []
    total_attempts = 0
    for ctx, chunk in chunks:
        last_reason = "unknown"
        parsed: list[str] | None = None
        for attempt in range(1, policy.max_attempts + 1):
            total_attempts += 1
            delay = policy.delay_before(attempt)
            if delay:
                sleep(delay)
            if bucket is not None:
                bucket.acquire(sleep=sleep)
            try:
                parsed = _request_once(client, role, chunk)
                break
            except RefusalError as exc:
                last_reason = "refusal"
                logger.info("%s - %s attempt %d refused: %s", song.artist, song.title, attempt, exc)
            except AlignmentError as exc:
                last_reason = "misaligned"
                logger.info(
                    "%s - %s attempt %d misaligned: %s", song.artist, song.title, attempt, exc
                )
            except TransportError as exc:
                last_reason = "transport"
                logger.warning(
                    "%s - %s attempt %d transport failure: %s",
                    song.artist, song.title, attempt, exc,
                )
        if parsed is None:
            return Discarded(
                artist=song.artist, title=song.title, reason=last_reason, attempts=total_attempts
            )
        collected.extend(parsed[ctx:])

    assert len(collected) == len(texts)
    return [
        VisualElaboration.make(song.artist, song.title, i, text)
        for i, text in enumerate(collected)
    ]


@dataclass
class RunReport:
    """What a corpus run did: per-song outcomes plus chunking deviations."""

    songs_total: int = 0
    songs_elaborated: int = 0
    songs_skipped: int = 0
    discarded: list[Discarded] = field(default_factory=list)
    chunked: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "songs_total": self.songs_total,
            "songs_elaborated": self.songs_elaborated,
            "songs_skipped": self.songs_skipped,
            "discarded": [
                {"artist": d.artist, "title": d.title, "reason": d.reason, "attempts": d.attempts}
                for d in self.discarded
            ],
            "chunked": self.chunked,
        }


def store_record(elab: VisualElaboration, line_text: str) -> dict:
    return {
        "artist": elab.artist,
        "title": elab.title,
        "line_index": elab.line_index,
        "line": line_text,
        "elaboration": elab.text,
    }


def load_store(path: str | Path) -> list[VisualElaboration]:
    """Read an elaboration store, tolerating only crash-truncated tails.

    A final line without a trailing newline that fails to parse is dropped
    with a warning (the append-only crash signature). Anything else raises
    :class:`CheckpointError` with recovery instructions. Duplicate
    (artist, title, line_index) records keep the last occurrence.
    """
    path = Path(path)
    if not path.exists():
        return []
    data = path.read_text(encoding="utf-8")
    records: dict[tuple[str, str, int], VisualElaboration] = {}
    lines = data.split("\n")
    trailing_complete = data.endswith("\n")
    if trailing_complete or lines[-1] == "":
        lines = lines[:-1]
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            elab = VisualElaboration.make(
                rec["artist"], rec["title"], int(rec["line_index"]), rec["elaboration"]
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if lineno == len(lines) and not trailing_complete:
                logger.warning(
                    "%s: dropping truncated trailing record (crash remnant): %s", path, exc
                )
                continue
            raise CheckpointError(
                f"{path}:{lineno}: unreadable store record ({exc}). "
                f"Fix or remove the offending line (the store is plain JSONL), "
                f"or delete the file to re-elaborate from scratch."
            ) from exc
        records[(elab.artist, elab.title, elab.line_index)] = elab
    return list(records.values())


def _complete_songs(
    elabs: Iterable[VisualElaboration], corpus: Iterable[Song]
) -> set[tuple[str, str]]:
    """Keys of songs whose store records cover every line index."""
    by_song: dict[tuple[str, str], set[int]] = {}
    for e in elabs:
        by_song.setdefault((e.artist, e.title), set()).add(e.line_index)
    return {
        song.key
        for song in corpus
        if by_song.get(song.key, set()) == {line.index for line in song.lines}
    }


def run_corpus(
    corpus: Sequence[Song],
    client: ChatClient,
    policy: RetryPolicy | None = None,
    checkpoint: str | Path = "elaborations.jsonl",
    settings: RequestSettings | None = None,
    role: SystemRole | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[VisualElaboration], RunReport]:
    """Elaborate a corpus with bounded fan-out, resuming from the checkpoint.

    Results are appended to the store in corpus order by a single writer, so
    reruns produce identical files; songs already covered by the store are
    skipped without new requests. Returns the full store contents (old and
    new) plus the run report.
    """
    policy = policy or RetryPolicy()
    settings = settings or RequestSettings()
    role = role or SystemRole.load()
    checkpoint = Path(checkpoint)

    existing = load_store(checkpoint)
    done = _complete_songs(existing, corpus)
    report = RunReport(songs_total=len(corpus), songs_skipped=len(done))
    pending = [song for song in corpus if song.key not in done]

    bucket = (
        TokenBucket(rate=settings.requests_per_s) if settings.requests_per_s > 0 else None
    )

    def work(song: Song) -> list[VisualElaboration] | Discarded:
        return elaborate_song(
            song, client, policy=policy, role=role, settings=settings, sleep=sleep, bucket=bucket
        )

    fresh: list[VisualElaboration] = []
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    with checkpoint.open("a", encoding="utf-8") as store:
        # results are consumed in corpus order on this thread, so the store
        # stays single-writer and reruns append records in the same order
        def record(song: Song, outcome: list[VisualElaboration] | Discarded) -> None:
            if isinstance(outcome, Discarded):
                report.discarded.append(outcome)
                return
            if len(song.lines) > settings.max_lines_per_request:
                report.chunked.append(
                    {"artist": song.artist, "title": song.title, "lines": len(song.lines)}
                )
            for elab, line in zip(outcome, song.lines):
                store.write(json.dumps(store_record(elab, line.text), ensure_ascii=False) + "\n")
            store.flush()
            fresh.extend(outcome)
            report.songs_elaborated += 1

        if settings.max_inflight == 1:
            for song in pending:
                record(song, work(song))
        else:
            with ThreadPoolExecutor(max_workers=settings.max_inflight) as pool:
                for song, outcome in zip(pending, pool.map(work, pending)):
                    record(song, outcome)

    merged = {(e.artist, e.title, e.line_index): e for e in existing + fresh}
    return list(merged.values()), report
