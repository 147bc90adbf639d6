"""Context windows and loss-masked training records.

For a target line ``i`` and context size ``t``, the window holds up to ``t``
preceding lines plus the target, oldest first. A training record serializes
the window as a newline-joined prefix, appends the visual elaboration behind
a reserved separator, and records the half-open character span that a trainer
should compute loss over: exactly the elaboration plus the end marker, never
any prefix character. Spans are character offsets into the full sequence
``prefix + SEPARATOR + target + END_MARKER`` so any downstream tokenizer can
map them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .corpus import Song
from .elaborator import VisualElaboration

SEPARATOR = "\n<ELAB>\n"
END_MARKER = "\n<|end|>"


@dataclass(frozen=True)
class ContextWindow:
    """The serialization-ready slice of a song around one target line."""

    artist: str
    song: str
    target_index: int
    context_size: int
    lines: tuple[str, ...]


@dataclass(frozen=True)
class TrainingRecord:
    prefix_text: str
    target_text: str
    loss_span: tuple[int, int]
    artist: str
    song: str
    line_index: int
    context_size: int

    @property
    def full_sequence(self) -> str:
        return self.prefix_text + SEPARATOR + self.target_text + END_MARKER


def build_context(song: Song, i: int, t: int) -> ContextWindow:
    """Window of min(t, i) preceding lines plus line ``i``, oldest first."""
    if t < 0:
        raise ValueError(f"context size must be >= 0, got {t}")
    if not 0 <= i < len(song.lines):
        raise IndexError(
            f"line index {i} out of range for {song.artist!r} - {song.title!r} "
            f"with {len(song.lines)} lines"
        )
    start = max(0, i - t)
    return ContextWindow(
        artist=song.artist,
        song=song.title,
        target_index=i,
        context_size=t,
        lines=tuple(line.text for line in song.lines[start : i + 1]),
    )


def serialize(window: ContextWindow, elaboration: str) -> TrainingRecord:
    """Pair a window with its elaboration and compute the loss span.

    Deterministic: identical inputs yield byte-identical records. The span is
    verified by slicing before the record is returned.
    """
    if not elaboration:
        raise ValueError("elaboration must be non-empty")
    if SEPARATOR in elaboration:
        raise ValueError(
            f"elaboration for {window.artist!r} - {window.song!r}#{window.target_index} "
            "contains the reserved separator; record would corrupt the loss mask"
        )
    prefix = "\n".join(window.lines)
    start = len(prefix) + len(SEPARATOR)
    full = prefix + SEPARATOR + elaboration + END_MARKER
    span = (start, len(full))
    if full[span[0] : span[1]] != elaboration + END_MARKER:
        raise AssertionError("loss span does not reconstruct the target")
    return TrainingRecord(
        prefix_text=prefix,
        target_text=elaboration,
        loss_span=span,
        artist=window.artist,
        song=window.song,
        line_index=window.target_index,
        context_size=window.context_size,
    )


def emit_dataset(
    corpus: Iterable[Song],
    elaborations: Iterable[VisualElaboration],
    t: int,
) -> Iterator[TrainingRecord]:
    """One record per corpus line, ordered by (artist, title, line index).

    Every line must have exactly one elaboration; a missing or duplicate one
    raises with the offending line named.
    """
    by_line: dict[tuple[str, str, int], str] = {}
    for elab in elaborations:
        key = (elab.artist, elab.title, elab.line_index)
        if key in by_line:
            raise ValueError(f"duplicate elaboration for {key[0]} - {key[1]}#{key[2]}")
        by_line[key] = elab.text

    for song in sorted(corpus, key=lambda s: (s.artist, s.title)):
        for line in song.lines:
            key = (song.artist, song.title, line.index)
            if key not in by_line:
                raise ValueError(f"no elaboration for {song.artist} - {song.title}#{line.index}")
            yield serialize(build_context(song, line.index, t), by_line[key])


def record_to_json(record: TrainingRecord) -> str:
    return json.dumps(
        {
            "prefix": record.prefix_text,
            "target": record.target_text,
            "loss_span": list(record.loss_span),
            "song": record.song,
            "artist": record.artist,
            "line_index": record.line_index,
            "context_size": record.context_size,
        },
        ensure_ascii=False,
    )


def write_dataset(
    corpus: Iterable[Song],
    elaborations: Iterable[VisualElaboration],
    t: int,
    path: str | Path,
) -> int:
    """Write the dataset JSONL for context size ``t``; returns the record count."""
    count = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in emit_dataset(corpus, elaborations, t):
            fh.write(record_to_json(record) + "\n")
            count += 1
    return count
