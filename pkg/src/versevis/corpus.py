"""Lyrics corpus ingestion and filtering.

Raw scraper output (JSONL, one song per line) is parsed into ``Song`` values
with recomputed per-line word statistics, then passed through three filters:
line-level bounds on unique words and total length, a song-level minimum of
qualifying lines, and a per-artist popularity cap. Filtering is pure; the only
I/O lives in :func:`ingest` and the JSONL writers.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

# Rejection reason tags used in FilterReport.rejections.
REJECT_LINE_UNIQUE = "line_unique_words"
REJECT_LINE_LENGTH = "line_length"
REJECT_SONG_QUALIFYING = "song_qualifying_lines"
REJECT_ARTIST_CAP = "artist_cap"
REJECT_PARSE = "parse_error"


class DuplicateRankError(ValueError):
    """Two songs of one artist share a popularity rank (corrupt scrape)."""


_PUNCT_CHARS = "".join(
    chr(c) for c in range(128) if unicodedata.category(chr(c)).startswith("P")
)


def tokenize(text: str) -> list[str]:
    """Split ``text`` into case-folded words.

    Rule: split on whitespace, case-fold each token, strip leading/trailing
    punctuation (unicode category P*). Tokens that are punctuation-only
    disappear. Any valid unicode input is accepted; "" yields [].
    """
    tokens = []
    for raw in text.split():
        tok = raw.casefold().strip(_PUNCT_CHARS) if raw.isascii() else _strip_punct(raw.casefold())
        if tok:
            tokens.append(tok)
    return tokens


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


@dataclass(frozen=True)
class LyricLine:
    """One lyric line with its word statistics."""

    index: int
    text: str
    word_count: int
    unique_word_count: int

    @classmethod
    def from_text(cls, index: int, text: str) -> "LyricLine":
        tokens = tokenize(text)
        return cls(
            index=index,
            text=text,
            word_count=len(tokens),
            unique_word_count=len(set(tokens)),
        )


@dataclass(frozen=True)
class Song:
    """An artist's song: ordered lyric lines plus its popularity rank (1 = most popular)."""

    artist: str
    title: str
    popularity_rank: int
    lines: tuple[LyricLine, ...]

    def __post_init__(self) -> None:
        for pos, line in enumerate(self.lines):
            if line.index != pos:
                raise ValueError(
                    f"lines of {self.artist!r} - {self.title!r} are not contiguously "
                    f"indexed: position {pos} holds index {line.index}"
                )

    @classmethod
    def from_texts(
        cls, artist: str, title: str, popularity_rank: int, texts: Iterable[str]
    ) -> "Song":
        lines = tuple(LyricLine.from_text(i, t) for i, t in enumerate(texts))
        return cls(artist=artist, title=title, popularity_rank=popularity_rank, lines=lines)

    @property
    def key(self) -> tuple[str, str]:
        return (self.artist, self.title)


@dataclass(frozen=True)
class FilterConfig:
    """Bounds for the corpus filters; all fields must be >= 1."""

    min_qualifying_lines: int = 15
    min_unique_per_qualifying_line: int = 4
    min_line_unique_words: int = 2
    max_line_words: int = 20
    top_songs_per_artist: int = 50

    def __post_init__(self) -> None:
        for name in (
            "min_qualifying_lines",
            "min_unique_per_qualifying_line",
            "min_line_unique_words",
            "max_line_words",
            "top_songs_per_artist",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"FilterConfig.{name} must be an integer >= 1, got {value!r}")


@dataclass
class FilterReport:
    """Counts of what went in, what survived, and why the rest was dropped."""

    songs_in: int = 0
    songs_out: int = 0
    lines_in: int = 0
    lines_out: int = 0
    rejections: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "songs_in": self.songs_in,
            "songs_out": self.songs_out,
            "lines_in": self.lines_in,
            "lines_out": self.lines_out,
            "rejections": dict(self.rejections),
        }


def filter_line(line: LyricLine, cfg: FilterConfig) -> str | None:
    """Return a rejection reason for ``line``, or None to keep it.

    A line is rejected when it has fewer than ``min_line_unique_words`` unique
    words (checked first) or more than ``max_line_words`` words in total.
    """
    if line.unique_word_count < cfg.min_line_unique_words:
        return REJECT_LINE_UNIQUE
    if line.word_count > cfg.max_line_words:
        return REJECT_LINE_LENGTH
    return None


def filter_song(song: Song, cfg: FilterConfig) -> str | None:
    """Return a rejection reason for ``song``, or None to keep it.

    Expects line-filtered input: a song survives only if at least
    ``min_qualifying_lines`` of its remaining lines each have at least
    ``min_unique_per_qualifying_line`` unique words.
    """
    qualifying = sum(
        1 for line in song.lines
        if line.unique_word_count >= cfg.min_unique_per_qualifying_line
    )
    if qualifying < cfg.min_qualifying_lines:
        return REJECT_SONG_QUALIFYING
    return None


def cap_artist(songs: list[Song], cfg: FilterConfig) -> list[Song]:
    """Keep each artist's songs with popularity_rank <= top_songs_per_artist.

    Original relative order is preserved. A repeated (artist, popularity_rank)
    pair signals a corrupt scrape and raises :class:`DuplicateRankError`.
    """
    seen: set[tuple[str, int]] = set()
    for song in songs:
        pair = (song.artist, song.popularity_rank)
        if pair in seen:
            raise DuplicateRankError(
                f"duplicate popularity rank {song.popularity_rank} for artist {song.artist!r}"
            )
        seen.add(pair)
    return [s for s in songs if s.popularity_rank <= cfg.top_songs_per_artist]


def filter_corpus(
    songs: Iterable[Song], cfg: FilterConfig | None = None
) -> tuple[list[Song], FilterReport]:
    """Run line filters, then the song filter, then the artist cap.

    Surviving lines are re-indexed from 0 so every output Song keeps the
    contiguous-index invariant. Filtering an already-filtered corpus is a
    no-op, and tightening any bound never grows the kept set.
    """
    cfg = cfg or FilterConfig()
    report = FilterReport()
    line_filtered: list[Song] = []

    for song in songs:
        report.songs_in += 1
        report.lines_in += len(song.lines)
        kept: list[LyricLine] = []
        for line in song.lines:
            reason = filter_line(line, cfg)
            if reason is None:
                kept.append(
                    LyricLine(
                        index=len(kept),
                        text=line.text,
                        word_count=line.word_count,
                        unique_word_count=line.unique_word_count,
                    )
                )
            else:
                report.rejections[reason] += 1
        line_filtered.append(
            Song(
                artist=song.artist,
                title=song.title,
                popularity_rank=song.popularity_rank,
                lines=tuple(kept),
            )
        )

    song_filtered: list[Song] = []
    for song in line_filtered:
        reason = filter_song(song, cfg)
        if reason is None:
            song_filtered.append(song)
        else:
            report.rejections[reason] += 1

    capped = cap_artist(song_filtered, cfg)
    report.rejections[REJECT_ARTIST_CAP] += len(song_filtered) - len(capped)

    report.songs_out = len(capped)
    report.lines_out = sum(len(s.lines) for s in capped)
    return capped, report


def song_from_record(record: dict) -> Song:
    """Build a Song from one parsed JSONL record, recomputing word statistics.

    Accepts the raw shape (``lines`` as strings) and the corpus shape
    (``lines`` as objects with a ``text`` field).
    """
    artist = record["artist"]
    title = record["title"]
    rank = record["popularity_rank"]
    if not isinstance(artist, str) or not isinstance(title, str):
        raise ValueError("artist and title must be strings")
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 1:
        raise ValueError(f"popularity_rank must be an integer >= 1, got {rank!r}")
    raw_lines = record["lines"]
    if not isinstance(raw_lines, list):
        raise ValueError("lines must be a list")
    texts: list[str] = []
    for entry in raw_lines:
        if isinstance(entry, str):
            texts.append(entry)
        elif isinstance(entry, dict) and isinstance(entry.get("text"), str):
            texts.append(entry["text"])
        else:
            raise ValueError(f"unsupported line entry: {entry!r}")
    return Song.from_texts(artist, title, rank, texts)


def ingest(path: str | Path) -> tuple[list[Song], FilterReport]:
    """Parse a songs JSONL file; malformed records are skipped and counted.

    An unreadable file raises. Duplicate (artist, title) records are treated
    as malformed (the first occurrence wins).
    """
    path = Path(path)
    report = FilterReport()
    songs: list[Song] = []
    seen_keys: set[tuple[str, str]] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            report.songs_in += 1
            try:
                record = json.loads(raw)
                song = song_from_record(record)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.rejections[REJECT_PARSE] += 1
                logger.warning("%s:%d: skipping malformed record: %s", path, lineno, exc)
                continue
            if song.key in seen_keys:
                report.rejections[REJECT_PARSE] += 1
                logger.warning(
                    "%s:%d: skipping duplicate song %r - %r", path, lineno, song.artist, song.title
                )
                continue
            seen_keys.add(song.key)
            songs.append(song)
            report.lines_in += len(song.lines)
    report.songs_out = len(songs)
    report.lines_out = report.lines_in
    return songs, report


def song_to_record(song: Song) -> dict:
    """Corpus JSONL shape: the raw record plus per-line word statistics."""
    return {
        "artist": song.artist,
        "title": song.title,
        "popularity_rank": song.popularity_rank,
        "lines": [
            {
                "index": line.index,
                "text": line.text,
                "word_count": line.word_count,
                "unique_word_count": line.unique_word_count,
            }
            for line in song.lines
        ],
    }


def write_corpus(songs: Iterable[Song], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for song in songs:
            fh.write(json.dumps(song_to_record(song), ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> Iterator[Song]:
    """Read a corpus JSONL file strictly (malformed records raise)."""
    with Path(path).open("r", encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                yield song_from_record(json.loads(raw))
