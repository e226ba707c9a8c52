"""Append-only JSON-lines transcript with a running digest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class TranscriptError(ValueError):
    pass


class Transcript:
    """Collects events as canonical JSON lines.

    Lines are kept in memory when ``keep`` is set and streamed to ``path``
    when one is given; the digest covers every line either way.
    """

    def __init__(self, path: str | Path | None = None, keep: bool = True):
        self.lines: list[str] = []
        self.keep = keep
        self._hash = hashlib.sha256()
        self._file = open(path, "w", encoding="utf-8") if path is not None else None
        self.count = 0

    def add(self, event: dict) -> str:
        line = canonical_json(event)
        self._hash.update(line.encode() + b"\n")
        self.count += 1
        if self.keep:
            self.lines.append(line)
        if self._file is not None:
            self._file.write(line + "\n")
        return line

    def digest(self) -> str:
        return self._hash.hexdigest()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def events(self) -> Iterator[dict]:
        return (json.loads(line) for line in self.lines)


def read_events(lines: Iterable[str]) -> Iterator[dict]:
    """Parse transcript lines, raising ``TranscriptError`` with the line number on corruption."""
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TranscriptError(f"line {n}: not valid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict) or "type" not in obj:
            raise TranscriptError(f"line {n}: event without a type")
        yield obj


def load_transcript(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        yield from read_events(fh)
