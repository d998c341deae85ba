"""Append-only task journal.

One event per line, tab-separated, in the fixed order:

    <unix-ts>\t<event>\t<name=value>...

Values are percent-encoded so paths and messages cannot break framing.
Every line is flushed on write (survives process death); restart markers
and terminal events are additionally fsynced (survive OS crash). Replay
tolerates a truncated final line, which is the expected artifact of a
kill mid-write; malformed interior lines mean real corruption.
"""

from __future__ import annotations

import os
import re
import threading
import time
import urllib.parse
from dataclasses import dataclass
from pathlib import Path

from .errors import JournalCorrupt

_KIND_RE = re.compile(r"^[a-z][a-z0-9-]*$")
_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass(frozen=True)
class Event:
    timestamp: float
    kind: str
    fields: dict[str, str]

    def get(self, name: str, default: str = "") -> str:
        return self.fields.get(name, default)


def _quote(value: str) -> str:
    return urllib.parse.quote(value, safe="")


def _unquote(value: str) -> str:
    return urllib.parse.unquote(value)


class Journal:
    """Writer for one task's journal file."""

    def __init__(self, path: str | Path, fresh: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "w" if fresh else "a"
        self._fh = open(self.path, mode, encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, kind: str, fsync: bool = False, flush: bool = True, **fields) -> None:
        """Append one event. flush=False lets low-value lines ride along with
        the next flushed write (ordering is preserved by the shared buffer)."""
        parts = [f"{time.time():.6f}", kind]
        parts.extend(f"{name}={_quote(str(value))}" for name, value in fields.items())
        line = "\t".join(parts) + "\n"
        with self._lock:
            self._fh.write(line)
            if flush or fsync:
                self._fh.flush()
            if fsync:
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def replay(path: str | Path) -> list[Event]:
    """Parse a journal file back into events."""
    events: list[Event] = []
    try:
        raw = Path(path).read_text(encoding="utf-8", errors="replace")
    except FileNotFoundError:
        raise JournalCorrupt(f"no journal at {path}")
    lines = raw.split("\n")
    complete = raw.endswith("\n")
    for i, line in enumerate(lines):
        if not line:
            continue
        last = i == len(lines) - 1 or (i == len(lines) - 2 and not lines[-1])
        try:
            parts = line.split("\t")
            ts = float(parts[0])
            kind = parts[1]
            if not _KIND_RE.match(kind):
                raise ValueError(f"bad event kind {kind!r}")
            fields = {}
            for part in parts[2:]:
                name, sep, value = part.partition("=")
                if not sep or not _NAME_RE.match(name):
                    raise ValueError(f"bad field {part!r}")
                fields[name] = _unquote(value)
            events.append(Event(ts, kind, fields))
        except (ValueError, IndexError):
            if last and not complete:
                break  # torn final write from a crash
            raise JournalCorrupt(f"{path}: bad line {i + 1}: {line[:80]!r}")
    return events
