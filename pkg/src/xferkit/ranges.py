"""Byte-range bookkeeping for holey restarts and partial transfers.

A ByteRangeSet is an ordered list of disjoint, coalesced (offset, length)
ranges. It records which parts of a file have been moved so a resumed
transfer requests only what is missing.
"""

from __future__ import annotations


class ByteRangeSet:
    """Disjoint, sorted, coalesced set of byte ranges."""

    __slots__ = ("_ranges",)

    def __init__(self, ranges=()):
        self._ranges: list[tuple[int, int]] = []
        for offset, length in ranges:
            self.add(offset, length)

    @classmethod
    def full(cls, size: int) -> "ByteRangeSet":
        """The single range covering [0, size)."""
        s = cls()
        if size > 0:
            s._ranges.append((0, size))
        return s

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return list(self._ranges)

    def add(self, offset: int, length: int) -> None:
        """Insert a range, merging any overlap or adjacency."""
        if length <= 0:
            raise ValueError(f"range length must be positive, got {length}")
        if offset < 0:
            raise ValueError(f"range offset must be non-negative, got {offset}")
        start, end = offset, offset + length
        merged = []
        for s, l in self._ranges:
            e = s + l
            if e < start or s > end:
                merged.append((s, l))
            else:
                start = min(start, s)
                end = max(end, e)
        merged.append((start, end - start))
        merged.sort()
        self._ranges = merged

    def union(self, other: "ByteRangeSet") -> "ByteRangeSet":
        out = ByteRangeSet(self._ranges)
        for offset, length in other._ranges:
            out.add(offset, length)
        return out

    def missing(self, size: int) -> "ByteRangeSet":
        """Complement of this set within [0, size)."""
        out = ByteRangeSet()
        cursor = 0
        for s, l in self._ranges:
            if s >= size:
                break
            if s > cursor:
                out._ranges.append((cursor, s - cursor))
            cursor = max(cursor, s + l)
        if cursor < size:
            out._ranges.append((cursor, size - cursor))
        return out

    def contains(self, other: "ByteRangeSet") -> bool:
        """True if every byte of `other` is covered by this set."""
        for s, l in other._ranges:
            e = s + l
            covered = False
            for ms, ml in self._ranges:
                if ms <= s and e <= ms + ml:
                    covered = True
                    break
            if not covered:
                return False
        return True

    def tiles(self, size: int) -> bool:
        """True if this set is exactly the single range [0, size)."""
        if size == 0:
            return not self._ranges
        return self._ranges == [(0, size)]

    def total(self) -> int:
        return sum(l for _, l in self._ranges)

    def clamp(self, size: int) -> "ByteRangeSet":
        """Intersection with [0, size)."""
        out = ByteRangeSet()
        for s, l in self._ranges:
            if s >= size:
                continue
            out._ranges.append((s, min(l, size - s)))
        return out

    def encode(self) -> str:
        """Compact text form, e.g. "0:1024,2048:512"; empty set encodes to ""."""
        return ",".join(f"{s}:{l}" for s, l in self._ranges)

    @classmethod
    def decode(cls, text: str) -> "ByteRangeSet":
        out = cls()
        if not text:
            return out
        for part in text.split(","):
            s, l = part.split(":")
            out.add(int(s), int(l))
        return out

    def __iter__(self):
        return iter(self._ranges)

    def __len__(self):
        return len(self._ranges)

    def __bool__(self):
        return bool(self._ranges)

    def __eq__(self, other):
        return isinstance(other, ByteRangeSet) and self._ranges == other._ranges

    def __repr__(self):
        return f"ByteRangeSet({self._ranges!r})"
