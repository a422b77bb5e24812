"""Incremental sentence boundary detection.

Rule-based: a boundary is confirmed at a terminal mark (``.``, ``!``, ``?``,
optionally followed by closing quotes/brackets) once we see whitespace and
then an uppercase letter or digit, or at end of stream during finalize.  A
period directly after a known abbreviation is never a boundary.  Because
confirmation needs lookahead, ``feed`` holds back undecided candidates until
the next chunk; ``finalize`` resolves the stream end.  Feeding the same text
in any chunking yields exactly the events of :func:`segment_batch`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

_TERMINAL_RE = re.compile(r"[.!?]")
_CLOSERS = frozenset("\"')]}»”’")

# Abbreviations whose trailing period does not end a sentence.  Lowercase,
# internal periods kept (the check strips leading/trailing periods only).
DEFAULT_ABBREVIATIONS = frozenset(
    """
    mr mrs ms dr prof rev hon fr pres gen sen rep gov capt sgt col maj lt cmdr
    jr sr st
    e.g i.e cf al etc vs
    inc ltd co corp llc dept univ assn
    fig figs vol vols ch sec est approx
    u.s u.k u.n d.c
    jan feb mar apr jun jul aug sep sept oct nov dec
    mon tue tues wed thu thurs fri sat sun
    """.split()
)


@dataclass(frozen=True)
class BoundaryEvent:
    """A confirmed sentence end.  ``end_offset`` is a byte offset into the
    clean text (exclusive); indices are dense from 0 across the stream."""

    end_offset: int
    sentence_index: int


@dataclass(frozen=True)
class SegmenterState:
    """Session-local segmentation state; transitions are pure."""

    buffered_tail: str = ""
    emitted: int = 0
    abbreviation_set: frozenset[str] = DEFAULT_ABBREVIATIONS
    base_bytes: int = 0  # byte offset of buffered_tail start in the stream
    scan_pos: int = 0  # char index in buffered_tail where scanning resumes

    @classmethod
    def fresh(cls, abbreviations: frozenset[str] | None = None) -> "SegmenterState":
        return cls(abbreviation_set=abbreviations or DEFAULT_ABBREVIATIONS)


def load_abbreviations(path: str) -> frozenset[str]:
    """Load an abbreviation list: one lowercase abbreviation per line."""
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


def _preceding_token(text: str, mark: int) -> str:
    j = mark
    while j > 0 and (text[j - 1].isalnum() or text[j - 1] == "."):
        j -= 1
    return text[j:mark].strip(".").lower()


def _scan(
    tail: str, start: int, abbrevs: frozenset[str], at_eof: bool
) -> tuple[list[int], int, int]:
    """Scan for confirmed boundaries.

    Returns (boundary end offsets in chars, chars consumed, resume position).
    Scanning stops at the first candidate that cannot be decided without more
    text; resume points at that candidate's terminal mark.
    """
    ends: list[int] = []
    consumed = 0
    n = len(tail)
    resume = n
    i = start
    while i < n:
        m = _TERMINAL_RE.search(tail, i)
        if m is None:
            break
        i = m.start()
        ch = tail[i]
        if ch == "." and _preceding_token(tail, i) in abbrevs:
            i += 1
            continue
        end = i + 1
        while end < n and tail[end] in _CLOSERS:
            end += 1
        if end == n:
            if at_eof:
                ends.append(end)
                consumed = end
                i = end
                continue
            resume = i
            break
        if not tail[end].isspace():
            i = end
            continue
        k = end + 1
        while k < n and tail[k].isspace():
            k += 1
        if k == n:
            if at_eof:
                ends.append(end)
                consumed = end
                i = k
                continue
            resume = i
            break
        nxt = tail[k]
        if nxt.isupper() or nxt.isdigit():
            ends.append(end)
            consumed = end
        i = k
    return ends, consumed, max(resume, consumed)


def _events_for(
    tail: str, char_ends: list[int], base_bytes: int, first_index: int
) -> list[BoundaryEvent]:
    events = []
    prev_chars = 0
    prev_bytes = 0
    for j, end in enumerate(char_ends):
        prev_bytes += len(tail[prev_chars:end].encode("utf-8"))
        prev_chars = end
        events.append(BoundaryEvent(end_offset=base_bytes + prev_bytes, sentence_index=first_index + j))
    return events


def feed(state: SegmenterState, chunk: str) -> tuple[SegmenterState, list[BoundaryEvent]]:
    """Consume the next chunk and return confirmed boundaries, in order."""
    tail = state.buffered_tail + chunk
    ends, consumed, resume = _scan(tail, state.scan_pos, state.abbreviation_set, at_eof=False)
    events = _events_for(tail, ends, state.base_bytes, state.emitted)
    new_state = replace(
        state,
        buffered_tail=tail[consumed:],
        emitted=state.emitted + len(ends),
        base_bytes=state.base_bytes + len(tail[:consumed].encode("utf-8")),
        scan_pos=resume - consumed,
    )
    return new_state, events


def finalize(state: SegmenterState) -> list[BoundaryEvent]:
    """Resolve end of stream: confirm pending candidates and close any
    trailing unterminated sentence."""
    tail = state.buffered_tail
    ends, consumed, _ = _scan(tail, state.scan_pos, state.abbreviation_set, at_eof=True)
    if tail[consumed:].strip():
        ends = ends + [len(tail)]
    return _events_for(tail, ends, state.base_bytes, state.emitted)


def segment_batch(
    text: str, abbreviations: frozenset[str] | None = None
) -> list[BoundaryEvent]:
    """One-shot segmentation; by definition equals feed(whole text) + finalize."""
    state = SegmenterState.fresh(abbreviations)
    state, events = feed(state, text)
    return events + finalize(state)
