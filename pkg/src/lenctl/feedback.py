"""Feedback markers and prompt construction.

A marker is a control-channel string like ``<used_tokens=123>`` stating the
exact clean-text length so far.  Markers use one grammar for every unit,
``<used_{unit_plural}={digits}>``; they are stripped from all user-visible
output and never counted.  Literal text that happens to collide with the
grammar is treated as a marker (no escaping).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

from .units import LengthUnit

if TYPE_CHECKING:
    from .controller import LengthConstraint
    from .sftgen import Demonstration

MARKER_PREFIX = "<used_"

_NAME_TO_UNIT = {unit.plural: unit for unit in LengthUnit}
_MARKER_BODY_RE = re.compile(r"(tokens|words|sentences|characters)=(\d+)>")


class MalformedMarker(Exception):
    """A ``<used_`` prefix that does not parse as a complete marker."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class MissingDemo(Exception):
    """An ICL prompt mode was requested without a demonstration."""


def render_feedback(unit: LengthUnit, count: int) -> str:
    """Render the feedback marker for a count, e.g. ``<used_words=57>``."""
    if count < 0:
        raise ValueError("feedback count must be nonnegative")
    return f"<used_{unit.plural}={count}>"


@dataclass
class FeedbackEvent:
    """One injected marker: what was reported and where it sits in clean text."""

    unit: LengthUnit
    count: int
    insertion_offset: int  # byte offset into the clean text
    rendered: str = ""

    def __post_init__(self) -> None:
        if not self.rendered:
            self.rendered = render_feedback(self.unit, self.count)


def strip_feedback(text: str) -> tuple[str, list[FeedbackEvent]]:
    """Remove all markers; events reference byte offsets into the clean text.

    Re-inserting the events into the clean text reproduces ``text`` exactly.
    Raises MalformedMarker for a ``<used_`` that is not a complete marker.
    """
    clean_parts: list[str] = []
    events: list[FeedbackEvent] = []
    pos = 0
    clean_bytes = 0
    while True:
        j = text.find(MARKER_PREFIX, pos)
        if j < 0:
            break
        seg = text[pos:j]
        clean_parts.append(seg)
        clean_bytes += len(seg.encode("utf-8"))
        m = _MARKER_BODY_RE.match(text, j + len(MARKER_PREFIX))
        if m is None:
            if ">" not in text[j:]:
                raise MalformedMarker("unterminated feedback marker", j)
            raise MalformedMarker("invalid feedback marker", j)
        events.append(
            FeedbackEvent(
                unit=_NAME_TO_UNIT[m.group(1)],
                count=int(m.group(2)),
                insertion_offset=clean_bytes,
                rendered=text[j : m.end()],
            )
        )
        pos = m.end()
    clean_parts.append(text[pos:])
    return "".join(clean_parts), events


def insert_feedback(clean: str, events: list[FeedbackEvent]) -> str:
    """Inverse of strip_feedback: splice markers into clean text at their
    byte offsets.  Events must be in nondecreasing offset order."""
    data = clean.encode("utf-8")
    out: list[bytes] = []
    pos = 0
    for ev in events:
        off = ev.insertion_offset
        if off < pos or off > len(data):
            raise ValueError(f"insertion offset {off} out of order or out of range")
        out.append(data[pos:off])
        out.append(ev.rendered.encode("utf-8"))
        pos = off
    out.append(data[pos:])
    try:
        return b"".join(out).decode("utf-8")
    except UnicodeDecodeError:
        raise ValueError("insertion offset not on a character boundary") from None


class PromptMode(Enum):
    BASELINE = "baseline"
    ICL = "icl"
    FEEDBACK = "feedback"
    ICL_FEEDBACK = "icl_feedback"

    @property
    def wants_tool(self) -> bool:
        return self in (PromptMode.FEEDBACK, PromptMode.ICL_FEEDBACK)

    @property
    def wants_demo(self) -> bool:
        return self in (PromptMode.ICL, PromptMode.ICL_FEEDBACK)

    @classmethod
    def parse(cls, name: str) -> "PromptMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown prompt mode: {name!r}") from None


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    mode: PromptMode
    constraint: "LengthConstraint"


@lru_cache(maxsize=64)
def load_template(name: str, templates_dir: str | None = None) -> str:
    if templates_dir is not None:
        path = Path(templates_dir) / f"{name}.txt"
        return path.read_text(encoding="utf-8").rstrip("\n")
    ref = resources.files(__package__) / "templates" / f"{name}.txt"
    return ref.read_text(encoding="utf-8").rstrip("\n")


def demo_text(demo: "Demonstration") -> str:
    """Render a one-shot demonstration for embedding in a user prompt."""
    c = demo.constraint
    return (
        f"Question: {demo.question}\n"
        f"Response ({c.target} {c.unit.plural}):\n{demo.response}"
    )


def build_prompt(
    task_instruction: str,
    constraint: "LengthConstraint",
    mode: PromptMode,
    demo: "Demonstration | None" = None,
    templates_dir: str | None = None,
) -> PromptBundle:
    """Assemble the system/user prompt pair for one generation session.

    Feedback modes add the tool-usage explanation adapted to the unit; ICL
    modes embed exactly one demonstration.  Deterministic given inputs.
    """
    if mode.wants_demo and demo is None:
        raise MissingDemo(f"prompt mode {mode.value} requires a demonstration")
    if not mode.wants_demo and demo is not None:
        raise ValueError(f"prompt mode {mode.value} does not take a demonstration")

    unit = constraint.unit.plural
    system_text = load_template("system_plain", templates_dir)
    if mode.wants_tool:
        system_text += "\n\n" + load_template("tool_usage", templates_dir).format(unit=unit)

    user_name = "user_icl" if mode.wants_demo else "user_baseline"
    user_text = load_template(user_name, templates_dir).format(
        instruction=task_instruction,
        target=constraint.target,
        unit=unit,
        demo=demo_text(demo) if demo is not None else "",
    )
    return PromptBundle(system_text=system_text, user_text=user_text, mode=mode, constraint=constraint)
