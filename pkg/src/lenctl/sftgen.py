"""Training-data construction.

Given sampled (question, response) pairs, retrofit each prompt's target
length to match the response's true length (random unit, small random delta),
then emit either plain examples or feedback-interleaved ones where a marker
follows every sentence.  No quality filtering is applied.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import segmenter, units
from .controller import LengthConstraint
from .feedback import FeedbackEvent, PromptMode, build_prompt, insert_feedback, strip_feedback
from .units import LengthUnit, TokenizerSpec

# Delta ranges for the target-length update, per unit (inclusive both ends).
DELTA_RANGES = {
    LengthUnit.TOKEN: (-10, 10),
    LengthUnit.WORD: (-5, 5),
    LengthUnit.SENTENCE: (0, 0),
}

SFT_UNITS = (LengthUnit.TOKEN, LengthUnit.WORD, LengthUnit.SENTENCE)

# Training settings recorded as dataset metadata; this tool does not train.
TRAINING_METADATA = {
    "library": "trl",
    "learning_rate": 1e-6,
    "batch_size": 64,
    "epochs": 1,
}


class EmptyPool(Exception):
    """A demonstration was requested from an empty candidate pool."""


class RecountMismatch(Exception):
    """An emitted example no longer matches its recounted length bound."""


@dataclass(frozen=True)
class SftTargetSpec:
    """Retrofit of a prompt's target length to an already-sampled response."""

    type: LengthUnit
    l_generated: int
    delta: int
    l_target: int

    def __post_init__(self) -> None:
        if self.l_target != self.l_generated + self.delta:
            raise ValueError("l_target must equal l_generated + delta")
        lo, hi = DELTA_RANGES[self.type]
        if not lo <= self.delta <= hi:
            raise ValueError(f"delta {self.delta} outside [{lo}, {hi}] for {self.type.value}")
        if self.l_target < 1:
            raise ValueError("l_target must be positive")


@dataclass(frozen=True)
class Demonstration:
    """A one-shot example whose response meets its own stated constraint."""

    question: str
    response: str
    constraint: LengthConstraint


@dataclass
class SftExample:
    question: str
    constraint: LengthConstraint
    response: str
    variant: str  # "plain" | "feedback"
    prompt: str = ""
    seed: str = ""
    source_id: str = ""


def update_target(
    response: str,
    rng: random.Random,
    tokenizer: TokenizerSpec | None = None,
) -> SftTargetSpec:
    """Draw a unit uniformly and a delta uniformly in its range; the target is
    the response's true count plus the delta (resampled if it would drop
    below 1)."""
    if not response:
        raise ValueError("response must be nonempty")
    unit = rng.choice(SFT_UNITS)
    generated = units.measure(response, unit, tokenizer)
    lo, hi = DELTA_RANGES[unit]
    if generated + hi < 1:
        raise ValueError(f"response has no countable {unit.value}s")
    delta = rng.randint(lo, hi)
    while generated + delta < 1:
        delta = rng.randint(lo, hi)
    return SftTargetSpec(type=unit, l_generated=generated, delta=delta, l_target=generated + delta)


def interleave_feedback(
    response: str, unit: LengthUnit, tokenizer: TokenizerSpec | None = None
) -> str:
    """Insert a feedback marker after every sentence, carrying the cumulative
    count of the clean prefix.  Stripping recovers the original byte-exactly."""
    data = response.encode("utf-8")
    events = []
    for boundary in segmenter.segment_batch(response):
        prefix = data[: boundary.end_offset].decode("utf-8")
        events.append(
            FeedbackEvent(
                unit=unit,
                count=units.measure(prefix, unit, tokenizer),
                insertion_offset=boundary.end_offset,
            )
        )
    return insert_feedback(response, events)


def _example_for(
    question: str,
    response: str,
    variant: str,
    item_seed: str,
    source_id: str,
    tokenizer: TokenizerSpec | None,
) -> SftExample:
    spec = update_target(response, random.Random(item_seed), tokenizer)
    constraint = LengthConstraint(spec.type, spec.l_target)
    mode = PromptMode.FEEDBACK if variant == "feedback" else PromptMode.BASELINE
    bundle = build_prompt(question, constraint, mode)
    # the feedback variant teaches marker semantics in context, so its prompt
    # carries the tool-usage paragraph
    prompt = bundle.user_text if mode is PromptMode.BASELINE else (
        bundle.system_text + "\n\n" + bundle.user_text
    )
    out_response = (
        interleave_feedback(response, spec.type, tokenizer) if variant == "feedback" else response
    )
    example = SftExample(
        question=question,
        constraint=constraint,
        response=out_response,
        variant=variant,
        prompt=prompt,
        seed=item_seed,
        source_id=source_id,
    )
    _validate_example(example, tokenizer)
    return example


def _validate_example(example: SftExample, tokenizer: TokenizerSpec | None) -> None:
    """Guard against counting-rule drift: the clean response must still land
    within the unit's delta bound of the stated target."""
    clean, events = strip_feedback(example.response)
    if example.variant == "plain" and events:
        raise RecountMismatch("plain example contains markers")
    if example.variant == "feedback" and not events:
        raise RecountMismatch("feedback example contains no markers")
    unit = example.constraint.unit
    recount = units.measure(clean, unit, tokenizer)
    lo, hi = DELTA_RANGES[unit]
    if not lo <= example.constraint.target - recount <= hi:
        raise RecountMismatch(
            f"target {example.constraint.target} vs recount {recount} breaks the "
            f"[{lo}, {hi}] bound for {unit.value}"
        )
    for ev in events:
        prefix = clean.encode("utf-8")[: ev.insertion_offset].decode("utf-8")
        if units.measure(prefix, ev.unit, tokenizer) != ev.count:
            raise RecountMismatch(f"marker count {ev.count} does not match its prefix")


def build_dataset(
    items: Sequence[tuple[str, str]],
    variant: str,
    seed: int,
    tokenizer: TokenizerSpec | None = None,
    on_drop: Callable[[int, Exception], None] | None = None,
) -> list[SftExample]:
    """Build one example per (question, response) item.

    Deterministic under the seed: each item draws from its own rng keyed by
    (seed, item index).  Items whose recount drifts out of bound are dropped
    (and reported through ``on_drop``), never repaired.
    """
    if variant not in ("plain", "feedback"):
        raise ValueError(f"unknown variant {variant!r}")
    examples = []
    for i, (question, response) in enumerate(items):
        item_seed = f"{seed}:{i}"
        try:
            examples.append(
                _example_for(question, response, variant, item_seed, str(i), tokenizer)
            )
        except RecountMismatch as exc:
            if on_drop is not None:
                on_drop(i, exc)
    return examples


def write_jsonl(examples: Iterable[SftExample], path: str) -> int:
    """Write the documented JSONL schema; returns the number of lines."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "id": ex.source_id,
                        "question": ex.question,
                        "unit": ex.constraint.unit.value,
                        "target": ex.constraint.target,
                        "prompt": ex.prompt,
                        "response": ex.response,
                        "variant": ex.variant,
                        "seed": ex.seed,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            n += 1
    meta_path = Path(path).with_suffix(Path(path).suffix + ".meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(TRAINING_METADATA, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return n


def build_icl_demo(
    pool: Sequence[tuple[str, str]],
    constraint: LengthConstraint,
    with_markers: bool = False,
    tokenizer: TokenizerSpec | None = None,
) -> Demonstration:
    """Pick the pool response whose length is nearest the constraint target
    (ties go to the smaller index); its own true length becomes the
    demonstration's stated constraint."""
    if not pool:
        raise EmptyPool("demonstration pool is empty")
    best = None
    for i, (question, response) in enumerate(pool):
        length = units.measure(response, constraint.unit, tokenizer)
        if length < 1:
            continue
        key = (abs(length - constraint.target), i)
        if best is None or key < best[0]:
            best = (key, question, response, length)
    if best is None:
        raise EmptyPool("no pool response has a countable length")
    _, question, response, length = best
    if with_markers:
        response = interleave_feedback(response, constraint.unit, tokenizer)
    return Demonstration(
        question=question,
        response=response,
        constraint=LengthConstraint(constraint.unit, length, constraint.tolerance),
    )
