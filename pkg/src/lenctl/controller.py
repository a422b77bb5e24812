"""The generation-control loop.

Streams from a backend, interrupts at confirmed sentence boundaries (or when
the model itself starts a ``<used_`` marker), recounts the clean text, splices
the exact-length feedback marker into the transcript, and resumes the same
reply.  The model decides when to stop; a hard cap only guards against
runaways and is flagged distinctly in the resulting status.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from . import segmenter, units
from .backend import Backend, BackendError, GenRequest, SamplingParams
from .feedback import MARKER_PREFIX, FeedbackEvent, PromptBundle, insert_feedback
from .units import LengthUnit, TokenizerSpec

DEFAULT_TOLERANCES = {
    LengthUnit.TOKEN: 10,
    LengthUnit.WORD: 10,
    LengthUnit.SENTENCE: 0,
    LengthUnit.CHARACTER: 10,
}


@dataclass(frozen=True)
class LengthConstraint:
    """Target length in one unit with a tolerance for precise-match scoring."""

    unit: LengthUnit
    target: int
    tolerance: int | None = None

    def __post_init__(self) -> None:
        if self.target < 1:
            raise ValueError("target must be positive")
        if self.tolerance is None:
            object.__setattr__(self, "tolerance", DEFAULT_TOLERANCES[self.unit])
        elif self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")


class InsertionMode(Enum):
    CONTROLLER_BOUNDARY = "controller_boundary"
    MODEL_MARKER = "model_marker"
    HYBRID = "hybrid"


class SessionStatus(Enum):
    RUNNING = "running"
    DONE_EOS = "done_eos"
    DONE_CAP = "done_cap"
    FAILED = "failed"


@dataclass(frozen=True)
class ControllerConfig:
    insertion_mode: InsertionMode = InsertionMode.HYBRID
    min_interval: int = 0  # skip feedback when fewer new units than this
    hard_cap_factor: float = 2.0  # abort once the count reaches target * factor
    max_resumes: int = 128

    def __post_init__(self) -> None:
        if self.min_interval < 0:
            raise ValueError("min_interval must be nonnegative")
        if self.hard_cap_factor <= 1:
            raise ValueError("hard_cap_factor must be > 1")
        if self.max_resumes < 1:
            raise ValueError("max_resumes must be positive")


@dataclass
class SessionState:
    """The unfinished (then finished) output of one controlled generation."""

    clean_text: str = ""
    events: list[FeedbackEvent] = field(default_factory=list)
    boundaries_seen: int = 0
    resume_count: int = 0
    status: SessionStatus = SessionStatus.RUNNING
    error: str | None = None


def _byte_to_char(text: str, byte_offset: int) -> int:
    return len(text.encode("utf-8")[:byte_offset].decode("utf-8"))


def _context_hash(context: Sequence[tuple[str, str]], prefix: str) -> str:
    payload = json.dumps({"context": list(context), "prefix": prefix}, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class JsonlTraceWriter:
    """Writes one JSON object per resume step; see README for the schema."""

    def __init__(self, path: str):
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_session(
    backend: Backend,
    prompt: PromptBundle,
    constraint: LengthConstraint,
    config: ControllerConfig | None = None,
    tokenizer: TokenizerSpec | None = None,
    sampling: SamplingParams | None = None,
    trace: Callable[[dict], None] | None = None,
    abbreviations: frozenset[str] | None = None,
) -> SessionState:
    """Run one controlled generation session to completion.

    Feedback is injected only for feedback prompt modes.  Backend failures
    yield status ``failed`` with the error attached; reaching the hard cap
    yields ``done_cap`` with the partial text.
    """
    cfg = config or ControllerConfig()
    inject = prompt.mode.wants_tool
    boundary_inject = inject and cfg.insertion_mode in (
        InsertionMode.CONTROLLER_BOUNDARY,
        InsertionMode.HYBRID,
    )
    arm_marker = inject and cfg.insertion_mode in (
        InsertionMode.MODEL_MARKER,
        InsertionMode.HYBRID,
    )

    unit = constraint.unit
    cap = constraint.target * cfg.hard_cap_factor
    context = [("system", prompt.system_text), ("user", prompt.user_text)]
    stops = [MARKER_PREFIX] if arm_marker else []

    state = SessionState()
    step = 0
    # segmentation state survives resumes; a boundary cut rebuilds it below
    seg = segmenter.SegmenterState.fresh(abbreviations)

    def measure(text: str) -> int:
        return units.measure(text, unit, tokenizer)

    def last_count() -> int:
        return state.events[-1].count if state.events else 0

    while state.status is SessionStatus.RUNNING:
        transcript = insert_feedback(state.clean_text, state.events)
        request = GenRequest(
            context=list(context),
            sampling=sampling or SamplingParams(),
            stop_sequences=list(stops),
            assistant_prefix=transcript,
        )

        step_deltas: list[str] = []
        interrupted = False
        stream = None
        try:
            stream = backend.start_stream(request)
            for chunk in stream:
                if chunk.text_delta:
                    state.clean_text += chunk.text_delta
                    step_deltas.append(chunk.text_delta)
                    seg, boundaries = segmenter.feed(seg, chunk.text_delta)
                    for boundary in boundaries:
                        if boundary.sentence_index < state.boundaries_seen:
                            continue
                        state.boundaries_seen += 1
                        if not boundary_inject:
                            continue
                        if state.events and state.events[-1].insertion_offset >= boundary.end_offset:
                            continue  # a model-initiated marker already sits here
                        b_chars = _byte_to_char(state.clean_text, boundary.end_offset)
                        n = measure(state.clean_text[:b_chars])
                        if n - last_count() < cfg.min_interval:
                            continue
                        # cut at the boundary, keep the following whitespace,
                        # drop the partial next sentence
                        ws_end = b_chars
                        while ws_end < len(state.clean_text) and state.clean_text[ws_end].isspace():
                            ws_end += 1
                        state.clean_text = state.clean_text[:ws_end]
                        ws_run = state.clean_text[b_chars:ws_end]
                        seg = segmenter.SegmenterState(
                            buffered_tail=ws_run,
                            emitted=boundary.sentence_index + 1,
                            abbreviation_set=seg.abbreviation_set,
                            base_bytes=boundary.end_offset,
                            scan_pos=len(ws_run),
                        )
                        state.events.append(
                            FeedbackEvent(unit=unit, count=n, insertion_offset=boundary.end_offset)
                        )
                        state.resume_count += 1
                        interrupted = True
                        break
                    if interrupted:
                        break
                    if measure(state.clean_text) >= cap:
                        state.status = SessionStatus.DONE_CAP
                        state.error = "hard cap reached"
                        break
                if chunk.finish == "stop_sequence":
                    # the model called the length tool; complete its marker
                    n = measure(state.clean_text)
                    state.events.append(
                        FeedbackEvent(
                            unit=unit,
                            count=n,
                            insertion_offset=len(state.clean_text.encode("utf-8")),
                        )
                    )
                    state.resume_count += 1
                    interrupted = True
                    break
                if chunk.finish in ("eos", "length_cap"):
                    for boundary in segmenter.finalize(seg):
                        if boundary.sentence_index < state.boundaries_seen:
                            continue
                        state.boundaries_seen += 1
                        if not boundary_inject:
                            continue
                        if state.events and state.events[-1].insertion_offset >= boundary.end_offset:
                            continue
                        n = measure(
                            state.clean_text[: _byte_to_char(state.clean_text, boundary.end_offset)]
                        )
                        if n - last_count() < cfg.min_interval:
                            continue
                        state.events.append(
                            FeedbackEvent(unit=unit, count=n, insertion_offset=boundary.end_offset)
                        )
                    if chunk.finish == "eos":
                        state.status = SessionStatus.DONE_EOS
                    else:
                        state.status = SessionStatus.DONE_CAP
                        state.error = "backend length cap"
                    break
        except BackendError as exc:
            state.status = SessionStatus.FAILED
            state.error = f"{type(exc).__name__}: {exc}"
        finally:
            close = getattr(stream, "close", None)
            if close is not None:
                close()

        if trace is not None:
            trace(
                {
                    "step": step,
                    "context_hash": _context_hash(context, transcript),
                    "delta_text": "".join(step_deltas),
                    "events": [
                        {"unit": ev.unit.value, "count": ev.count, "offset": ev.insertion_offset}
                        for ev in state.events
                    ],
                    "status": state.status.value,
                }
            )
        step += 1

        if state.status is SessionStatus.RUNNING and interrupted:
            if state.resume_count > cfg.max_resumes:
                state.status = SessionStatus.FAILED
                state.error = "resume limit exceeded"
        elif state.status is SessionStatus.RUNNING:
            # stream ended without finish or interruption: protocol violation
            state.status = SessionStatus.FAILED
            state.error = "stream ended without a finish chunk"

    return state


def run_batch(
    items: Iterable[tuple[PromptBundle, LengthConstraint]],
    backend: Backend,
    config: ControllerConfig | None = None,
    tokenizer: TokenizerSpec | None = None,
    sampling: SamplingParams | None = None,
    parallelism: int = 1,
    abbreviations: frozenset[str] | None = None,
) -> list[SessionState]:
    """Run sessions for all items, in input order, isolating per-item failures."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    todo = list(items)

    def one(item: tuple[PromptBundle, LengthConstraint]) -> SessionState:
        prompt, constraint = item
        try:
            return run_session(
                backend,
                prompt,
                constraint,
                config=config,
                tokenizer=tokenizer,
                sampling=sampling,
                abbreviations=abbreviations,
            )
        except Exception as exc:  # per-item isolation
            return SessionState(status=SessionStatus.FAILED, error=f"{type(exc).__name__}: {exc}")

    if parallelism == 1:
        return [one(item) for item in todo]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, todo))
