import pytest

from lenctl.backend import (
    Backend,
    BackendError,
    CompliantBackend,
    NoisyBackend,
    ScriptedBackend,
    _stream_pieces,
)
from lenctl.controller import (
    ControllerConfig,
    InsertionMode,
    LengthConstraint,
    SessionStatus,
    run_batch,
    run_session,
)
from lenctl.feedback import PromptMode, build_prompt, strip_feedback
from lenctl.segmenter import segment_batch
from lenctl.units import LengthUnit, measure


class RecordingBackend(Backend):
    """Delegates to another backend and records every request."""

    def __init__(self, inner):
        self.inner = inner
        self.requests = []

    def start_stream(self, request):
        self.requests.append(request)
        return self.inner.start_stream(request)


class MarkerOnceBackend(Backend):
    """Emits one sentence, then calls the length tool itself; after its marker
    is completed it finishes the reply."""

    def start_stream(self, request):
        prefix = request.assistant_prefix
        if "<used_" not in prefix:
            script = ["A first thought arrives.", "<used_tokens=", " ignored tail"]
        else:
            script = [" A second thought lands."]
        return _stream_pieces(iter(script), request)


class ExplodingBackend(Backend):
    def start_stream(self, request):
        raise BackendError("boom")


def prompt_for(unit, target, mode=PromptMode.FEEDBACK, tolerance=None):
    constraint = LengthConstraint(unit, target, tolerance)
    return build_prompt("Write about tides.", constraint, mode), constraint


def test_compliant_sentence_session_hits_target_exactly():
    prompt, constraint = prompt_for(LengthUnit.SENTENCE, 5, tolerance=0)
    state = run_session(
        CompliantBackend(seed=4),
        prompt,
        constraint,
        config=ControllerConfig(insertion_mode=InsertionMode.CONTROLLER_BOUNDARY),
    )
    assert state.status is SessionStatus.DONE_EOS
    assert len(segment_batch(state.clean_text)) == 5
    assert len(state.events) == 5
    assert "<used_" not in state.clean_text
    assert [e.count for e in state.events] == [1, 2, 3, 4, 5]


def test_scripted_session_records_counts_and_transcripts():
    backend = RecordingBackend(ScriptedBackend(["One. Two."]))
    prompt, constraint = prompt_for(LengthUnit.SENTENCE, 10, tolerance=0)
    state = run_session(backend, prompt, constraint)
    assert state.status is SessionStatus.DONE_EOS
    assert state.boundaries_seen == 2
    assert [e.count for e in state.events] == [1, 2]
    assert state.clean_text == "One. Two."
    # the second request carries the first marker in its transcript
    assert len(backend.requests) == 2
    assert "<used_sentences=1>" in backend.requests[1].assistant_prefix
    clean, events = strip_feedback(backend.requests[1].assistant_prefix)
    assert clean == "One. "
    assert [e.count for e in events] == [1]


def test_event_counts_match_clean_prefix_recount():
    for unit, target in [
        (LengthUnit.SENTENCE, 4),
        (LengthUnit.WORD, 40),
        (LengthUnit.TOKEN, 30),
        (LengthUnit.CHARACTER, 150),
    ]:
        prompt, constraint = prompt_for(unit, target)
        state = run_session(CompliantBackend(seed=8), prompt, constraint)
        assert state.status is SessionStatus.DONE_EOS
        assert state.events
        data = state.clean_text.encode("utf-8")
        for ev in state.events:
            prefix = data[: ev.insertion_offset].decode("utf-8")
            assert measure(prefix, unit) == ev.count
        assert measure(state.clean_text, unit) == target


def test_noisy_overshoot_hits_hard_cap():
    # find a seed whose bias forces the count to twice the target
    prompt, constraint = prompt_for(LengthUnit.TOKEN, 100, mode=PromptMode.BASELINE)
    for seed in range(60):
        backend = NoisyBackend(compliance=0.0, sigma=1.2, seed=seed)
        state = run_session(backend, prompt, constraint, config=ControllerConfig(hard_cap_factor=2.0))
        if state.status is SessionStatus.DONE_CAP:
            assert measure(state.clean_text, LengthUnit.TOKEN) >= 200
            return
    pytest.fail("no seed produced a runaway generation")


def test_model_marker_mode_completes_markers():
    backend = RecordingBackend(MarkerOnceBackend())
    prompt, constraint = prompt_for(LengthUnit.TOKEN, 50)
    state = run_session(
        backend,
        prompt,
        constraint,
        config=ControllerConfig(insertion_mode=InsertionMode.MODEL_MARKER),
    )
    assert state.status is SessionStatus.DONE_EOS
    assert "<used_" not in state.clean_text
    assert state.clean_text == "A first thought arrives. A second thought lands."
    marker_events = [e for e in state.events if e.insertion_offset == len(b"A first thought arrives.")]
    assert marker_events and marker_events[0].count == 4
    assert "<used_tokens=4>" in backend.requests[1].assistant_prefix


class MarkerAtBoundaryBackend(Backend):
    """Emits the tool-call prefix right at each sentence end (the tie case)."""

    def start_stream(self, request):
        prefix = strip_feedback(request.assistant_prefix)[0]
        done = prefix.count(".")
        if done >= 3:
            script = [" Final words settle."]
        else:
            sep = "" if not prefix or prefix.endswith(" ") else " "
            script = [f"{sep}Thought {done} rests now. ", "<used_", "junk"]
        return _stream_pieces(iter(script), request)


def test_hybrid_tie_model_marker_wins_without_duplicates():
    prompt, constraint = prompt_for(LengthUnit.WORD, 30)
    state = run_session(
        MarkerAtBoundaryBackend(),
        prompt,
        constraint,
        config=ControllerConfig(insertion_mode=InsertionMode.HYBRID),
    )
    assert state.status is SessionStatus.DONE_EOS
    offsets = [e.insertion_offset for e in state.events]
    assert len(offsets) == len(set(offsets)), f"duplicate marker offsets: {offsets}"
    assert all(b > a for a, b in zip(offsets, offsets[1:]))


def test_baseline_mode_never_injects():
    backend = RecordingBackend(NoisyBackend(compliance=0, sigma=0.3, seed=2))
    prompt, constraint = prompt_for(LengthUnit.WORD, 60, mode=PromptMode.BASELINE)
    state = run_session(backend, prompt, constraint)
    assert state.status in (SessionStatus.DONE_EOS, SessionStatus.DONE_CAP)
    assert state.events == []
    assert state.resume_count == 0
    assert len(backend.requests) == 1
    assert backend.requests[0].stop_sequences == []


def test_min_interval_skips_and_counts_increase():
    prompt, constraint = prompt_for(LengthUnit.WORD, 50)
    state = run_session(
        CompliantBackend(seed=6),
        prompt,
        constraint,
        config=ControllerConfig(min_interval=1),
    )
    counts = [e.count for e in state.events]
    assert counts == sorted(counts)
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_resume_limit_fails_session():
    prompt, constraint = prompt_for(LengthUnit.SENTENCE, 10, tolerance=0)
    state = run_session(
        CompliantBackend(seed=1),
        prompt,
        constraint,
        config=ControllerConfig(max_resumes=2),
    )
    assert state.status is SessionStatus.FAILED
    assert "resume limit" in (state.error or "")


def test_backend_failure_is_embedded():
    prompt, constraint = prompt_for(LengthUnit.WORD, 30)
    state = run_session(ExplodingBackend(), prompt, constraint)
    assert state.status is SessionStatus.FAILED
    assert "boom" in state.error


def test_trace_schema(tmp_path):
    from lenctl.controller import JsonlTraceWriter
    import json

    path = tmp_path / "trace.jsonl"
    writer = JsonlTraceWriter(str(path))
    prompt, constraint = prompt_for(LengthUnit.SENTENCE, 3, tolerance=0)
    run_session(CompliantBackend(seed=2), prompt, constraint, trace=writer)
    writer.close()
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records
    for i, record in enumerate(records):
        assert record["step"] == i
        assert set(record) == {"step", "context_hash", "delta_text", "events", "status"}
        assert len(record["context_hash"]) == 64


def test_run_batch_order_isolation_and_parallel_determinism():
    prompts = []
    for target in (3, 4, 5):
        prompts.append(prompt_for(LengthUnit.SENTENCE, target, tolerance=0))
    jobs = [(p, c) for p, c in prompts]

    backend = CompliantBackend(seed=12)
    sequential = run_batch(jobs, backend, parallelism=1)
    parallel = run_batch(jobs, backend, parallelism=3)
    assert [s.clean_text for s in sequential] == [s.clean_text for s in parallel]
    assert [len(segment_batch(s.clean_text)) for s in sequential] == [3, 4, 5]

    class FlakyBackend(Backend):
        def start_stream(self, request):
            if "exactly 4 sentences" in request.user_text():
                raise BackendError("nope")
            return CompliantBackend(seed=12).start_stream(request)

    mixed = run_batch(jobs, FlakyBackend(), parallelism=2)
    assert mixed[1].status is SessionStatus.FAILED
    assert mixed[0].status is SessionStatus.DONE_EOS
    assert mixed[2].status is SessionStatus.DONE_EOS


def test_duplicate_items_identical():
    job = prompt_for(LengthUnit.WORD, 40)
    states = run_batch([job, job], CompliantBackend(seed=3), parallelism=2)
    assert states[0].clean_text == states[1].clean_text


def test_marker_hygiene_and_strip_invariant():
    prompt, constraint = prompt_for(LengthUnit.TOKEN, 60)
    backend = RecordingBackend(CompliantBackend(seed=13))
    state = run_session(backend, prompt, constraint)
    assert "<used_" not in state.clean_text
    # each transcript's marker counts equal a recount of its own clean prefix
    for request in backend.requests:
        clean, events = strip_feedback(request.assistant_prefix)
        data = clean.encode("utf-8")
        for ev in events:
            prefix = data[: ev.insertion_offset].decode("utf-8")
            assert measure(prefix, LengthUnit.TOKEN) == ev.count
    # the final event is recorded at eos and never sent to a resume
    last_clean, last_events = strip_feedback(backend.requests[-1].assistant_prefix)
    assert state.clean_text.startswith(last_clean)
    assert len(last_events) == len(state.events) - 1
