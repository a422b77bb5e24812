import json
import random

import pytest

from lenctl.controller import LengthConstraint
from lenctl.feedback import strip_feedback
from lenctl.sftgen import (
    DELTA_RANGES,
    EmptyPool,
    RecountMismatch,
    SftExample,
    SftTargetSpec,
    _validate_example,
    build_dataset,
    build_icl_demo,
    interleave_feedback,
    update_target,
    write_jsonl,
)
from lenctl.units import LengthUnit, measure


class StubRng:
    """random.Random stand-in with scripted draws."""

    def __init__(self, choices, ints):
        self.choices = list(choices)
        self.ints = list(ints)

    def choice(self, seq):
        want = self.choices.pop(0)
        assert want in seq
        return want

    def randint(self, lo, hi):
        value = self.ints.pop(0)
        assert lo <= value <= hi
        return value


def test_update_target_sentence_delta_zero():
    response = " ".join(f"Sentence number {i} stands alone." for i in range(12))
    spec = update_target(response, StubRng([LengthUnit.SENTENCE], [0]))
    assert spec.type is LengthUnit.SENTENCE
    assert spec.l_generated == 12
    assert spec.delta == 0
    assert spec.l_target == 12


def test_update_target_token_arithmetic():
    response = " ".join(["tok"] * 137)
    spec = update_target(response, StubRng([LengthUnit.TOKEN], [-4]))
    assert spec.l_generated == 137
    assert spec.l_target == 133


def test_update_target_resamples_below_one():
    response = "tiny words here"  # 3 tokens; delta -10..-3 would go below 1
    spec = update_target(response, StubRng([LengthUnit.TOKEN], [-5, -3, 2]))
    assert spec.l_target == 5
    assert spec.delta == 2


def test_target_spec_invariants():
    with pytest.raises(ValueError):
        SftTargetSpec(LengthUnit.TOKEN, 100, 5, 110)
    with pytest.raises(ValueError):
        SftTargetSpec(LengthUnit.WORD, 100, 9, 109)
    with pytest.raises(ValueError):
        SftTargetSpec(LengthUnit.SENTENCE, 1, -1, 0)


def test_unit_frequencies_near_uniform():
    rng = random.Random(42)
    response = "Words flow onward. More arrive now. A third stands here."
    counts = {u: 0 for u in (LengthUnit.TOKEN, LengthUnit.WORD, LengthUnit.SENTENCE)}
    n = 6000
    for _ in range(n):
        counts[update_target(response, rng).type] += 1
    sigma = (n * (1 / 3) * (2 / 3)) ** 0.5
    for unit, got in counts.items():
        assert abs(got - n / 3) <= 3 * sigma, (unit, got)


def test_interleave_sentence_example():
    assert (
        interleave_feedback("One. Two.", LengthUnit.SENTENCE)
        == "One.<used_sentences=1> Two.<used_sentences=2>"
    )


def test_interleave_empty():
    assert interleave_feedback("", LengthUnit.WORD) == ""


def test_interleave_strip_round_trip():
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(1, 8)
        response = " ".join(
            "Sentence %d has %s shape." % (i, rng.choice(["plain", "longer", "short"]))
            for i in range(n)
        )
        for unit in (LengthUnit.TOKEN, LengthUnit.WORD, LengthUnit.SENTENCE):
            marked = interleave_feedback(response, unit)
            clean, events = strip_feedback(marked)
            assert clean == response
            assert len(events) == n
            data = response.encode("utf-8")
            for ev in events:
                prefix = data[: ev.insertion_offset].decode("utf-8")
                assert measure(prefix, unit) == ev.count


def _corpus(n, seed=0):
    rng = random.Random(seed)
    items = []
    for i in range(n):
        sentences = rng.randint(2, 6)
        response = " ".join(
            "Reply %d segment %d carries %s detail." % (i, j, rng.choice(["fine", "broad"]))
            for j in range(sentences)
        )
        items.append((f"Question {i}?", response))
    return items


def test_build_dataset_bounds_and_determinism(tmp_path):
    items = _corpus(80)
    examples = build_dataset(items, "plain", seed=7)
    assert len(examples) == 80
    for ex in examples:
        unit = ex.constraint.unit
        lo, hi = DELTA_RANGES[unit]
        recount = measure(ex.response, unit)
        assert lo <= ex.constraint.target - recount <= hi
        assert "<used_" not in ex.response

    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(build_dataset(items, "plain", seed=7), str(a))
    write_jsonl(build_dataset(items, "plain", seed=7), str(b))
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    write_jsonl(build_dataset(items, "plain", seed=8), str(c))
    assert a.read_bytes() != c.read_bytes()


def test_build_dataset_feedback_variant():
    examples = build_dataset(_corpus(30, seed=1), "feedback", seed=3)
    assert examples
    for ex in examples:
        clean, events = strip_feedback(ex.response)
        assert events, "feedback variant must carry markers"
        assert measure(clean, LengthUnit.SENTENCE) == len(events)
        assert "provided tool" in ex.prompt
        assert f"exactly {ex.constraint.target} {ex.constraint.unit.plural}" in ex.prompt


def test_jsonl_schema(tmp_path):
    path = tmp_path / "out.jsonl"
    write_jsonl(build_dataset(_corpus(3), "plain", seed=0), str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    for line in lines:
        obj = json.loads(line)
        assert set(obj) == {"id", "question", "unit", "target", "prompt", "response", "variant", "seed"}
    meta = json.loads((tmp_path / "out.jsonl.meta.json").read_text())
    assert meta["batch_size"] == 64 and meta["epochs"] == 1


def test_recount_mismatch_guard():
    bad = SftExample(
        question="q",
        constraint=LengthConstraint(LengthUnit.WORD, 500),
        response="only four words here.",
        variant="plain",
    )
    with pytest.raises(RecountMismatch):
        _validate_example(bad, None)
    dropped = []
    # doctored items: empty responses cannot be retrofitted
    out = build_dataset([("q", "Fine reply here.")], "plain", seed=0, on_drop=dropped.append)
    assert len(out) == 1 and not dropped


def test_build_icl_demo_nearest_and_ties():
    pool = [
        ("q90", " ".join(["w"] * 90)),
        ("q210", " ".join(["w"] * 210)),
        ("q300", " ".join(["w"] * 300)),
    ]
    demo = build_icl_demo(pool, LengthConstraint(LengthUnit.WORD, 200))
    assert demo.question == "q210"
    assert demo.constraint.target == 210
    # tie: 190 and 210 both 10 away -> smaller index wins
    tie_pool = [("a", " ".join(["w"] * 190))] + pool
    demo = build_icl_demo(tie_pool, LengthConstraint(LengthUnit.WORD, 200))
    assert demo.question == "a"


def test_build_icl_demo_with_markers_revalidates():
    pool = [("q", "One two three. Four five six seven.")]
    demo = build_icl_demo(pool, LengthConstraint(LengthUnit.WORD, 7), with_markers=True)
    clean, events = strip_feedback(demo.response)
    assert clean == pool[0][1]
    assert [e.count for e in events] == [3, 7]
    assert demo.constraint.target == 7
    assert abs(measure(clean, LengthUnit.WORD) - demo.constraint.target) <= demo.constraint.tolerance


def test_build_icl_demo_empty_pool():
    with pytest.raises(EmptyPool):
        build_icl_demo([], LengthConstraint(LengthUnit.WORD, 100))
