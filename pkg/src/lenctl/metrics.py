"""Length-control metrics, grid benchmarking, and the length-estimation pilot.

MAE is the mean absolute difference between generated and target lengths; PM
(precise match) is the fraction of samples whose absolute error is within the
tolerance (inclusive).  Failed sessions are excluded from both and reported
as a separate failure count.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import units
from .backend import Backend, GenRequest, SamplingParams
from .controller import (
    ControllerConfig,
    LengthConstraint,
    SessionStatus,
    run_batch,
)
from .feedback import PromptMode, build_prompt, load_template
from .units import LengthUnit, TokenizerSpec


class EmptyInput(Exception):
    """An aggregate was requested over zero samples."""


class NoBoxedValue(Exception):
    """A judge or estimator reply contains no \\boxed{...} integer."""


class OutOfRange(Exception):
    """A parsed score falls outside the template's rating scale."""


class NoParsableEstimate(Exception):
    """A pilot estimation reply could not be parsed."""


@dataclass(frozen=True)
class EvalPair:
    target: int
    generated: int
    unit: LengthUnit
    sample_id: str = ""


def mae(pairs: Sequence[EvalPair]) -> float:
    """Mean absolute error between generated and target lengths."""
    if not pairs:
        raise EmptyInput("mae over zero pairs")
    total = 0
    for p in pairs:
        total += abs(p.generated - p.target)
    return total / len(pairs)


def pm(pairs: Sequence[EvalPair], epsilon: int) -> float:
    """Fraction of pairs with |generated - target| <= epsilon (inclusive)."""
    if not pairs:
        raise EmptyInput("pm over zero pairs")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    hits = 0
    for p in pairs:
        if abs(p.generated - p.target) <= epsilon:
            hits += 1
    return hits / len(pairs)


@dataclass
class TargetBreakdown:
    n: int
    mae: float
    pm: float
    generated: tuple[int, ...]


@dataclass
class MetricsSummary:
    unit: LengthUnit
    epsilon: int
    n: int
    mae: float
    pm: float
    per_target: dict[int, TargetBreakdown]
    failures: int = 0
    capped: int = 0

    def to_json(self) -> dict:
        return {
            "unit": self.unit.value,
            "epsilon": self.epsilon,
            "n": self.n,
            "mae": self.mae,
            "pm": self.pm,
            "per_target": {
                str(t): {
                    "n": b.n,
                    "mae": b.mae,
                    "pm": b.pm,
                    "generated": list(b.generated),
                }
                for t, b in sorted(self.per_target.items())
            },
            "failures": self.failures,
            "capped": self.capped,
        }


def summarize(
    pairs: Sequence[EvalPair], epsilon: int, failures: int = 0, capped: int = 0
) -> MetricsSummary:
    if not pairs:
        raise EmptyInput("summary over zero pairs")
    unit = pairs[0].unit
    if any(p.unit is not unit for p in pairs):
        raise ValueError("summary group must use a single unit")
    per_target: dict[int, TargetBreakdown] = {}
    for target in sorted({p.target for p in pairs}):
        group = [p for p in pairs if p.target == target]
        per_target[target] = TargetBreakdown(
            n=len(group),
            mae=mae(group),
            pm=pm(group, epsilon),
            generated=tuple(p.generated for p in group),
        )
    return MetricsSummary(
        unit=unit,
        epsilon=epsilon,
        n=len(pairs),
        mae=mae(pairs),
        pm=pm(pairs, epsilon),
        per_target=per_target,
        failures=failures,
        capped=capped,
    )


DEFAULT_GRIDS = {
    LengthUnit.TOKEN: tuple(range(100, 401, 50)),
    LengthUnit.WORD: tuple(range(100, 401, 50)),
    LengthUnit.SENTENCE: tuple(range(5, 31, 5)),
    LengthUnit.CHARACTER: tuple(range(200, 1001, 200)),
}


def run_grid(
    dataset: Sequence[str],
    unit: LengthUnit,
    grid: Sequence[int] | None,
    mode: PromptMode,
    backend: Backend,
    tokenizer: TokenizerSpec | None = None,
    epsilon: int | None = None,
    demo_pool: Sequence[tuple[str, str]] | None = None,
    config: ControllerConfig | None = None,
    sampling: SamplingParams | None = None,
    parallelism: int = 1,
    templates_dir: str | None = None,
) -> tuple[MetricsSummary, list[EvalPair]]:
    """One controlled session per (item, target); aggregate MAE/PM.

    Failed sessions are excluded from the pairs and counted in
    ``summary.failures``; capped sessions are included but counted in
    ``summary.capped``.
    """
    from .sftgen import build_icl_demo

    if not dataset:
        raise EmptyInput("run_grid over an empty dataset")
    targets = tuple(grid) if grid else DEFAULT_GRIDS[unit]
    if not targets:
        raise EmptyInput("run_grid over an empty target grid")
    if epsilon is None:
        epsilon = LengthConstraint(unit, targets[0]).tolerance

    jobs = []
    ids = []
    for target in targets:
        constraint = LengthConstraint(unit, target, epsilon)
        demo = None
        if mode.wants_demo:
            if not demo_pool:
                raise ValueError(f"mode {mode.value} requires a demo pool")
            demo = build_icl_demo(
                demo_pool,
                constraint,
                with_markers=mode is PromptMode.ICL_FEEDBACK,
                tokenizer=tokenizer,
            )
        for i, instruction in enumerate(dataset):
            jobs.append(
                (
                    build_prompt(instruction, constraint, mode, demo, templates_dir=templates_dir),
                    constraint,
                )
            )
            ids.append(f"{i}:{target}")

    states = run_batch(
        jobs,
        backend,
        config=config,
        tokenizer=tokenizer,
        sampling=sampling,
        parallelism=parallelism,
    )
    pairs: list[EvalPair] = []
    failures = 0
    capped = 0
    for (prompt, constraint), sample_id, st in zip(jobs, ids, states):
        if st.status is SessionStatus.FAILED:
            failures += 1
            continue
        if st.status is SessionStatus.DONE_CAP:
            capped += 1
        pairs.append(
            EvalPair(
                target=constraint.target,
                generated=units.measure(st.clean_text, unit, tokenizer),
                unit=unit,
                sample_id=sample_id,
            )
        )
    return summarize(pairs, epsilon, failures=failures, capped=capped), pairs


# ---------------------------------------------------------------------------
# Pilot study: can a model estimate the length of its own output?

BUCKET_EDGES = {
    LengthUnit.TOKEN: (50, 150, 250, 350, 450),
    LengthUnit.WORD: (50, 150, 250, 350, 450),
    LengthUnit.SENTENCE: (5, 10, 15, 20, 25, 30),
    LengthUnit.CHARACTER: (50, 150, 250, 350, 450),
}


def bucket_label(value: int, unit: LengthUnit) -> str | None:
    """Left-closed bucket for a generated length, e.g. ``[50,150)``."""
    edges = BUCKET_EDGES[unit]
    for lo, hi in zip(edges, edges[1:]):
        if lo <= value < hi:
            return f"[{lo},{hi})"
    return None


@dataclass(frozen=True)
class PilotRecord:
    generated_len: int
    estimated_len: int
    specified_len: int
    bucket: str | None


@dataclass
class BucketStats:
    n: int
    mae_est_vs_gen: float
    mae_gen_vs_spec: float


@dataclass
class PilotSummary:
    unit: LengthUnit
    buckets: dict[str, BucketStats]
    records: list[PilotRecord] = field(default_factory=list)
    unparseable: int = 0

    def to_json(self) -> dict:
        return {
            "unit": self.unit.value,
            "buckets": {
                label: {
                    "n": b.n,
                    "mae_est_vs_gen": b.mae_est_vs_gen,
                    "mae_gen_vs_spec": b.mae_gen_vs_spec,
                }
                for label, b in self.buckets.items()
            },
            "unparseable": self.unparseable,
            "records": [
                {
                    "generated": r.generated_len,
                    "estimated": r.estimated_len,
                    "specified": r.specified_len,
                    "bucket": r.bucket,
                }
                for r in self.records
            ],
        }


_BOXED_RE = re.compile(r"\\boxed\{\s*(-?\d+)\s*\}")


def _collect_reply(backend: Backend, prompt_text: str, sampling: SamplingParams | None) -> str:
    request = GenRequest(
        context=[("user", prompt_text)], sampling=sampling or SamplingParams()
    )
    parts = []
    for chunk in backend.start_stream(request):
        parts.append(chunk.text_delta)
    return "".join(parts)


def estimation_prompt(text: str, unit: LengthUnit, templates_dir: str | None = None) -> str:
    return load_template("estimate_length", templates_dir).format(unit=unit.plural, text=text)


def pilot_study(
    samples: Sequence[tuple[str, int]],
    unit: LengthUnit,
    backend: Backend,
    tokenizer: TokenizerSpec | None = None,
    sampling: SamplingParams | None = None,
) -> PilotSummary:
    """Feed each (text, specified length) back through the estimation prompt
    and bucket the two MAEs by generated length.  Unparseable estimates are
    counted and excluded."""
    if not samples:
        raise EmptyInput("pilot study over zero samples")
    records: list[PilotRecord] = []
    unparseable = 0
    for text, specified in samples:
        generated = units.measure(text, unit, tokenizer)
        reply = _collect_reply(backend, estimation_prompt(text, unit), sampling)
        matches = _BOXED_RE.findall(reply)
        if not matches or int(matches[-1]) < 0:
            unparseable += 1
            continue
        records.append(
            PilotRecord(
                generated_len=generated,
                estimated_len=int(matches[-1]),
                specified_len=specified,
                bucket=bucket_label(generated, unit),
            )
        )
    buckets: dict[str, BucketStats] = {}
    edges = BUCKET_EDGES[unit]
    for lo, hi in zip(edges, edges[1:]):
        label = f"[{lo},{hi})"
        group = [r for r in records if r.bucket == label]
        if not group:
            continue
        buckets[label] = BucketStats(
            n=len(group),
            mae_est_vs_gen=sum(abs(r.estimated_len - r.generated_len) for r in group)
            / len(group),
            mae_gen_vs_spec=sum(abs(r.generated_len - r.specified_len) for r in group)
            / len(group),
        )
    return PilotSummary(unit=unit, buckets=buckets, records=records, unparseable=unparseable)


# ---------------------------------------------------------------------------
# Result files

def export_distributions(pairs: Sequence[EvalPair], path: str) -> None:
    """CSV of raw pairs, one row per sample, in input order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "target", "generated", "sample_id"])
        for p in pairs:
            writer.writerow([p.unit.value, p.target, p.generated, p.sample_id])


def load_distributions(path: str) -> list[EvalPair]:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pairs.append(
                EvalPair(
                    target=int(row["target"]),
                    generated=int(row["generated"]),
                    unit=LengthUnit(row["unit"]),
                    sample_id=row["sample_id"],
                )
            )
    return pairs


def write_summary(summary: MetricsSummary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Quality judging: prompt emission and score parsing

JUDGE_TEMPLATES: dict[str, tuple[tuple[int, int], tuple[str, ...]]] = {
    "general_quality": ((1, 10), ("question", "reference", "prediction")),
    "summary_coherence": ((1, 5), ("document", "summary")),
    "summary_consistency": ((1, 5), ("document", "summary")),
    "summary_relevance": ((1, 5), ("document", "summary")),
    "biography_coherence": ((1, 5), ("person", "biography")),
    "biography_factuality": ((1, 5), ("person", "wikipedia_text", "biography")),
}


def build_judge_prompt(template_id: str, templates_dir: str | None = None, **fields_) -> str:
    if template_id not in JUDGE_TEMPLATES:
        raise ValueError(f"unknown judge template {template_id!r}")
    _, wanted = JUDGE_TEMPLATES[template_id]
    missing = [f for f in wanted if f not in fields_]
    if missing:
        raise ValueError(f"judge template {template_id!r} missing fields: {missing}")
    return load_template(f"judge_{template_id}", templates_dir).format(**fields_)


def emit_judge_prompts(
    samples: Iterable[dict], template_id: str, templates_dir: str | None = None
) -> list[dict]:
    """Build {sample_id, template_id, prompt_text} records for a judge run."""
    out = []
    for sample in samples:
        fields_ = {k: v for k, v in sample.items() if k != "sample_id"}
        out.append(
            {
                "sample_id": sample.get("sample_id", str(len(out))),
                "template_id": template_id,
                "prompt_text": build_judge_prompt(template_id, templates_dir, **fields_),
            }
        )
    return out


def extract_boxed_score(judge_reply: str, scale: tuple[int, int] = (1, 10)) -> int:
    """Parse the judge's rating: the last \\boxed{integer} wins and must lie
    within the template's scale."""
    matches = _BOXED_RE.findall(judge_reply)
    if not matches:
        raise NoBoxedValue("no \\boxed{...} integer in reply")
    value = int(matches[-1])
    lo, hi = scale
    if not lo <= value <= hi:
        raise OutOfRange(f"score {value} outside scale [{lo}, {hi}]")
    return value
