"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 config, 4 backend failure, 5 cap or limit hit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics, sftgen
from .backend import BackendError, EstimatorBackend, SamplingParams
from .config import AppConfig, ConfigError, load_config
from .controller import (
    ControllerConfig,
    JsonlTraceWriter,
    LengthConstraint,
    SessionStatus,
    run_session,
)
from .feedback import PromptMode, build_prompt
from .segmenter import load_abbreviations
from .server import LengthControlProxy
from .units import LengthUnit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_BACKEND = 4
EXIT_CAP = 5


def _read_dataset(path: str, key: str = "instruction") -> list[str]:
    """Dataset file: JSONL objects (with ``key`` or ``question`` field) or
    plain text, one item per line."""
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            obj = json.loads(line)
            items.append(str(obj.get(key) or obj.get("question") or obj.get("text")))
        else:
            items.append(line)
    return items


def _sampling(cfg: AppConfig) -> SamplingParams:
    return SamplingParams(
        temperature=cfg.temperature, top_p=cfg.top_p, max_new_tokens=cfg.max_new_tokens
    )


def _abbreviations(cfg: AppConfig):
    if cfg.abbreviations_path:
        return load_abbreviations(cfg.abbreviations_path)
    return None


def cmd_generate(args: argparse.Namespace, cfg: AppConfig) -> int:
    if args.instruction:
        instruction = args.instruction
    elif args.input:
        instruction = Path(args.input).read_text(encoding="utf-8").strip()
    else:
        instruction = sys.stdin.read().strip()
    unit = LengthUnit.parse(args.unit)
    tolerance = args.tolerance if args.tolerance is not None else cfg.tolerance_for(unit)
    constraint = LengthConstraint(unit, args.target, tolerance)
    prompt = build_prompt(
        instruction,
        constraint,
        PromptMode.parse(args.mode),
        templates_dir=cfg.templates_dir or None,
    )
    trace = JsonlTraceWriter(args.trace) if args.trace else None
    try:
        state = run_session(
            cfg.build_backend(),
            prompt,
            constraint,
            config=ControllerConfig(max_resumes=args.max_resumes),
            tokenizer=cfg.tokenizer(),
            sampling=_sampling(cfg),
            trace=trace,
            abbreviations=_abbreviations(cfg),
        )
    finally:
        if trace is not None:
            trace.close()
    print(state.clean_text)
    if state.status is SessionStatus.FAILED:
        print(f"error: {state.error}", file=sys.stderr)
        # the resume limit is a cap-style outcome, not a backend fault
        return EXIT_CAP if "resume limit" in (state.error or "") else EXIT_BACKEND
    if state.status is SessionStatus.DONE_CAP:
        print(f"warning: {state.error}", file=sys.stderr)
        return EXIT_CAP
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, cfg: AppConfig) -> int:
    unit = LengthUnit.parse(args.unit)
    dataset = _read_dataset(args.dataset)
    grid = None
    if args.grid:
        from .config import _parse_grid

        grid = _parse_grid(args.grid)
    elif unit in cfg.grids:
        grid = cfg.grids[unit]
    demo_pool = None
    mode = PromptMode.parse(args.mode)
    if mode.wants_demo:
        pool_path = args.demo_pool or args.dataset
        demo_pool = [
            (q, r)
            for q, r in _read_demo_pool(pool_path)
        ]
    summary, pairs = metrics.run_grid(
        dataset,
        unit,
        grid,
        mode,
        cfg.build_backend(),
        tokenizer=cfg.tokenizer(),
        epsilon=args.epsilon if args.epsilon is not None else cfg.tolerance_for(unit),
        demo_pool=demo_pool,
        sampling=_sampling(cfg),
        parallelism=cfg.parallelism,
        templates_dir=cfg.templates_dir or None,
    )
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.export_distributions(pairs, str(out / "pairs.csv"))
    metrics.write_summary(summary, str(out / "summary.json"))
    print(
        f"n={summary.n} mae={summary.mae:.2f} pm={summary.pm:.4f} "
        f"failures={summary.failures} -> {out}"
    )
    return EXIT_OK


def _read_demo_pool(path: str) -> list[tuple[str, str]]:
    pool = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or not line.startswith("{"):
            continue
        obj = json.loads(line)
        question = obj.get("question") or obj.get("instruction") or ""
        response = obj.get("response") or obj.get("answer") or ""
        if question and response:
            pool.append((question, response))
    return pool


def cmd_pilot(args: argparse.Namespace, cfg: AppConfig) -> int:
    unit = LengthUnit.parse(args.unit)
    samples = []
    for line in Path(args.dataset).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        samples.append((str(obj["text"]), int(obj["specified"])))
    if args.estimator_offset is not None:
        backend = EstimatorBackend(unit, cfg.tokenizer(), offset=args.estimator_offset)
    else:
        backend = cfg.build_backend()
    summary = metrics.pilot_study(
        samples, unit, backend, tokenizer=cfg.tokenizer(), sampling=_sampling(cfg)
    )
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pilot.json").write_text(
        json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary.to_json()["buckets"], sort_keys=True))
    return EXIT_OK


def cmd_sft_build(args: argparse.Namespace, cfg: AppConfig) -> int:
    items = []
    for line in Path(args.dataset).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        items.append((str(obj["question"]), str(obj["response"])))
    if args.n is not None:
        items = items[: args.n]
    dropped = []
    examples = sftgen.build_dataset(
        items,
        args.variant,
        seed=args.seed if args.seed is not None else cfg.seed,
        tokenizer=cfg.tokenizer(),
        on_drop=lambda i, exc: dropped.append((i, str(exc))),
    )
    out = Path(args.out or (Path(cfg.out_dir) / "sft.jsonl"))
    out.parent.mkdir(parents=True, exist_ok=True)
    n = sftgen.write_jsonl(examples, str(out))
    print(f"wrote {n} examples to {out} ({len(dropped)} dropped)")
    return EXIT_OK


def cmd_judge(args: argparse.Namespace, cfg: AppConfig) -> int:
    if args.replies:
        scale = metrics.JUDGE_TEMPLATES[args.template][0]
        results = []
        errors = 0
        for line in Path(args.replies).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                score = metrics.extract_boxed_score(str(obj["reply"]), scale)
                results.append({"sample_id": obj.get("sample_id", ""), "score": score})
            except (metrics.NoBoxedValue, metrics.OutOfRange) as exc:
                errors += 1
                results.append(
                    {"sample_id": obj.get("sample_id", ""), "error": str(exc)}
                )
        out = Path(args.out or (Path(cfg.out_dir) / "scores.json"))
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
        scored = [r["score"] for r in results if "score" in r]
        mean = sum(scored) / len(scored) if scored else float("nan")
        print(f"scored {len(scored)} replies (mean {mean:.2f}), {errors} unparseable -> {out}")
        return EXIT_OK
    samples = []
    for line in Path(args.inputs).read_text(encoding="utf-8").splitlines():
        if line.strip():
            samples.append(json.loads(line))
    prompts = metrics.emit_judge_prompts(
        samples, args.template, templates_dir=cfg.templates_dir or None
    )
    out = Path(args.out or (Path(cfg.out_dir) / "judge_prompts.jsonl"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps(p, ensure_ascii=False) + "\n")
    print(f"wrote {len(prompts)} judge prompts to {out}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace, cfg: AppConfig) -> int:
    proxy = LengthControlProxy(
        cfg,
        host=args.host,
        port=args.port,
        api_key=args.serve_key or "",
        max_parallel=cfg.parallelism,
    )
    host, port = proxy.address
    print(f"listening on http://{host}:{port}/v1/chat/completions", file=sys.stderr)
    try:
        proxy.serve_forever()
    except KeyboardInterrupt:
        proxy.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lenctl", description="Length-controlled generation toolkit"
    )
    parser.add_argument("--config", help="path to a key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run one controlled generation")
    p.add_argument("--unit", required=True, choices=[u.value for u in LengthUnit])
    p.add_argument("--target", required=True, type=int)
    p.add_argument("--tolerance", type=int)
    p.add_argument("--mode", default="feedback", choices=[m.value for m in PromptMode])
    p.add_argument("--instruction", help="task text (otherwise read from --input/stdin)")
    p.add_argument("--input", help="file with the task text")
    p.add_argument("--trace", help="write a JSONL session trace here")
    p.add_argument("--max-resumes", type=int, default=128)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="run a target-length grid and export metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--unit", required=True, choices=[u.value for u in LengthUnit])
    p.add_argument("--grid", help="start:stop:step or comma list")
    p.add_argument("--mode", default="feedback", choices=[m.value for m in PromptMode])
    p.add_argument("--epsilon", type=int)
    p.add_argument("--demo-pool", help="JSONL pool for ICL demonstrations")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pilot", help="length self-estimation study")
    p.add_argument("--dataset", required=True, help='JSONL of {"text", "specified"}')
    p.add_argument("--unit", default="token", choices=[u.value for u in LengthUnit])
    p.add_argument(
        "--estimator-offset",
        type=int,
        help="use the built-in estimator mock with this offset instead of the backend",
    )
    p.add_argument("--out")
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("sft-build", help="build SFT training data")
    p.add_argument("--dataset", required=True, help='JSONL of {"question", "response"}')
    p.add_argument("--variant", default="feedback", choices=["plain", "feedback"])
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="limit the number of items")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sft_build)

    p = sub.add_parser("judge", help="emit judge prompts or score judge replies")
    p.add_argument("--template", required=True, choices=sorted(metrics.JUDGE_TEMPLATES))
    p.add_argument("--inputs", help="JSONL with the template's fields per line")
    p.add_argument("--replies", help='JSONL of {"sample_id", "reply"} to score')
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("serve", help="run the length-control proxy")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--serve-key", help="require this bearer token from clients")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "judge" and not (args.inputs or args.replies):
        parser.error("judge requires --inputs or --replies")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
