"""Streaming generation backends.

One uniform interface covers a real OpenAI-compatible HTTP endpoint and a
family of deterministic mock models used as test oracles:

* ``ScriptedBackend`` replays a fixed reply and continues after a prefix.
* ``CompliantBackend`` reads length feedback and lands exactly on target,
  standing in for a model that uses the feedback perfectly.
* ``NoisyBackend`` miscounts its own output; ``compliance`` scales how much
  it trusts feedback markers (0 = ignores them, the baseline arm).
* ``EstimatorBackend`` answers length-estimation prompts with the true count
  plus a fixed offset.

Stop sequences are enforced locally with holdback buffering, so emitted text
never contains a stop sequence and the matched stop is always known.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from . import units
from .feedback import strip_feedback
from .units import LengthUnit, TokenizerSpec


class BackendError(Exception):
    """Base class for stream-level failures."""


class ConnectionFailed(BackendError):
    """The endpoint could not be reached or dropped the connection."""


class ProtocolError(BackendError):
    """The endpoint replied with a malformed or unexpected event stream."""


class AuthError(BackendError):
    """The endpoint rejected the credentials."""


class UnparseableConstraint(BackendError):
    """A mock model could not find a length requirement in the prompt."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.8
    top_p: float = 0.95
    max_new_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")


@dataclass
class GenRequest:
    """One streaming generation request.

    ``context`` is an ordered list of (role, text) with roles system/user/
    assistant; ``assistant_prefix`` is content the reply must continue from.
    """

    context: list[tuple[str, str]]
    sampling: SamplingParams = field(default_factory=SamplingParams)
    stop_sequences: list[str] = field(default_factory=list)
    assistant_prefix: str = ""

    def __post_init__(self) -> None:
        for role, _ in self.context:
            if role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown role {role!r}")
        if any(not s for s in self.stop_sequences):
            raise ValueError("stop sequences must be nonempty")

    def user_text(self) -> str:
        return "\n\n".join(text for role, text in self.context if role == "user")


@dataclass
class StreamChunk:
    text_delta: str = ""
    finish: str | None = None  # "stop_sequence" | "eos" | "length_cap"
    matched_stop: str | None = None


class _StopScanner:
    """Holds back any suffix that could begin a stop sequence."""

    def __init__(self, stops: Sequence[str]):
        self.stops = [s for s in stops if s]
        self.buf = ""
        self.max_hold = max((len(s) - 1 for s in self.stops), default=0)

    def push(self, delta: str) -> tuple[str, str | None]:
        """Feed a delta; return (text safe to emit, matched stop or None)."""
        self.buf += delta
        best: tuple[int, str] | None = None
        for s in self.stops:
            i = self.buf.find(s)
            if i >= 0 and (best is None or i < best[0]):
                best = (i, s)
        if best is not None:
            emit = self.buf[: best[0]]
            self.buf = ""
            return emit, best[1]
        hold = 0
        limit = min(self.max_hold, len(self.buf))
        for s in self.stops:
            for length in range(min(len(s) - 1, limit), hold, -1):
                if self.buf.endswith(s[:length]):
                    hold = length
                    break
        emit = self.buf[: len(self.buf) - hold]
        self.buf = self.buf[len(self.buf) - hold :]
        return emit, None

    def flush(self) -> str:
        emit, self.buf = self.buf, ""
        return emit


class Backend:
    """Uniform streaming interface; implementations yield ordered chunks and
    terminate with exactly one finish chunk."""

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        raise NotImplementedError


def _stream_pieces(pieces: Iterator[str], request: GenRequest) -> Iterator[StreamChunk]:
    """Apply stop-sequence semantics to a piecewise reply and finish the stream."""
    scanner = _StopScanner(request.stop_sequences)
    for piece in pieces:
        emit, matched = scanner.push(piece)
        if matched is not None:
            yield StreamChunk(text_delta=emit, finish="stop_sequence", matched_stop=matched)
            return
        if emit:
            yield StreamChunk(text_delta=emit)
    yield StreamChunk(text_delta=scanner.flush(), finish="eos")


_CONSTRAINT_RE = re.compile(r"exactly (\d+) (tokens|words|sentences|characters)")


def parse_constraint_from_prompt(text: str) -> tuple[LengthUnit, int]:
    m = None
    for m in _CONSTRAINT_RE.finditer(text):
        pass
    if m is None:
        raise UnparseableConstraint("no length requirement found in prompt")
    return LengthUnit(m.group(2)[:-1]), int(m.group(1))


_FILLER_BANK = (
    "steady words keep the reply moving forward while the counter runs "
    "quiet lines carry small ideas along an even path and the draft grows "
    "simple plain calm clear open broad fresh level neat round"
).split()

_LONG_WORD_RE = re.compile(r"[A-Za-z0-9]{4,}")


def _request_tag(user_text: str) -> str:
    """A per-request echo token: the longest alphanumeric word in the prompt."""
    words = _LONG_WORD_RE.findall(user_text)
    return max(words, key=len) if words else "reply"


def _filler_sentence(salt: str, index: int, tag: str) -> str:
    rng = random.Random(f"{salt}|sentence|{index}")
    n = rng.randint(6, 11)
    words = [rng.choice(_FILLER_BANK) for _ in range(n)]
    words.insert(1, tag)
    return words[0].capitalize() + " " + " ".join(words[1:]) + "."


class ScriptedBackend(Backend):
    """Replays a fixed reply.  On resume, continues the reply after the clean
    assistant prefix; if the prefix does not match, replays from the start."""

    def __init__(self, script: Sequence[str]):
        self.script = list(script)

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        full = "".join(self.script)
        prefix, _ = strip_feedback(request.assistant_prefix)
        skip = len(prefix) if prefix and full.startswith(prefix) else 0

        def pieces() -> Iterator[str]:
            seen = 0
            for part in self.script:
                lo = max(skip - seen, 0)
                seen += len(part)
                if lo < len(part):
                    yield part[lo:]

        return _stream_pieces(pieces(), request)


def _seed_salt(seed: int, request: GenRequest) -> str:
    s = request.sampling
    return f"{seed}|{request.user_text()}|{s.temperature}|{s.top_p}"


class CompliantBackend(Backend):
    """Oracle model: parses the length requirement from the prompt, reads the
    latest feedback marker if any, and plans filler output to land on the
    target (exactly, for all units under its own planning tokenizer)."""

    MAX_SENTENCES = 500

    def __init__(self, seed: int = 0, tokenizer: TokenizerSpec | None = None):
        self.seed = seed
        self.tokenizer = tokenizer or TokenizerSpec()

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        unit, target = parse_constraint_from_prompt(request.user_text())
        prefix, events = strip_feedback(request.assistant_prefix)
        salt = _seed_salt(self.seed, request)
        tag = _request_tag(request.user_text())
        return _stream_pieces(self._plan(unit, target, prefix, events, salt, tag), request)

    def _measure(self, text: str, unit: LengthUnit) -> int:
        return units.measure(text, unit, self.tokenizer)

    def _additive(self, unit: LengthUnit) -> bool:
        # counts compose across a marker/whitespace seam for every unit except
        # ranked-vocab tokens, where merges can straddle it
        return not (unit is LengthUnit.TOKEN and self.tokenizer.mode == "bpe_vocab_file")

    def _have(self, prefix: str, events, unit: LengthUnit) -> int:
        """Count of the clean prefix, reading the latest feedback marker."""
        if not events or not self._additive(unit):
            return self._measure(prefix, unit)
        last = events[-1]
        tail = prefix.encode("utf-8")[last.insertion_offset :].decode("utf-8")
        return last.count + self._measure(tail, unit)

    def _plan(
        self, unit: LengthUnit, target: int, prefix: str, events, salt: str, tag: str
    ) -> Iterator[str]:
        text = prefix
        have = self._have(prefix, events, unit)
        idx = have if unit is LengthUnit.SENTENCE else len(events)
        additive = self._additive(unit)
        for _ in range(self.MAX_SENTENCES):
            sep = "" if not text or text[-1].isspace() else " "
            if unit is LengthUnit.SENTENCE:
                if have >= target:
                    return
                piece = sep + _filler_sentence(salt, idx, tag)
                have += 1
            else:
                remaining = target - have
                if remaining <= 0:
                    return
                piece = sep + _filler_sentence(salt, idx, tag)
                if additive:
                    gain = self._measure(piece, unit)
                else:
                    gain = self._measure(text + piece, unit) - have
                if gain >= remaining:
                    yield self._landing(text, sep, unit, target, remaining)
                    return
                have += gain
            text += piece
            idx += 1
            yield piece
        raise BackendError("compliant plan exceeded sentence budget")

    def _landing(
        self, text: str, sep: str, unit: LengthUnit, target: int, remaining: int
    ) -> str:
        """Final sentence sized so the full clean text counts exactly ``target``."""
        if unit is LengthUnit.CHARACTER:
            body = remaining - len(sep)
            if body <= 0:
                return sep[:remaining]
            if body == 1:
                return sep + "X"
            return sep + "X" + "x" * (body - 2) + "."
        if self._additive(unit):
            # one countable unit per space-separated word
            if remaining == 1:
                return sep + "Done."
            return sep + "Tail " + "pad " * (remaining - 2) + "ends."
        # ranked-vocab tokenizer: grow pads until the recount hits the target
        best = sep + "Done."
        for pads in range(0, 4 * target + 8):
            candidate = sep + "Tail " + "pad " * pads + "ends."
            total = self._measure(text + candidate, unit)
            if total == target:
                return candidate
            if total > target:
                break
            best = candidate
        return best


class NoisyBackend(Backend):
    """Mock of a model with biased self-counting.

    Per session it draws a multiplicative counting bias; it stops once its
    *believed* count reaches the target, so its true length misses by roughly
    target*(e^eps - 1).  With ``compliance`` > 0 it anchors its belief on the
    latest feedback marker, shrinking the miss; with compliance 0 the output
    is byte-identical to a run without feedback.
    """

    MAX_SENTENCES = 400

    def __init__(
        self,
        compliance: float = 0.0,
        sigma: float = 0.35,
        seed: int = 0,
        tokenizer: TokenizerSpec | None = None,
    ):
        if not 0 <= compliance <= 1:
            raise ValueError("compliance must be in [0, 1]")
        self.compliance = compliance
        self.sigma = sigma
        self.seed = seed
        self.tokenizer = tokenizer or TokenizerSpec()

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        unit, target = parse_constraint_from_prompt(request.user_text())
        prefix, events = strip_feedback(request.assistant_prefix)
        salt = _seed_salt(self.seed, request)
        eps = random.Random(f"{salt}|bias").gauss(0.0, self.sigma)
        tag = _request_tag(request.user_text())

        def believed(text: str) -> float:
            true_count = units.measure(text, unit, self.tokenizer)
            naive = true_count * math.exp(-eps)
            if events and self.compliance > 0:
                last = events[-1]
                tail = text.encode("utf-8")[last.insertion_offset :].decode("utf-8")
                anchored = last.count + units.measure(tail, unit, self.tokenizer) * math.exp(-eps)
                return self.compliance * anchored + (1 - self.compliance) * naive
            return naive

        def pieces() -> Iterator[str]:
            text = prefix
            idx = units.measure(prefix, LengthUnit.SENTENCE, self.tokenizer)
            for _ in range(self.MAX_SENTENCES):
                if believed(text) >= target:
                    return
                sep = "" if not text or text[-1].isspace() else " "
                piece = sep + _filler_sentence(salt, idx, tag)
                text += piece
                idx += 1
                yield piece

        return _stream_pieces(pieces(), request)


class EstimatorBackend(Backend):
    """Answers length-estimation prompts: extracts the text after the last
    ``Text:`` marker and replies with its true count plus a fixed offset."""

    def __init__(self, unit: LengthUnit, tokenizer: TokenizerSpec | None = None, offset: int = 0):
        self.unit = unit
        self.tokenizer = tokenizer or TokenizerSpec()
        self.offset = offset

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        prompt = request.user_text()
        marker = "Text:"
        at = prompt.rfind(marker)
        if at < 0:
            raise UnparseableConstraint("estimation prompt carries no Text: section")
        text = prompt[at + len(marker) :].strip()
        n = units.measure(text, self.unit, self.tokenizer) + self.offset
        reply = f"The text uses {n} {self.unit.plural}. \\boxed{{{n}}}"
        return _stream_pieces(iter([reply]), request)


class HttpSseBackend(Backend):
    """OpenAI-compatible chat-completions client over server-sent events.

    Stop sequences are enforced locally (never forwarded), so their semantics
    do not depend on upstream support and the matched stop is always known.
    ``prefix_mode`` picks the continuation mechanics: ``assistant_message``
    appends the prefix as a trailing assistant turn (prefill-style), while
    ``transcript_concat`` folds the whole transcript into one user message
    for endpoints that reject assistant prefixes.
    """

    def __init__(
        self,
        endpoint_url: str,
        api_key: str | None = None,
        model: str = "default",
        timeout: float = 120.0,
        prefix_mode: str = "assistant_message",
    ):
        if not endpoint_url:
            raise ValueError("http_sse backend requires an endpoint URL")
        if prefix_mode not in ("assistant_message", "transcript_concat"):
            raise ValueError(f"unknown prefix mode {prefix_mode!r}")
        self.endpoint_url = endpoint_url
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.prefix_mode = prefix_mode

    def _messages(self, request: GenRequest) -> list[dict[str, str]]:
        messages = [{"role": role, "content": text} for role, text in request.context]
        if request.assistant_prefix:
            if self.prefix_mode == "assistant_message":
                messages.append({"role": "assistant", "content": request.assistant_prefix})
            else:
                transcript = "\n\n".join(
                    f"{m['role']}: {m['content']}" for m in messages
                )
                transcript += "\n\nassistant: " + request.assistant_prefix
                messages = [{"role": "user", "content": transcript}]
        return messages

    def start_stream(self, request: GenRequest) -> Iterator[StreamChunk]:
        import httpx

        payload = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_new_tokens,
            "stream": True,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        def run() -> Iterator[StreamChunk]:
            scanner = _StopScanner(request.stop_sequences)
            finish: str | None = None
            try:
                with httpx.Client(timeout=self.timeout) as client:
                    with client.stream(
                        "POST", self.endpoint_url, json=payload, headers=headers
                    ) as response:
                        if response.status_code in (401, 403):
                            raise AuthError(f"endpoint returned {response.status_code}")
                        if response.status_code != 200:
                            raise ProtocolError(
                                f"endpoint returned status {response.status_code}"
                            )
                        for line in response.iter_lines():
                            line = line.strip()
                            if not line or line.startswith(":"):
                                continue
                            if not line.startswith("data:"):
                                raise ProtocolError(f"unexpected SSE line: {line[:80]!r}")
                            data = line[len("data:") :].strip()
                            if data == "[DONE]":
                                break
                            try:
                                event = json.loads(data)
                                choice = event["choices"][0]
                            except (json.JSONDecodeError, KeyError, IndexError) as exc:
                                raise ProtocolError(f"malformed SSE payload: {exc}") from exc
                            delta = (choice.get("delta") or {}).get("content") or ""
                            if delta:
                                emit, matched = scanner.push(delta)
                                if matched is not None:
                                    yield StreamChunk(
                                        text_delta=emit,
                                        finish="stop_sequence",
                                        matched_stop=matched,
                                    )
                                    return
                                if emit:
                                    yield StreamChunk(text_delta=emit)
                            reason = choice.get("finish_reason")
                            if reason:
                                finish = "length_cap" if reason == "length" else "eos"
            except httpx.HTTPError as exc:
                raise ConnectionFailed(str(exc)) from exc
            yield StreamChunk(text_delta=scanner.flush(), finish=finish or "eos")

        return run()


def make_backend(kind: str, **options) -> Backend:
    """Build a backend by kind name: http_sse, scripted, compliant, noisy,
    or estimator."""
    if kind == "http_sse":
        return HttpSseBackend(
            endpoint_url=options.get("endpoint_url", ""),
            api_key=options.get("api_key"),
            model=options.get("model", "default"),
            timeout=options.get("timeout", 120.0),
            prefix_mode=options.get("prefix_mode", "assistant_message"),
        )
    if kind == "scripted":
        return ScriptedBackend(options.get("script", ()))
    if kind == "compliant":
        return CompliantBackend(
            seed=options.get("seed", 0), tokenizer=options.get("tokenizer")
        )
    if kind == "noisy":
        return NoisyBackend(
            compliance=options.get("compliance", 0.0),
            sigma=options.get("sigma", 0.35),
            seed=options.get("seed", 0),
            tokenizer=options.get("tokenizer"),
        )
    if kind == "estimator":
        return EstimatorBackend(
            unit=options.get("unit", LengthUnit.TOKEN),
            tokenizer=options.get("tokenizer"),
            offset=options.get("offset", 0),
        )
    raise ValueError(f"unknown backend kind {kind!r}")
