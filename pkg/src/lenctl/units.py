"""Length counting for tokens, words, sentences, and characters."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

from . import segmenter


class LengthUnit(Enum):
    """Linguistic granularity a length constraint is expressed in."""

    TOKEN = "token"
    WORD = "word"
    SENTENCE = "sentence"
    CHARACTER = "character"

    @property
    def plural(self) -> str:
        return self.value + "s"

    @classmethod
    def parse(cls, name: str) -> "LengthUnit":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown length unit: {name!r}") from None


class InvalidTokenizer(Exception):
    """The tokenizer specification cannot be used (bad mode or unreadable vocab)."""


@dataclass(frozen=True)
class TokenizerSpec:
    """How token counts are produced.

    ``whitespace_fallback`` splits on whitespace runs.  ``bpe_vocab_file``
    loads a ranked vocabulary (one token per line, UTF-8, rank = line number)
    and repeatedly merges the adjacent pair whose concatenation has the lowest
    rank, leftmost first on ties.  ``special_tokens`` are literal strings that
    are never split in either mode.
    """

    mode: str = "whitespace_fallback"
    vocab_path: str | None = None
    special_tokens: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in ("whitespace_fallback", "bpe_vocab_file"):
            raise InvalidTokenizer(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "bpe_vocab_file" and not self.vocab_path:
            raise InvalidTokenizer("bpe_vocab_file mode requires vocab_path")
        if not isinstance(self.special_tokens, tuple):
            object.__setattr__(self, "special_tokens", tuple(self.special_tokens))


@dataclass(frozen=True)
class CountReport:
    unit: LengthUnit
    value: int
    text_bytes: int


# Words are maximal letter/digit runs; apostrophes are kept when internal.
_WORD_RE = re.compile(r"[^\W_]+(?:['’][^\W_]+)*")

_DEFAULT_TOKENIZER = TokenizerSpec()


@lru_cache(maxsize=16)
def _load_vocab(path: str) -> dict[str, int]:
    """Load a ranked BPE vocabulary; shared read-only across callers."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidTokenizer(f"cannot read vocab file {path!r}: {exc}") from exc
    ranks: dict[str, int] = {}
    for rank, line in enumerate(raw.split("\n")):
        if line and line not in ranks:
            ranks[line] = rank
    if not ranks:
        raise InvalidTokenizer(f"vocab file {path!r} contains no tokens")
    return ranks


def _bpe_encode(text: str, ranks: dict[str, int]) -> list[str]:
    parts = list(text)
    while len(parts) > 1:
        best_rank = None
        best_i = -1
        for i in range(len(parts) - 1):
            rank = ranks.get(parts[i] + parts[i + 1])
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_i = i
        if best_i < 0:
            break
        parts[best_i : best_i + 2] = [parts[best_i] + parts[best_i + 1]]
    return parts


def _split_on_specials(text: str, specials: tuple[str, ...]) -> list[tuple[str, bool]]:
    """Split text into (segment, is_special) pieces, longest literal first."""
    if not specials:
        return [(text, False)]
    pattern = re.compile(
        "(" + "|".join(re.escape(s) for s in sorted(specials, key=len, reverse=True)) + ")"
    )
    pieces = []
    for i, seg in enumerate(pattern.split(text)):
        if seg:
            pieces.append((seg, i % 2 == 1))
    return pieces


def tokenize(text: str, tokenizer: TokenizerSpec | None = None) -> list[str]:
    """Split text into tokens per the tokenizer spec.

    In whitespace_fallback mode the tokens are the whitespace-separated
    fields; joining them with single spaces reproduces the input only when
    the input was single-space normalized.
    """
    spec = tokenizer or _DEFAULT_TOKENIZER
    tokens: list[str] = []
    ranks = _load_vocab(spec.vocab_path) if spec.mode == "bpe_vocab_file" else None
    for seg, is_special in _split_on_specials(text, spec.special_tokens):
        if is_special:
            tokens.append(seg)
        elif ranks is None:
            tokens.extend(seg.split())
        else:
            tokens.extend(_bpe_encode(seg, ranks))
    return tokens


def count(text: str, unit: LengthUnit, tokenizer: TokenizerSpec | None = None) -> CountReport:
    """Count the given unit in ``text``.

    Deterministic: characters are Unicode scalar values, words are maximal
    letter/digit runs (internal apostrophes attached), sentences delegate to
    the segmenter, tokens come from :func:`tokenize`.  Token counts are always
    computed over the full text, never summed incrementally, because subword
    merges across chunk boundaries would make incremental sums unsound.
    """
    return CountReport(
        unit=unit,
        value=measure(text, unit, tokenizer),
        text_bytes=len(text.encode("utf-8")),
    )


def measure(text: str, unit: LengthUnit, tokenizer: TokenizerSpec | None = None) -> int:
    """``count(...).value`` without building the report (hot path)."""
    if unit is LengthUnit.CHARACTER:
        return len(text)
    if unit is LengthUnit.WORD:
        return len(_WORD_RE.findall(text))
    if unit is LengthUnit.SENTENCE:
        return len(segmenter.segment_batch(text))
    return len(tokenize(text, tokenizer))
