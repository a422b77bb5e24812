"""Application configuration.

A single key-value text file (``key = value`` per line, ``#`` comments)
plus environment overrides for secrets: ``LENCTL_ENDPOINT`` and
``LENCTL_API_KEY``.  Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .backend import Backend, make_backend
from .units import LengthUnit, TokenizerSpec


class ConfigError(Exception):
    """The configuration file or its values are invalid."""


def _parse_grid(value: str) -> tuple[int, ...]:
    """Grid syntax: ``start:stop:step`` (inclusive) or ``a,b,c``."""
    value = value.strip()
    if ":" in value:
        parts = value.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid {value!r} must be start:stop:step")
        start, stop, step = (int(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"grid {value!r} has an empty range")
        return tuple(range(start, stop + 1, step))
    return tuple(int(p) for p in value.split(",") if p.strip())


@dataclass
class AppConfig:
    backend_kind: str = "compliant"
    endpoint_url: str = ""
    api_key: str = ""
    model: str = "default"
    script: tuple[str, ...] = ()
    compliance: float = 0.0
    sigma: float = 0.35
    backend_seed: int = 0
    prefix_mode: str = "assistant_message"

    tokenizer_mode: str = "whitespace_fallback"
    vocab_path: str = ""
    special_tokens: tuple[str, ...] = ()

    tolerances: dict = field(
        default_factory=lambda: {
            LengthUnit.TOKEN: 10,
            LengthUnit.WORD: 10,
            LengthUnit.SENTENCE: 0,
            LengthUnit.CHARACTER: 10,
        }
    )
    grids: dict = field(default_factory=dict)

    out_dir: str = "out"
    abbreviations_path: str = ""
    templates_dir: str = ""

    temperature: float = 0.8
    top_p: float = 0.95
    max_new_tokens: int = 2048

    seed: int = 0
    parallelism: int = 4

    def tokenizer(self) -> TokenizerSpec:
        return TokenizerSpec(
            mode=self.tokenizer_mode,
            vocab_path=self.vocab_path or None,
            special_tokens=self.special_tokens,
        )

    def build_backend(self) -> Backend:
        return make_backend(
            self.backend_kind,
            endpoint_url=self.endpoint_url,
            api_key=self.api_key or None,
            model=self.model,
            prefix_mode=self.prefix_mode,
            script=self.script,
            compliance=self.compliance,
            sigma=self.sigma,
            seed=self.backend_seed,
            tokenizer=self.tokenizer(),
        )

    def tolerance_for(self, unit: LengthUnit) -> int:
        return self.tolerances[unit]


def _setters() -> dict:
    def unit_key(prefix, cast, store):
        out = {}
        for unit in LengthUnit:
            def setter(cfg, v, unit=unit, cast=cast, store=store):
                getattr(cfg, store)[unit] = cast(v)
            out[f"{prefix}.{unit.value}"] = setter
        return out

    table = {
        "backend.kind": lambda c, v: setattr(c, "backend_kind", v),
        "backend.endpoint_url": lambda c, v: setattr(c, "endpoint_url", v),
        "backend.api_key": lambda c, v: setattr(c, "api_key", v),
        "backend.model": lambda c, v: setattr(c, "model", v),
        "backend.script": lambda c, v: setattr(c, "script", tuple(v.split("||"))),
        "backend.compliance": lambda c, v: setattr(c, "compliance", float(v)),
        "backend.sigma": lambda c, v: setattr(c, "sigma", float(v)),
        "backend.seed": lambda c, v: setattr(c, "backend_seed", int(v)),
        "backend.prefix_mode": lambda c, v: setattr(c, "prefix_mode", v),
        "tokenizer.mode": lambda c, v: setattr(c, "tokenizer_mode", v),
        "tokenizer.vocab_path": lambda c, v: setattr(c, "vocab_path", v),
        "tokenizer.special_tokens": lambda c, v: setattr(
            c, "special_tokens", tuple(s for s in v.split(",") if s)
        ),
        "paths.out_dir": lambda c, v: setattr(c, "out_dir", v),
        "paths.abbreviations": lambda c, v: setattr(c, "abbreviations_path", v),
        "paths.templates": lambda c, v: setattr(c, "templates_dir", v),
        "sampling.temperature": lambda c, v: setattr(c, "temperature", float(v)),
        "sampling.top_p": lambda c, v: setattr(c, "top_p", float(v)),
        "sampling.max_new_tokens": lambda c, v: setattr(c, "max_new_tokens", int(v)),
        "run.seed": lambda c, v: setattr(c, "seed", int(v)),
        "run.parallelism": lambda c, v: setattr(c, "parallelism", int(v)),
    }
    table.update(unit_key("tolerance", int, "tolerances"))
    table.update(
        {
            f"grid.{unit.value}": (
                lambda c, v, unit=unit: c.grids.__setitem__(unit, _parse_grid(v))
            )
            for unit in LengthUnit
        }
    )
    return table


_SETTERS = _setters()


def load_config(path: str | None = None) -> AppConfig:
    """Load config from a file (optional) and apply environment overrides."""
    cfg = AppConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        for lineno, raw in enumerate(lines, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            setter = _SETTERS.get(key)
            if setter is None:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                setter(cfg, value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    if os.environ.get("LENCTL_ENDPOINT"):
        cfg.endpoint_url = os.environ["LENCTL_ENDPOINT"]
    if os.environ.get("LENCTL_API_KEY"):
        cfg.api_key = os.environ["LENCTL_API_KEY"]
    _validate(cfg)
    return cfg


def _validate(cfg: AppConfig) -> None:
    if cfg.backend_kind not in ("http_sse", "scripted", "compliant", "noisy"):
        raise ConfigError(f"unknown backend kind {cfg.backend_kind!r}")
    if cfg.backend_kind == "http_sse" and not cfg.endpoint_url:
        raise ConfigError("backend.kind http_sse requires backend.endpoint_url")
    if cfg.parallelism < 1:
        raise ConfigError("run.parallelism must be >= 1")
    if not 0 <= cfg.compliance <= 1:
        raise ConfigError("backend.compliance must be in [0, 1]")
