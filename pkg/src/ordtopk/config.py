"""
Layered ``key=value`` configuration: defaults, then a config file, then
environment variables with the ``ORDTOPK_`` prefix, then command-line flags.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "ORDTOPK_"


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config_text(text: str, source="<config>") -> dict:
    """
    One ``key = value`` pair per line. Blank lines and lines starting with
    ``#`` are ignored; values keep inner whitespace and are not unquoted.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        values[normalize_key(key)] = value.strip()
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def env_overrides(environ=None, prefix=ENV_PREFIX) -> dict:
    """Settings taken from ``PREFIX_KEY`` environment variables."""
    environ = os.environ if environ is None else environ
    return {normalize_key(k[len(prefix):]): v for k, v in environ.items() if k.startswith(prefix) and len(k) > len(prefix)}


def merge(*layers) -> dict:
    """Later layers win; ``None`` values never override."""
    out = {}
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is not None:
                out[normalize_key(k)] = v
    return out
