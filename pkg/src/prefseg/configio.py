"""Plain-text key/value files shared by dataset manifests, training
configs, and per-run effective-config manifests.

Format: one ``key = value`` per line, ``#`` comments, blank lines
ignored.  Repeatable keys (e.g. dataset entries) are allowed and keep
file order.  Values stay strings; callers convert.
"""

from __future__ import annotations

import os


class ConfigError(ValueError):
    """Malformed key/value file or missing required key."""


def read_kv(path: str | os.PathLike) -> tuple[dict[str, str], list[tuple[str, str]]]:
    """Parse a key/value file.

    Returns ``(mapping, pairs)`` where ``mapping`` keeps the last value
    of each key and ``pairs`` preserves every line in order (needed for
    repeated keys such as ``entry``).
    """
    mapping: dict[str, str] = {}
    pairs: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            mapping[key] = value
            pairs.append((key, value))
    return mapping, pairs


def write_kv(path: str | os.PathLike, pairs: list[tuple[str, str]], header: str = "") -> None:
    """Write key/value pairs in the given order. Deterministic output."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for key, value in pairs:
            fh.write(f"{key} = {value}\n")


def parse_bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")
