"""Plain-text key=value configuration files and config digests.

One flat file drives every command; keys use dotted sections
(``env.extent_x = 128``). Values are parsed as int, float, bool or string.
Digests are SHA-256 over the sorted canonical ``key=value`` lines, so any
parameter that affects outputs changes the digest and nothing else does.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Unknown, missing or malformed configuration key."""


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(val)
    return out


def load_kv_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_text(f.read())


def kv_lines(mapping: dict) -> str:
    return "\n".join(f"{k}={format_value(mapping[k])}" for k in sorted(mapping)) + "\n"


def kv_digest(mapping: dict) -> str:
    """SHA-256 hex digest of the canonical key=value serialization."""
    return hashlib.sha256(kv_lines(mapping).encode("utf-8")).hexdigest()
