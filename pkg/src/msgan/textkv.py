"""The ``key = value`` text dialect shared by volume headers, checkpoints and configs."""

from __future__ import annotations

from typing import Iterable


class KeyValueError(ValueError):
    pass


def format_kv(items: Iterable[tuple[str, object]]) -> str:
    lines = []
    for key, value in items:
        if "=" in key or "\n" in str(value):
            raise KeyValueError(f"cannot encode key {key!r}")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, allow_duplicates: bool = False) -> dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KeyValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise KeyValueError(f"line {lineno}: empty key")
        if key in out and not allow_duplicates:
            raise KeyValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def split_header(blob: bytes, terminator: bytes = b"data:\n") -> tuple[str, bytes]:
    """Split ``blob`` at the first terminator line; returns (header text, payload)."""
    if blob.startswith(terminator):
        return "", blob[len(terminator):]
    idx = blob.find(b"\n" + terminator)
    if idx < 0:
        raise KeyValueError("missing 'data:' terminator line")
    header = blob[: idx + 1].decode("utf-8")
    return header, blob[idx + 1 + len(terminator):]
