"""Parsers for the loosely formatted text the models send back."""

from __future__ import annotations

import re

_MARKER_RE = re.compile(r"^(?:\d+\s*[.)]\s*|[-*](?:\s+|$))")
_INT_RE = re.compile(r"\d+")
_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


def parse_list_items(text: str) -> list[str]:
    """Extract list items, one per non-empty line.

    A leading index marker ("1.", "2)", "-", "*") is optional and stripped;
    lines that are only a marker are discarded.
    """
    items = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        match = _MARKER_RE.match(line)
        item = line[match.end():].strip() if match else line
        if item:
            items.append(item)
    return items


def first_int_in_range(text: str, low: int, high: int) -> int | None:
    """First integer within [low, high] appearing anywhere in the text."""
    for match in _INT_RE.finditer(text):
        value = int(match.group())
        if low <= value <= high:
            return value
    return None
