"""Label and attribute-name normalisation shared by the parser and the LLM steps."""

from __future__ import annotations

import re
from typing import Iterable

_SEP_RE = re.compile(r"[\s_]+")


def label_key(label: str) -> str:
    """Case-insensitive key treating spaces and underscores as equivalent."""
    return _SEP_RE.sub(" ", label.strip()).lower()


def resolve_label(label: str, known: Iterable[str]) -> str | None:
    """Map ``label`` onto its spelling in ``known``, or None if absent or ambiguous."""
    key = label_key(label)
    hits = {k for k in known if label_key(k) == key}
    return hits.pop() if len(hits) == 1 else None


def attr_key(name: str) -> str:
    return _SEP_RE.sub("_", name.strip()).lower()
