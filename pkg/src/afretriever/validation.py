"""Input coercion shared by the estimator, the batch runner and the CLI."""

from __future__ import annotations

from typing import Iterable, Mapping

from .pipeline import QueryRecord
from .skb import Skb


def check_skb(skb: object) -> Skb:
    if not isinstance(skb, Skb):
        raise TypeError(f"expected an Skb, got {type(skb).__name__}")
    if len(skb) == 0:
        raise ValueError("the SKB has no nodes")
    return skb


def _gold(value: object, where: str) -> frozenset[int] | None:
    if value is None:
        return None
    if isinstance(value, (str, bytes)) or not isinstance(value, Iterable):
        raise ValueError(f"{where}: answer_ids must be a list of integers")
    ids = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"{where}: answer_ids must be integers, got {v!r}")
        ids.append(v)
    if not ids:
        raise ValueError(f"{where}: answer_ids is empty")
    return frozenset(ids)


def check_query(item: object, index: int = 0) -> QueryRecord:
    """Accept a ``QueryRecord``, a bare question string or a ``{"id", "query", "answer_ids"}`` mapping."""
    if isinstance(item, QueryRecord):
        return item
    if isinstance(item, str):
        if not item.strip():
            raise ValueError(f"query {index}: empty question")
        return QueryRecord(str(index), item)
    if isinstance(item, Mapping):
        text = item.get("query", item.get("text"))
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"query {index}: missing or empty 'query'")
        qid = item.get("id", index)
        return QueryRecord(str(qid), text, _gold(item.get("answer_ids", item.get("gold")), f"query {qid}"))
    raise TypeError(f"query {index}: unsupported type {type(item).__name__}")


def check_queries(items: object) -> list[QueryRecord]:
    if isinstance(items, (str, QueryRecord, Mapping)):
        items = [items]
    if not isinstance(items, Iterable):
        raise TypeError("queries must be an iterable")
    out = [check_query(it, i) for i, it in enumerate(items)]
    seen: set[str] = set()
    for q in out:
        if q.id in seen:
            raise ValueError(f"duplicate query id {q.id!r}")
        seen.add(q.id)
    return out
