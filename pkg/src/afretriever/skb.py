"""Semi-structured knowledge base: a typed, directed property graph with documents."""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

INCOMING = "+"
OUTGOING = "-"
_DIRECTIONS = {INCOMING, OUTGOING, "−"}  # accept the typographic minus too

DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


class SkbError(ValueError):
    """Raised for malformed or inconsistent knowledge-base data."""


class Cardinality(str, Enum):
    ONE_TO_ONE = "one-to-one"
    MANY_TO_ONE = "many-to-one"
    ONE_TO_MANY = "one-to-many"
    MANY_TO_MANY = "many-to-many"

    def flipped(self) -> "Cardinality":
        if self is Cardinality.MANY_TO_ONE:
            return Cardinality.ONE_TO_MANY
        if self is Cardinality.ONE_TO_MANY:
            return Cardinality.MANY_TO_ONE
        return self

    @property
    def functional(self) -> bool:
        """True when every head has at most one tail."""
        return self in (Cardinality.ONE_TO_ONE, Cardinality.MANY_TO_ONE)


@dataclass(frozen=True)
class Node:
    id: int
    node_type: str
    attributes: Mapping[str, object] = field(default_factory=dict)
    document: str | None = None

    @property
    def label(self) -> str:
        """Display name: the name or title attribute, else the id."""
        for key in ("name", "title"):
            value = self.attributes.get(key)
            if value:
                return str(value)
        return str(self.id)


@dataclass(frozen=True, order=True)
class Edge:
    head: int
    edge_type: str
    tail: int


class Skb:
    """Immutable typed property graph with directional adjacency indexes.

    Build one with :func:`load_skb` or directly from iterables of
    :class:`Node` and :class:`Edge`.
    """

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge]):
        node_map: dict[int, Node] = {}
        for node in nodes:
            _check_node(node)
            if node.id in node_map:
                raise SkbError(f"duplicate node id {node.id}")
            node_map[node.id] = node
        self._nodes = node_map

        by_type: dict[str, set[int]] = defaultdict(set)
        attrs_by_type: dict[str, set[str]] = defaultdict(set)
        for node in node_map.values():
            by_type[node.node_type].add(node.id)
            attrs_by_type[node.node_type].update(node.attributes)
        self._by_type = {t: frozenset(ids) for t, ids in by_type.items()}
        self._attrs_by_type = {t: frozenset(a) for t, a in attrs_by_type.items()}
        self._all_ids = frozenset(node_map)

        out_index: dict[tuple[int, str], set[int]] = defaultdict(set)
        in_index: dict[tuple[int, str], set[int]] = defaultdict(set)
        out_any: dict[int, set[int]] = defaultdict(set)
        in_any: dict[int, set[int]] = defaultdict(set)
        pairs: dict[str, set[tuple[int, int]]] = defaultdict(set)
        for edge in edges:
            for end in (edge.head, edge.tail):
                if end not in node_map:
                    raise SkbError(f"edge {edge.head} -[{edge.edge_type}]-> {edge.tail} references unknown node id {end}")
            if not edge.edge_type:
                raise SkbError("edge type must be non-empty")
            pairs[edge.edge_type].add((edge.head, edge.tail))
            out_index[(edge.head, edge.edge_type)].add(edge.tail)
            in_index[(edge.tail, edge.edge_type)].add(edge.head)
            out_any[edge.head].add(edge.tail)
            in_any[edge.tail].add(edge.head)

        self._out = {k: frozenset(v) for k, v in out_index.items()}
        self._in = {k: frozenset(v) for k, v in in_index.items()}
        self._out_any = {k: frozenset(v) for k, v in out_any.items()}
        self._in_any = {k: frozenset(v) for k, v in in_any.items()}
        self._pairs = {e: tuple(sorted(p)) for e, p in pairs.items()}
        self._cardinality = {e: _classify(p) for e, p in self._pairs.items()}
        # per node: sorted (edge_type, neighbor) lists, used when rendering
        self._out_by_node: dict[int, list[tuple[str, int]]] = defaultdict(list)
        self._in_by_node: dict[int, list[tuple[str, int]]] = defaultdict(list)
        for (head, etype), tails in self._out.items():
            self._out_by_node[head].extend((etype, t) for t in tails)
        for (tail, etype), heads in self._in.items():
            self._in_by_node[tail].extend((etype, h) for h in heads)
        for lists in (self._out_by_node, self._in_by_node):
            for rel in lists.values():
                rel.sort()

    # ------------------------------------------------------------------ basic
    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def __repr__(self) -> str:
        return f"Skb(|V|={len(self._nodes)}, |E|={self.n_edges}, types={sorted(self.node_types)})"

    @property
    def n_edges(self) -> int:
        return sum(len(p) for p in self._pairs.values())

    @property
    def node_types(self) -> frozenset[str]:
        return frozenset(self._by_type)

    @property
    def edge_types(self) -> frozenset[str]:
        return frozenset(self._pairs)

    @property
    def node_ids(self) -> frozenset[int]:
        return self._all_ids

    def node(self, node_id: int) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise SkbError(f"unknown node id {node_id}") from None

    def nodes(self) -> Iterable[Node]:
        return (self._nodes[i] for i in sorted(self._nodes))

    def edges(self) -> Iterable[Edge]:
        for etype in sorted(self._pairs):
            for head, tail in self._pairs[etype]:
                yield Edge(head, etype, tail)

    def edge_pairs(self, edge_type: str | None) -> tuple[tuple[int, int], ...]:
        """All (head, tail) pairs of one edge type, or of every type when None."""
        if edge_type is not None:
            return self._pairs.get(edge_type, ())
        return tuple(sorted({p for ps in self._pairs.values() for p in ps}))

    # ------------------------------------------------------------- traversal
    def neighbors(self, v: int, edge_type: str | None, direction: str) -> frozenset[int]:
        """Nodes adjacent to ``v`` over ``edge_type``.

        Direction ``"+"`` returns heads of edges pointing at ``v``; ``"-"``
        returns tails of edges leaving ``v``. An unknown edge type yields the
        empty set. ``edge_type=None`` matches every edge type.
        """
        if v not in self._nodes:
            raise SkbError(f"unknown node id {v}")
        if direction not in _DIRECTIONS:
            raise ValueError(f"direction must be '+' or '-', got {direction!r}")
        incoming = direction == INCOMING
        if edge_type is None:
            index = self._in_any if incoming else self._out_any
            return index.get(v, frozenset())
        index = self._in if incoming else self._out
        return index.get((v, edge_type), frozenset())

    def relations(self, v: int) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
        """Sorted (edge_type, neighbor) lists of outgoing and incoming edges."""
        return self._out_by_node.get(v, []), self._in_by_node.get(v, [])

    def nodes_of_type(self, node_type: str | None) -> frozenset[int]:
        """Ids of all nodes of ``node_type``; every node when ``node_type`` is None.

        The returned frozenset is the shared index entry, so membership tests
        and intersections cost nothing extra.
        """
        if node_type is None:
            return self._all_ids
        return self._by_type.get(node_type, frozenset())

    def attribute_names(self, node_type: str | None = None) -> frozenset[str]:
        if node_type is None:
            return frozenset().union(*self._attrs_by_type.values()) if self._attrs_by_type else frozenset()
        return self._attrs_by_type.get(node_type, frozenset())

    def edge_type_cardinality(self, edge_type: str) -> Cardinality:
        try:
            return self._cardinality[edge_type]
        except KeyError:
            raise SkbError(f"unknown edge type {edge_type!r}") from None

    def edge_endpoint_types(self, edge_type: str) -> tuple[frozenset[str], frozenset[str]]:
        """Node types seen at the head and tail of ``edge_type``."""
        pairs = self._pairs.get(edge_type, ())
        heads = frozenset(self._nodes[h].node_type for h, _ in pairs)
        tails = frozenset(self._nodes[t].node_type for _, t in pairs)
        return heads, tails


def _check_node(node: Node) -> None:
    if not isinstance(node.id, int) or isinstance(node.id, bool) or node.id < 0:
        raise SkbError(f"node id must be a non-negative integer, got {node.id!r}")
    if not node.node_type:
        raise SkbError(f"node {node.id} has an empty type")
    for key in ("name", "title"):
        if key in node.attributes and not isinstance(node.attributes[key], str):
            raise SkbError(f"node {node.id}: attribute {key!r} must be a string")


def _classify(pairs: Iterable[tuple[int, int]]) -> Cardinality:
    out_deg: dict[int, int] = defaultdict(int)
    in_deg: dict[int, int] = defaultdict(int)
    for head, tail in pairs:
        out_deg[head] += 1
        in_deg[tail] += 1
    many_tails = max(out_deg.values(), default=0) > 1
    many_heads = max(in_deg.values(), default=0) > 1
    if many_heads and many_tails:
        return Cardinality.MANY_TO_MANY
    if many_heads:
        return Cardinality.MANY_TO_ONE
    if many_tails:
        return Cardinality.ONE_TO_MANY
    return Cardinality.ONE_TO_ONE


# ----------------------------------------------------------------- loading
def _parse_value(key: str, value: object, where: str) -> object:
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise SkbError(f"{where}: attribute {key!r} must be a string or number")
    return value


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SkbError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise SkbError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def read_nodes(path: str | Path) -> list[Node]:
    path = Path(path)
    nodes = []
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        node_id = rec.get("id")
        node_type = rec.get("type")
        attributes = rec.get("attributes", {})
        document = rec.get("document")
        if not isinstance(node_id, int) or isinstance(node_id, bool) or node_id < 0:
            raise SkbError(f"{where}: 'id' must be a non-negative integer")
        if not isinstance(node_type, str) or not node_type:
            raise SkbError(f"{where}: 'type' must be a non-empty string")
        if not isinstance(attributes, dict):
            raise SkbError(f"{where}: 'attributes' must be an object")
        if document is not None and not isinstance(document, str):
            raise SkbError(f"{where}: 'document' must be a string or null")
        attrs = {k: _parse_value(k, v, where) for k, v in attributes.items()}
        nodes.append(Node(node_id, node_type, attrs, document))
    return nodes


def read_edges(path: str | Path) -> list[Edge]:
    path = Path(path)
    edges = []
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        head, etype, tail = rec.get("head"), rec.get("type"), rec.get("tail")
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in (head, tail)):
            raise SkbError(f"{where}: 'head' and 'tail' must be integers")
        if not isinstance(etype, str) or not etype:
            raise SkbError(f"{where}: 'type' must be a non-empty string")
        edges.append(Edge(head, etype, tail))
    return edges


def load_skb(nodes_path: str | Path, edges_path: str | Path) -> Skb:
    """Load nodes.jsonl / edges.jsonl into an :class:`Skb`."""
    nodes = read_nodes(nodes_path)
    edges = read_edges(edges_path)
    skb = Skb(nodes, edges)
    logger.info("loaded %r", skb)
    return skb


def load_skb_dir(directory: str | Path) -> Skb:
    directory = Path(directory)
    return load_skb(directory / "nodes.jsonl", directory / "edges.jsonl")


def write_skb(skb: Skb, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.jsonl", "w", encoding="utf-8") as fh:
        for node in skb.nodes():
            rec = {"id": node.id, "type": node.node_type, "attributes": dict(node.attributes), "document": node.document}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with open(directory / "edges.jsonl", "w", encoding="utf-8") as fh:
        for edge in skb.edges():
            fh.write(json.dumps({"head": edge.head, "type": edge.edge_type, "tail": edge.tail}) + "\n")


def is_date(value: object) -> bool:
    return isinstance(value, str) and bool(DATE_RE.match(value))
