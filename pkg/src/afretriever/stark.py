"""Best-effort converter from STaRK-style JSON exports to nodes.jsonl / edges.jsonl.

Expected files in the export directory::

    node_info.json       {"<id>": {field: value, ...}, ...}
    node_types.json      [type_id per node id]
    node_type_dict.json  {"<type_id>": "type name"}
    edge_index.json      [[heads...], [tails...]]
    edge_types.json      [type_id per edge]
    edge_type_dict.json  {"<type_id>": "edge name"}
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .skb import Edge, Node, Skb, SkbError

logger = logging.getLogger(__name__)

# free-text fields that belong in the document rather than the attributes
DOCUMENT_FIELDS = ("abstract", "details", "description", "summary", "text", "document")
REQUIRED = ("node_info", "node_types", "node_type_dict", "edge_index", "edge_types", "edge_type_dict")


def _load(directory: Path, name: str):
    path = directory / f"{name}.json"
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SkbError(f"{path}: missing export file") from None
    except json.JSONDecodeError as exc:
        raise SkbError(f"{path}: invalid JSON ({exc.msg})") from None


def _node(node_id: int, node_type: str, info: dict) -> Node:
    attrs: dict = {}
    doc_parts = []
    for key in sorted(info):
        value = info[key]
        if value is None or key == "type":
            continue
        if key in DOCUMENT_FIELDS and isinstance(value, str):
            doc_parts.append(value)
        elif isinstance(value, (str, int, float)) and not isinstance(value, bool):
            if key in ("name", "title") and not isinstance(value, str):
                value = str(value)
            attrs[key] = value
        else:
            doc_parts.append(f"{key}: {json.dumps(value, ensure_ascii=False, sort_keys=True)}")
    return Node(node_id, node_type, attrs, "\n".join(doc_parts) or None)


def convert_stark(directory: str | Path) -> Skb:
    directory = Path(directory)
    data = {name: _load(directory, name) for name in REQUIRED}
    type_names = {int(k): v for k, v in data["node_type_dict"].items()}
    edge_names = {int(k): v for k, v in data["edge_type_dict"].items()}
    node_types = data["node_types"]
    nodes = []
    for key, info in data["node_info"].items():
        node_id = int(key)
        if node_id >= len(node_types):
            raise SkbError(f"node {node_id} has no entry in node_types")
        nodes.append(_node(node_id, type_names[int(node_types[node_id])], info if isinstance(info, dict) else {}))
    heads, tails = data["edge_index"]
    etypes = data["edge_types"]
    if not len(heads) == len(tails) == len(etypes):
        raise SkbError("edge_index and edge_types lengths differ")
    known = {n.id for n in nodes}
    edges, skipped = [], 0
    for h, t, e in zip(heads, tails, etypes):
        if int(h) in known and int(t) in known:
            edges.append(Edge(int(h), edge_names[int(e)], int(t)))
        else:
            skipped += 1
    if skipped:
        logger.warning("skipped %d edges with endpoints outside node_info", skipped)
    return Skb(nodes, edges)
