"""Regex-based extraction of triplets and attribute constraints from LLM-written Cypher.

Only a small, flat subset is understood: ``MATCH`` path patterns with inline
property maps, ``WHERE`` conjunctions of ``sym.attr <op> literal`` and a
``RETURN`` naming the target variable. Everything else is reported in
``CypherExtraction.dropped`` instead of raising, so any text parses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from ._labels import attr_key, resolve_label

SEARCH_ATTRS = ("name", "title")


class ParseMode(str, Enum):
    STRICT_NODES = "strict_nodes"
    STRICT_EDGES = "strict_edges"
    STRICT_BOTH = "strict_both"
    LENIENT = "lenient"

    @property
    def strict_nodes(self) -> bool:
        return self in (ParseMode.STRICT_NODES, ParseMode.STRICT_BOTH)

    @property
    def strict_edges(self) -> bool:
        return self in (ParseMode.STRICT_EDGES, ParseMode.STRICT_BOTH)


OPS = ("eq", "lt", "le", "gt", "ge", "contains")
_OP_MAP = {"=": "eq", "==": "eq", "<": "lt", "<=": "le", ">": "gt", ">=": "ge", "contains": "contains"}


@dataclass(frozen=True)
class AttributeFilter:
    attr: str
    op: str
    value: str | int | float

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise ValueError(f"unsupported filter op {self.op!r}")

    def __str__(self) -> str:
        return f"{self.attr} {self.op} {self.value!r}"


@dataclass
class SymbolSpec:
    id: str
    node_type: str | None = None
    label: str | None = None  # label as written in the query
    search_parts: list[str] = field(default_factory=list)
    filters: list[AttributeFilter] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "constant" if self.search_parts else "variable"

    @property
    def search_string(self) -> str | None:
        return "; ".join(self.search_parts) if self.search_parts else None

    def to_dict(self) -> dict:
        return {"id": self.id, "node_type": self.node_type, "kind": self.kind, "search_string": self.search_string,
                "filters": [{"attr": f.attr, "op": f.op, "value": f.value} for f in self.filters]}


@dataclass(frozen=True)
class Triplet:
    head: str
    edge_type: str | None  # None: any edge type
    tail: str


@dataclass
class CypherExtraction:
    target_symbol: str | None = None
    target_type: str | None = None
    triplets: list[Triplet] = field(default_factory=list)
    symbols: dict[str, SymbolSpec] = field(default_factory=dict)
    dropped: list[tuple[str, str]] = field(default_factory=list)
    empty: bool = True

    def to_dict(self) -> dict:
        return {
            "target_symbol": self.target_symbol,
            "target_type": self.target_type,
            "triplets": [[t.head, t.edge_type, t.tail] for t in self.triplets],
            "symbols": {k: s.to_dict() for k, s in sorted(self.symbols.items())},
            "dropped": [list(d) for d in self.dropped],
            "empty": self.empty,
        }


class UnsupportedPattern(ValueError):
    def __init__(self, fragment: str, reason: str):
        super().__init__(f"{reason}: {fragment}")
        self.fragment = fragment
        self.reason = reason


# ---------------------------------------------------------------- lexing
_QUOTES = str.maketrans({"‘": "'", "’": "'", "“": '"', "”": '"'})
_STRING_RE = re.compile(r"'(?:[^'\\]|\\.)*'|\"(?:[^\"\\]|\\.)*\"")
_MASK_RE = re.compile(r"\x00(\d+)\x00")
_FENCE_RE = re.compile(r"```[a-zA-Z]*")
_COMMENT_RE = re.compile(r"//[^\n]*")
_CLAUSE_RE = re.compile(
    r"\b(OPTIONAL\s+MATCH|MATCH|WHERE|RETURN|WITH|ORDER\s+BY|LIMIT|SKIP|UNION(?:\s+ALL)?|UNWIND|CALL|CREATE|MERGE|"
    r"DELETE|DETACH\s+DELETE|SET|REMOVE|FOREACH)\b",
    re.IGNORECASE,
)
_LABEL = r"(?:`[^`]*`|[\w/.\-]+)"
_NODE_RE = re.compile(
    r"\(\s*(?P<var>[A-Za-z_]\w*)?\s*(?P<labels>(?::\s*" + _LABEL + r"\s*)*)(?P<props>\{[^{}]*\})?\s*\)"
)
_REL_RE = re.compile(r"(?P<left><)?\s*-\s*\[(?P<body>[^\]]*)\]\s*-\s*(?P<right>>)?")
_BARE_REL_RE = re.compile(r"(?P<left><)?--(?P<right>>)?")
_IDENT_RE = re.compile(r"[A-Za-z_]\w*")
_REL_BODY_RE = re.compile(
    r"^\s*(?P<var>[A-Za-z_]\w*)?\s*(?::\s*(?P<types>[^*{]+?))?\s*(?P<star>\*[\d.\s]*)?\s*(?P<props>\{.*\})?\s*$",
    re.DOTALL,
)
_NUMBER_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$")
_COND_RE = re.compile(
    r"^(?P<sym>[A-Za-z_]\w*)\s*\.\s*(?P<attr>`[^`]+`|[A-Za-z_]\w*)\s*"
    r"(?P<op>==|<=|>=|=~|<>|!=|=|<|>|CONTAINS\b|STARTS\s+WITH\b|ENDS\s+WITH\b|IN\b)\s*(?P<val>.+)$",
    re.IGNORECASE | re.DOTALL,
)


class _Masked:
    """String literals swapped for placeholders so keywords inside them are inert."""

    def __init__(self, text: str):
        self.literals: list[str] = []

        def repl(m: re.Match) -> str:
            self.literals.append(m.group(0))
            return f"\x00{len(self.literals) - 1}\x00"

        self.text = _STRING_RE.sub(repl, text)

    def unmask(self, fragment: str) -> str:
        return _MASK_RE.sub(lambda m: self.literals[int(m.group(1))], fragment)

    def literal(self, fragment: str) -> str | int | float | None:
        """Decode a single literal, or None if ``fragment`` is not one."""
        fragment = fragment.strip()
        m = _MASK_RE.fullmatch(fragment)
        if m:
            raw = self.literals[int(m.group(1))][1:-1]
            return re.sub(r"\\(.)", r"\1", raw)
        if _NUMBER_RE.match(fragment):
            num = float(fragment)
            return int(num) if num.is_integer() and re.fullmatch(r"[+-]?\d+", fragment) else num
        return None


def _split_top(text: str, sep: re.Pattern) -> list[str]:
    """Split on ``sep`` outside parentheses/brackets."""
    parts, depth, start, i = [], 0, 0, 0
    while i < len(text):
        ch = text[i]
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth = max(0, depth - 1)
        elif depth == 0:
            m = sep.match(text, i)
            if m and m.end() > i:
                parts.append(text[start:i])
                start = i = m.end()
                continue
        i += 1
    parts.append(text[start:])
    return parts


_AND_RE = re.compile(r"(?<![\w.])AND\b", re.IGNORECASE)
_COMMA_RE = re.compile(r",")
_OR_RE = re.compile(r"\b(?:OR|XOR)\b", re.IGNORECASE)
_NOT_RE = re.compile(r"\bNOT\b|<>|!=", re.IGNORECASE)


def _strip_parens(text: str) -> str:
    """Remove parentheses wrapping the whole of ``text``."""
    text = text.strip()
    while text.startswith("(") and text.endswith(")"):
        depth = 0
        for i, ch in enumerate(text):
            depth += ch == "("
            depth -= ch == ")"
            if depth == 0 and i < len(text) - 1:
                return text
        text = text[1:-1].strip()
    return text


# ---------------------------------------------------------------- parser
class _Parser:
    def __init__(self, text: str, node_types: Iterable[str], edge_types: Iterable[str], mode: ParseMode):
        self.node_types = frozenset(node_types)
        self.edge_types = frozenset(edge_types)
        self.mode = mode
        self.out = CypherExtraction()
        self._anon = 0
        # NUL is reserved for literal placeholders
        clean = _FENCE_RE.sub(" ", text.replace("\x00", " ").translate(_QUOTES))
        self.m = _Masked(clean)
        self.m.text = _COMMENT_RE.sub("", self.m.text)
        self.matched_nodes = 0

    def drop(self, fragment: str, reason: str) -> None:
        fragment = " ".join(self.m.unmask(fragment).split())
        self.out.dropped.append((fragment, reason))

    # ---- symbols
    def symbol(self, var: str | None) -> SymbolSpec:
        if var is None:
            self._anon += 1
            var = f"_anon{self._anon}"
        spec = self.out.symbols.get(var)
        if spec is None:
            spec = self.out.symbols[var] = SymbolSpec(var)
        return spec

    def set_label(self, spec: SymbolSpec, label: str) -> None:
        label = label.strip().strip("`").strip()
        if not label:
            return
        if spec.label is not None:
            if spec.label != label:
                self.drop(f"{spec.id}:{label}", "label_conflict")
            return
        resolved = resolve_label(label, self.node_types)
        if resolved is None and self.mode.strict_nodes:
            self.drop(f"{spec.id}:{label}", "label")
            return
        spec.label = label
        spec.node_type = resolved if resolved is not None else label

    def add_property(self, spec: SymbolSpec, key: str, op: str, value, fragment: str) -> None:
        attr = attr_key(key.strip("`"))
        if attr in SEARCH_ATTRS:
            if op in ("eq", "contains") and isinstance(value, str) and value.strip():
                if value.strip() not in spec.search_parts:
                    spec.search_parts.append(value.strip())
            else:
                self.drop(fragment, "unsupported")
            return
        spec.filters.append(AttributeFilter(attr, op, value))

    # ---- MATCH
    def parse_props(self, spec: SymbolSpec, props: str) -> None:
        body = props.strip()[1:-1]
        if not body.strip():
            return
        for item in _split_top(body, _COMMA_RE):
            if not item.strip():
                continue
            key, sep, raw = item.partition(":")
            value = self.m.literal(raw) if sep else None
            if not sep or value is None or not key.strip():
                self.drop(f"{spec.id} {{{item.strip()}}}", "unsupported")
                continue
            self.add_property(spec, key.strip(), "eq", value, f"{spec.id} {{{item.strip()}}}")

    def node_from_match(self, mt: re.Match) -> SymbolSpec:
        spec = self.symbol(mt.group("var"))
        labels = [lab for lab in re.split(r"\s*:\s*", mt.group("labels") or "") if lab.strip()]
        if labels:
            self.set_label(spec, labels[0])
            for extra in labels[1:]:
                self.drop(f"{spec.id}:{extra}", "extra_label")
        if mt.group("props"):
            self.parse_props(spec, mt.group("props"))
        return spec

    def relationship(self, body: str | None, left: bool, right: bool, fragment: str):
        """Return (edge_type, reversed) or None when the relationship is dropped."""
        if left == right:
            self.drop(fragment, "undirected" if not left else "bidirectional")
            return None
        etype = None
        if body is not None:
            mb = _REL_BODY_RE.match(body)
            if mb is None:
                self.drop(fragment, "unsupported")
                return None
            if mb.group("star"):
                self.drop(fragment, "variable_length")
                return None
            if mb.group("props"):
                self.drop(fragment, "unsupported")
                return None
            types = mb.group("types")
            if types:
                if "|" in types:
                    self.drop(fragment, "or")
                    return None
                etype = types.strip().strip("`").strip().lstrip(":").strip()
        if etype is None:
            if self.mode.strict_edges:
                self.drop(fragment, "edge_label")
                return None
        else:
            resolved = resolve_label(etype, self.edge_types)
            if resolved is None and self.mode.strict_edges:
                self.drop(fragment, "edge_label")
                return None
            etype = resolved if resolved is not None else etype
        return etype, left

    def parse_match(self, body: str) -> None:
        text = body
        pos = 0
        prev: SymbolSpec | None = None
        pending = None  # (edge_type, reversed, fragment) or "dropped"
        while pos < len(text):
            ws = re.compile(r"\s+").match(text, pos)
            if ws:
                pos = ws.end()
                continue
            if text[pos] == ",":
                if pending is not None:
                    self.drop(text[max(0, pos - 40):pos], "syntax")
                prev, pending = None, None
                pos += 1
                continue
            mt = _NODE_RE.match(text, pos)
            if mt:
                spec = self.node_from_match(mt)
                self.matched_nodes += 1
                self.link(prev, pending, spec)
                prev, pending = spec, None
                pos = mt.end()
                continue
            mr = _REL_RE.match(text, pos) or _BARE_REL_RE.match(text, pos)
            if mr:
                frag = mr.group(0)
                if prev is None or pending is not None:
                    self.drop(frag, "syntax")
                    pending = "dropped"
                else:
                    body_txt = mr.groupdict().get("body")
                    rel = self.relationship(body_txt, bool(mr.group("left")), bool(mr.group("right")),
                                            f"({prev.id}){frag}")
                    pending = rel if rel is not None else "dropped"
                pos = mr.end()
                continue
            mi = _IDENT_RE.match(text, pos)
            if mi:
                after = text[mi.end():].lstrip()
                if after.startswith("="):  # path variable: p = (a)-...
                    self.drop(mi.group(0) + " =", "unsupported")
                    pos = text.index("=", mi.end()) + 1
                    prev, pending = None, None
                    continue
                spec = self.symbol(mi.group(0))
                self.matched_nodes += 1
                self.link(prev, pending, spec)
                prev, pending = spec, None
                pos = mi.end()
                continue
            # unknown character run
            end = pos + 1
            while end < len(text) and not text[end].isspace() and text[end] not in "(,-<":
                end += 1
            self.drop(text[pos:end], "syntax")
            prev, pending = None, None
            pos = end
        if pending not in (None, "dropped"):
            self.drop(f"{prev.id if prev else ''} dangling relationship", "syntax")

    def link(self, prev: SymbolSpec | None, pending, spec: SymbolSpec) -> None:
        if prev is None or pending is None or pending == "dropped":
            return
        etype, reverse = pending
        head, tail = (spec, prev) if reverse else (prev, spec)
        trip = Triplet(head.id, etype, tail.id)
        if trip not in self.out.triplets:
            self.out.triplets.append(trip)

    # ---- WHERE
    def parse_where(self, body: str) -> None:
        for conj in _split_top(body, _AND_RE):
            raw = conj.strip()
            if not raw:
                self.drop("AND", "syntax")
                continue
            cond = _strip_parens(raw)
            if _OR_RE.search(cond):
                self.drop(raw, "or")
                continue
            if _NOT_RE.search(cond):
                self.drop(raw, "negation")
                continue
            mc = _COND_RE.match(cond)
            if mc is None:
                self.drop(raw, "unsupported")
                continue
            op_txt = " ".join(mc.group("op").lower().split())
            op = _OP_MAP.get(op_txt)
            value = self.m.literal(mc.group("val"))
            if op is None or value is None or (op == "contains" and not isinstance(value, str)):
                self.drop(raw, "unsupported")
                continue
            spec = self.symbol(mc.group("sym"))
            self.add_property(spec, mc.group("attr"), op, value, raw)

    # ---- RETURN
    def parse_return(self, body: str) -> None:
        body = re.sub(r"^\s*DISTINCT\b", "", body, flags=re.IGNORECASE)
        items = [i.strip() for i in _split_top(body, _COMMA_RE) if i.strip()]
        targets = []
        for item in items:
            expr = re.sub(r"\s+AS\s+\w+\s*$", "", item, flags=re.IGNORECASE).strip()
            mv = re.fullmatch(r"([A-Za-z_]\w*)(?:\s*\.\s*(?:`[^`]+`|\w+))?", expr)
            if mv is None:
                mf = re.fullmatch(r"\w+\s*\(\s*(?:DISTINCT\s+)?([A-Za-z_]\w*)(?:\s*\.\s*\w+)?\s*\)", expr,
                                  re.IGNORECASE)
                if mf is None:
                    self.drop(item, "unsupported")
                    continue
                self.drop(item, "function")
                mv = mf
            targets.append((mv.group(1), item))
        if not targets:
            return
        if self.out.target_symbol is not None:
            self.drop("RETURN " + body.strip(), "multi_return")
            return
        first, _ = targets[0]
        self.symbol(first)
        self.out.target_symbol = first
        for sym, item in targets[1:]:
            if sym != first:
                self.drop(item, "multi_return")

    # ---- driver
    def run(self) -> CypherExtraction:
        text = self.m.text
        clauses = list(_CLAUSE_RE.finditer(text))
        preamble = text[: clauses[0].start() if clauses else len(text)]
        if preamble.strip():
            self.drop(preamble, "text")
        for i, mc in enumerate(clauses):
            kw = " ".join(mc.group(1).upper().split())
            body = text[mc.end(): clauses[i + 1].start() if i + 1 < len(clauses) else len(text)]
            body = body.strip().rstrip(";").strip()
            if kw == "MATCH":
                self.parse_match(body)
            elif kw == "WHERE":
                self.parse_where(body)
            elif kw == "RETURN":
                self.parse_return(body)
            else:
                self.drop(f"{kw} {body}", "clause")
        out = self.out
        if out.target_symbol is not None:
            out.target_type = out.symbols[out.target_symbol].node_type
        out.empty = out.target_symbol is None or not self.matched_nodes
        return out


def parse_cypher(text: str, node_types: Iterable[str] = (), edge_types: Iterable[str] = (),
                 mode: ParseMode | str = ParseMode.STRICT_NODES) -> CypherExtraction:
    """Parse LLM-written Cypher into target, triplets and per-symbol constraints.

    Never raises on malformed input; unsupported fragments are listed in
    ``dropped`` as ``(fragment, reason)`` and ``empty`` is set when no usable
    MATCH/RETURN pair was found.
    """
    return _Parser(text, node_types, edge_types, ParseMode(mode)).run()


def normalize_direction(fragment: str) -> Triplet:
    """Turn a single-relationship pattern into a head -> tail triplet.

    ``(i)<-[:employed_at]-(a)`` becomes ``Triplet("a", "employed_at", "i")``.
    Raises :class:`UnsupportedPattern` for undirected or malformed patterns.
    """
    parser = _Parser(fragment, (), (), ParseMode.LENIENT)
    parser.parse_match(parser.m.text)
    if len(parser.out.triplets) != 1:
        reason = parser.out.dropped[0][1] if parser.out.dropped else "syntax"
        raise UnsupportedPattern(fragment, reason)
    return parser.out.triplets[0]
