"""Symbol candidate retrieval, triplet grounding and incremental scope expansion."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .cypherlite import AttributeFilter, CypherExtraction, ParseMode, Triplet
from .embed import EmbeddingProvider, EmbeddingSpace, vss
from .skb import Skb, is_date

logger = logging.getLogger(__name__)

RANKED = "ranked"
MATERIALIZED = "materialized"
UNIVERSE = "universe"

_NUM_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------- filters
def _as_number(value: object) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str) and _NUM_RE.match(value.strip()):
        return float(value)
    return None


def filter_matches(flt: AttributeFilter, value: object) -> bool:
    """Evaluate one hard filter against a node's attribute value.

    Numbers compare numerically, ``YYYY-MM-DD`` dates lexicographically,
    everything else only by case-insensitive equality or substring.
    """
    if value is None:
        return False
    if flt.op == "contains":
        return str(flt.value).casefold() in str(value).casefold()
    a, b = _as_number(value), _as_number(flt.value)
    if a is None or b is None:
        if is_date(value) and is_date(flt.value):
            a, b = value, flt.value  # type: ignore[assignment]
        elif flt.op == "eq":
            return str(value).strip().casefold() == str(flt.value).strip().casefold()
        else:
            return False
    if flt.op == "eq":
        return a == b
    if flt.op == "lt":
        return a < b
    if flt.op == "le":
        return a <= b
    if flt.op == "gt":
        return a > b
    return a >= b


def apply_filters(skb: Skb, nodes: Iterable[int], filters: Iterable[AttributeFilter]) -> frozenset[int]:
    filters = list(filters)
    return frozenset(v for v in nodes
                     if all(filter_matches(f, skb.node(v).attributes.get(f.attr)) for f in filters))


# ---------------------------------------------------------------- candidates
@dataclass(frozen=True)
class CandidateSet:
    """Candidates for one symbol.

    ``ranked`` sets (constants) keep VSS order and are the only kind affected
    by slicing. ``universe`` sets wrap the SKB's own type index without
    copying it.
    """

    kind: str
    members: frozenset[int]
    order: tuple[int, ...] = ()
    scores: tuple[float, ...] = ()
    node_type: str | None = None

    @classmethod
    def ranked(cls, pairs: Iterable[tuple[int, float]]) -> "CandidateSet":
        pairs = list(pairs)
        order = tuple(v for v, _ in pairs)
        if len(set(order)) != len(order):
            raise ValueError("ranked candidates must be unique")
        return cls(RANKED, frozenset(order), order, tuple(s for _, s in pairs))

    @classmethod
    def materialized(cls, nodes: Iterable[int]) -> "CandidateSet":
        return cls(MATERIALIZED, frozenset(nodes))

    @classmethod
    def universe(cls, skb: Skb, node_type: str | None) -> "CandidateSet":
        return cls(UNIVERSE, skb.nodes_of_type(node_type), node_type=node_type)

    def __len__(self) -> int:
        return len(self.members)

    def head(self, n: int) -> "CandidateSet":
        if self.kind != RANKED:
            return self
        return CandidateSet(RANKED, frozenset(self.order[:n]), self.order[:n], self.scores[:n])


@dataclass
class CandidateTable:
    entries: dict[str, CandidateSet] = field(default_factory=dict)
    search_strings: dict[str, str] = field(default_factory=dict)
    notes: list[tuple[str, str]] = field(default_factory=list)

    def __getitem__(self, symbol: str) -> CandidateSet:
        return self.entries[symbol]

    def __contains__(self, symbol: object) -> bool:
        return symbol in self.entries

    def sliced(self, n: int) -> "CandidateTable":
        return CandidateTable({s: c.head(n) for s, c in self.entries.items()}, dict(self.search_strings),
                              list(self.notes))


def retrieve_symbol_candidates(extraction: CypherExtraction, skb: Skb, space: EmbeddingSpace,
                               provider: EmbeddingProvider, l_max: int,
                               mode: ParseMode | str = ParseMode.STRICT_NODES) -> CandidateTable:
    """Build per-symbol candidate sets.

    Constants are hard-filtered, then ranked by cosine to their search string
    and cut to ``l_max``. Variables with filters become materialized sets;
    unconstrained variables stay typed universes. A constant's filter that
    cannot be applied (unknown attribute, or no node has the value) moves into
    its search string instead; variables ignore filters on unknown attributes.
    """
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    mode = ParseMode(mode)
    table = CandidateTable()
    for sym, spec in extraction.symbols.items():
        node_type = spec.node_type if mode.strict_nodes else None
        base = skb.nodes_of_type(node_type)
        known_attrs = skb.attribute_names(node_type)
        search_parts = list(spec.search_parts)
        constant = bool(search_parts)
        survivors = base
        applied = 0
        for flt in spec.filters:
            if flt.attr not in known_attrs:
                if constant:
                    search_parts.append(f"{flt.attr} {flt.value}")
                    table.notes.append((sym, f"unknown attribute {flt.attr!r} moved to search string"))
                else:
                    table.notes.append((sym, f"unknown attribute {flt.attr!r} ignored"))
                continue
            narrowed = apply_filters(skb, survivors, [flt])
            if constant and not narrowed:
                search_parts.append(f"{flt.attr} {flt.value}")
                table.notes.append((sym, f"no node satisfies {flt}; moved to search string"))
                continue
            survivors = narrowed
            applied += 1
        if constant:
            query = "; ".join(search_parts[:len(spec.search_parts)])
            if len(search_parts) > len(spec.search_parts):
                query = " ".join([query, *search_parts[len(spec.search_parts):]])
            table.search_strings[sym] = query
            table.entries[sym] = CandidateSet.ranked(vss(query, survivors, l_max, space, provider, skb=skb))
        elif applied:
            table.entries[sym] = CandidateSet.materialized(survivors)
        else:
            table.entries[sym] = CandidateSet.universe(skb, node_type)
    return table


# ---------------------------------------------------------------- grounding
def _edge_type_for(triplet: Triplet, skb: Skb, mode: ParseMode) -> str | None:
    etype = triplet.edge_type
    if etype is not None and etype not in skb.edge_types and not mode.strict_edges:
        return None  # advisory label: any edge type
    return etype


def _image(skb: Skb, sources: frozenset[int], etype: str | None, direction: str) -> frozenset[int]:
    """Union of neighbors of ``sources``; scans the edge list when that is cheaper."""
    if etype is not None and etype not in skb.edge_types:
        return frozenset()
    pairs = skb.edge_pairs(etype) if len(sources) > 64 else None
    if pairs is not None and len(sources) > len(pairs):
        if direction == "-":
            return frozenset(t for h, t in pairs if h in sources)
        return frozenset(h for h, t in pairs if t in sources)
    out: set[int] = set()
    for v in sources:
        out.update(skb.neighbors(v, etype, direction))
    return frozenset(out)


def propagate(triplets: Iterable[Triplet], sets: Mapping[str, frozenset[int]], skb: Skb,
              mode: ParseMode | str = ParseMode.STRICT_NODES) -> tuple[dict[str, frozenset[int]], int]:
    """Run the arc-consistency fixpoint; returns the reduced sets and the pass count."""
    mode = ParseMode(mode)
    triplets = list(triplets)
    state = dict(sets)
    resolved = [(t, _edge_type_for(t, skb, mode)) for t in triplets]
    passes = 0
    changed = True
    while changed:
        changed = False
        passes += 1
        for trip, etype in resolved:
            heads = state[trip.head]
            tails = state[trip.tail]
            new_tails = tails & _image(skb, heads, etype, "-")
            if len(new_tails) != len(tails):
                state[trip.tail] = new_tails
                changed = True
            heads = state[trip.head]
            new_heads = heads & _image(skb, state[trip.tail], etype, "+")
            if len(new_heads) != len(heads):
                state[trip.head] = new_heads
                changed = True
    return state, passes


def ground_triplets(triplets: Iterable[Triplet], table: CandidateTable | Mapping[str, CandidateSet], target: str,
                    skb: Skb, mode: ParseMode | str = ParseMode.STRICT_NODES) -> frozenset[int]:
    """Candidates for ``target`` surviving every triplet constraint.

    Each triplet ``(h, e, t)`` keeps tails reachable from some head over
    ``e`` and heads with some surviving tail, repeated until no set shrinks.
    """
    entries = table.entries if isinstance(table, CandidateTable) else table
    if target not in entries:
        raise KeyError(f"target symbol {target!r} has no candidate set")
    state, _ = propagate(triplets, {s: c.members for s, c in entries.items()}, skb, mode)
    return state[target]


@dataclass
class GroundingOutcome:
    target_candidates: frozenset[int]
    final_l: float
    effective_count: int
    iterations: int
    per_symbol_surviving: dict[str, int]
    surviving: dict[str, frozenset[int]] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)


def scope_schedule(l_max: int) -> list[int]:
    """Distinct per-constant candidate counts tried by :func:`expand_scope` if it never stops early."""
    counts, l = [], 1.0
    while True:
        eff = min(round_half_up(l), l_max)
        if not counts or counts[-1] != eff:
            counts.append(eff)
        if eff >= l_max:
            return counts
        l = l ** 1.5 + 0.5


def expand_scope(extraction: CypherExtraction, table: CandidateTable, target: str, skb: Skb, k: int, l_max: int,
                 mode: ParseMode | str = ParseMode.STRICT_NODES) -> GroundingOutcome:
    """Ground with 1, 2, 4, 9, 26, ... candidates per constant until ``k`` targets survive.

    ``l`` follows ``l <- l**1.5 + 0.5``; slices use ``round_half_up(l)``
    capped at ``l_max``, and a count equal to the previous one is not
    grounded again.
    """
    if k < 1 or l_max < 1:
        raise ValueError("k and l_max must be >= 1")
    mode = ParseMode(mode)
    l = 1.0
    prev = None
    calls = 0
    state: dict[str, frozenset[int]] = {}
    result: frozenset[int] = frozenset()
    trace = []
    while True:
        eff = min(round_half_up(l), l_max)
        if eff != prev:
            sliced = table.sliced(eff)
            state, passes = propagate(extraction.triplets, {s: c.members for s, c in sliced.entries.items()},
                                      skb, mode)
            result = state[target]
            calls += 1
            prev = eff
            trace.append({"l": l, "effective_count": eff, "passes": passes,
                          "sizes": {s: len(v) for s, v in sorted(state.items())}, "c_cypher": len(result)})
            logger.debug("grounding l=%.3f count=%d -> %d target candidates", l, eff, len(result))
        if len(result) >= k or eff >= l_max:
            break
        l = l ** 1.5 + 0.5
    return GroundingOutcome(result, l, prev or 0, calls, {s: len(v) for s, v in state.items()}, state, trace)
