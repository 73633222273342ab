"""End-to-end retrieval: type prediction, Cypher extraction, grounding, hybrid VSS and reranking."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .cypherlite import CypherExtraction, ParseMode, parse_cypher
from .embed import TEXT_ONLY, TEXT_PLUS_RELATIONS, VARIANTS, EmbeddingProvider, EmbeddingSpace, vss
from .grounding import GroundingOutcome, expand_scope, retrieve_symbol_candidates, round_half_up
from .llm import LLMProvider, PromptTemplate, derive_cypher, derive_target_type, load_templates
from .rerank import STRATEGIES, RerankOutcome, make_candidates, rerank
from .skb import Skb

logger = logging.getLogger(__name__)

STEP_SUBSETS = ("1+7", "1-5", "1-6", "1-7", "1-8")
GRAPH = "graph"
VECTOR = "vector"


def normalize_steps(steps: str) -> str:
    s = str(steps).replace("–", "-").replace("—", "-").replace(" ", "")
    if s.startswith("steps"):
        s = s[5:]
    s = {"1to5": "1-5", "1to6": "1-6", "1to7": "1-7", "1to8": "1-8"}.get(s, s)
    if s not in STEP_SUBSETS:
        raise ValueError(f"invalid step subset {steps!r}; expected one of {STEP_SUBSETS}")
    return s


@dataclass
class PipelineConfig:
    k: int = 20
    l_max: int = 100
    alpha: float = 2 / 3
    mode: str = ParseMode.STRICT_NODES.value
    reranker: str = "pairwise"
    space_step4: str = TEXT_ONLY
    space_step6: str = TEXT_ONLY
    space_step7: str = TEXT_PLUS_RELATIONS
    concealed_node_types: frozenset[str] = frozenset()
    steps: str = "1-8"
    rerank_workers: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError("k must be an integer >= 1")
        if not isinstance(self.l_max, int) or self.l_max < 1:
            raise ValueError("l_max must be an integer >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        self.mode = ParseMode(self.mode).value
        if self.reranker not in STRATEGIES:
            raise ValueError(f"reranker must be one of {STRATEGIES}")
        for name in ("space_step4", "space_step6", "space_step7"):
            if getattr(self, name) not in VARIANTS:
                raise ValueError(f"{name} must be one of {VARIANTS}")
        self.concealed_node_types = frozenset(self.concealed_node_types)
        self.steps = normalize_steps(self.steps)

    @property
    def variants(self) -> tuple[str, ...]:
        return tuple(sorted({self.space_step4, self.space_step6, self.space_step7}))


@dataclass(frozen=True)
class QueryRecord:
    id: str
    text: str
    gold: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if self.gold is not None:
            object.__setattr__(self, "gold", frozenset(self.gold))
            if not self.gold:
                raise ValueError(f"query {self.id!r}: gold set must be non-empty when present")


@dataclass(frozen=True)
class AnswerItem:
    node: int
    provenance: str
    vss_score: float
    rerank_position: int | None = None


@dataclass
class RankedAnswers:
    query_id: str
    items: list[AnswerItem] = field(default_factory=list)
    trace: dict = field(default_factory=dict)
    rerank: RerankOutcome | None = None
    extraction: CypherExtraction | None = None
    grounding: GroundingOutcome | None = None
    error: str | None = None

    @property
    def nodes(self) -> list[int]:
        return [it.node for it in self.items]

    def to_record(self) -> dict:
        rec = {"id": self.query_id,
               "answers": [{"node_id": it.node, "provenance": it.provenance, "rank": i + 1}
                           for i, it in enumerate(self.items)],
               "trace": self.trace}
        if self.error is not None:
            rec["error"] = self.error
        return rec


@dataclass
class Providers:
    chat: LLMProvider | None
    embedder: EmbeddingProvider


# ------------------------------------------------------------------ helpers
def prompt_labels(skb: Skb, concealed: Iterable[str]) -> tuple[list[str], list[str]]:
    """Node and edge labels offered to the Cypher prompt once ``concealed`` types are hidden.

    An edge type disappears when every one of its edges touches a concealed type.
    """
    concealed = frozenset(concealed)
    nodes = sorted(t for t in skb.node_types if t not in concealed)
    if not concealed:
        return nodes, sorted(skb.edge_types)
    edges = []
    for e in sorted(skb.edge_types):
        touches = (skb.node(h).node_type in concealed or skb.node(t).node_type in concealed
                   for h, t in skb.edge_pairs(e))
        if not all(touches):
            edges.append(e)
    return nodes, edges


def select_graph_candidates(q: str, c_cypher: Iterable[int], cfg: PipelineConfig, skb: Skb,
                            spaces: Mapping[str, EmbeddingSpace], embedder: EmbeddingProvider,
                            n: int | None = None) -> list[tuple[int, float]]:
    """Best ``round(alpha * k)`` grounded candidates by cosine to the question."""
    if n is None:
        n = round_half_up(cfg.alpha * cfg.k)
    return vss(q, c_cypher, n, spaces[cfg.space_step6], embedder, skb=skb)


def select_vss_fill(q: str, y_cypher: Sequence[tuple[int, float]], c_cypher: Iterable[int], y_type: str | None,
                    cfg: PipelineConfig, skb: Skb, spaces: Mapping[str, EmbeddingSpace],
                    embedder: EmbeddingProvider) -> list[tuple[int, float]]:
    """Fill up to ``k`` from nodes of the predicted type that grounding did not return."""
    pool = skb.nodes_of_type(y_type if y_type in skb.node_types else None)
    pool = pool - frozenset(c_cypher)
    return vss(q, pool, cfg.k - len(y_cypher), spaces[cfg.space_step7], embedder, skb=skb)


def _reaches_target(extraction: CypherExtraction) -> bool:
    t = extraction.target_symbol
    return any(t in (tr.head, tr.tail) for tr in extraction.triplets)


# ------------------------------------------------------------------ main entry
def answer_query(q: QueryRecord, skb: Skb, cfg: PipelineConfig, providers: Providers,
                 spaces: Mapping[str, EmbeddingSpace], templates: Mapping[str, PromptTemplate] | None = None,
                 keep_details: bool = False) -> RankedAnswers:
    """Answer one question; provider errors propagate to the caller."""
    templates = templates or load_templates()
    chat, embedder = providers.chat, providers.embedder
    if chat is None:
        raise ValueError("an LLM provider is required")
    out = RankedAnswers(q.id)

    # 1: answer type
    tt = derive_target_type(q.text, skb.node_types, chat, templates)
    y_type = tt.type if tt.valid else None

    # 2-3: Cypher
    cypher_text = None
    extraction = CypherExtraction()
    if cfg.steps != "1+7":
        node_labels, edge_labels = prompt_labels(skb, cfg.concealed_node_types)
        cypher_text = derive_cypher(q.text, node_labels, edge_labels, y_type, chat, templates)
        extraction = parse_cypher(cypher_text, skb.node_types, skb.edge_types, cfg.mode)
    skipped = extraction.empty or not _reaches_target(extraction)

    # 4-5: grounding
    grounding = None
    c_cypher: frozenset[int] = frozenset()
    if not skipped:
        target = extraction.target_symbol
        spec = extraction.symbols[target]
        if spec.node_type is None and y_type is not None:
            extraction.symbols[target] = dataclasses.replace(spec, node_type=y_type)
        table = retrieve_symbol_candidates(extraction, skb, spaces[cfg.space_step4], embedder, cfg.l_max, cfg.mode)
        grounding = expand_scope(extraction, table, target, skb, cfg.k, cfg.l_max, cfg.mode)
        c_cypher = grounding.target_candidates

    out.trace = {"target_type": y_type, "cypher_text": cypher_text,
                 "triplets": [[t.head, t.edge_type, t.tail] for t in extraction.triplets],
                 "final_l": grounding.final_l if grounding else None, "skipped_graph": skipped}
    if keep_details:
        out.extraction, out.grounding = extraction, grounding

    if cfg.steps == "1-5":
        # no VSS: ascending node id stands in for retrieval order
        out.items = [AnswerItem(v, GRAPH, 0.0) for v in sorted(c_cypher)[:cfg.k]]
        return out

    # 6: graph strand
    if cfg.steps == "1-6":
        y_cypher = select_graph_candidates(q.text, c_cypher, cfg, skb, spaces, embedder, n=cfg.k)
    else:
        y_cypher = select_graph_candidates(q.text, c_cypher, cfg, skb, spaces, embedder)
    items = [AnswerItem(v, GRAPH, s) for v, s in y_cypher]

    # 7: vector fill
    if cfg.steps != "1-6":
        y_vss = select_vss_fill(q.text, y_cypher, c_cypher, y_type, cfg, skb, spaces, embedder)
        items += [AnswerItem(v, VECTOR, s) for v, s in y_vss]

    # 8: rerank
    if cfg.steps == "1-8" and cfg.reranker != "none" and items:
        anchors: set[int] = set()
        if grounding is not None:
            for sym, nodes in grounding.surviving.items():
                if sym != extraction.target_symbol:
                    anchors |= nodes
        cands = make_candidates(skb, [it.node for it in items], anchors)
        outcome = rerank(cfg.reranker, cands, q.text, chat, templates, cfg.rerank_workers)
        by_node = {it.node: it for it in items}
        items = [dataclasses.replace(by_node[c.node], rerank_position=i + 1) for i, c in enumerate(outcome.order)]
        out.rerank = outcome
    out.items = items
    return out
