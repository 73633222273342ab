"""LLM rerankers: pointwise scores, one listwise ordering prompt, pairwise binary insertion sort."""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ._http import ProviderError
from .embed import TEXT_PLUS_RELATIONS, DetailLevel, render_node_text
from .llm import BudgetExceeded, LLMProvider, PromptTemplate, load_templates
from .skb import Skb

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "pointwise", "listwise", "pairwise")
LEVELS = (DetailLevel.FULL, DetailLevel.REDUCED, DetailLevel.BARE)

_SCORE_RE = re.compile(r"\d+(?:\.\d+)?|\.\d+")
_INT_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class RerankCandidate:
    local_id: int
    node: int
    node_type: str
    descriptions: Mapping[DetailLevel, str]
    prior_rank: int

    def describe(self, level: DetailLevel) -> str:
        return self.descriptions[level]


@dataclass
class RerankOutcome:
    order: list[RerankCandidate]
    prompts_sent: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    degradations: dict[str, int] = field(default_factory=lambda: {lv.value: 0 for lv in LEVELS})
    flagged: bool = False
    exchanges: list[dict] = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return [c.node for c in self.order]


def build_candidate_prompt_text(skb: Skb, node: int, level: DetailLevel | str,
                                anchors: Iterable[int] = ()) -> str:
    return render_node_text(skb, node, TEXT_PLUS_RELATIONS, level, anchors)


def make_candidates(skb: Skb, nodes: Sequence[int], anchors: Iterable[int] = ()) -> list[RerankCandidate]:
    """Number ``nodes`` 1..k in their given (prior) order and render every detail level."""
    anchors = frozenset(anchors)
    out = []
    for i, v in enumerate(nodes):
        desc = {lv: build_candidate_prompt_text(skb, v, lv, anchors) for lv in LEVELS}
        out.append(RerankCandidate(i + 1, v, skb.node(v).node_type, desc, i))
    return out


def parse_score(text: str) -> float | None:
    """First number in ``[0, 1]`` appearing in ``text``."""
    for m in _SCORE_RE.finditer(text or ""):
        value = float(m.group())
        if 0.0 <= value <= 1.0:
            return value
    return None


def repair_listwise(text: str, ids: int | Sequence[int]) -> tuple[list[int], bool]:
    """Turn a listwise answer into a permutation of ``ids`` (given in prior order, or ``k`` for ``1..k``).

    Valid ids keep their first occurrence, others are ignored and unmentioned
    ids follow in prior order. The flag is set when no valid id was found.
    """
    prior = list(range(1, ids + 1)) if isinstance(ids, int) else list(ids)
    valid = set(prior)
    seen: dict[int, None] = {}
    for m in _INT_RE.finditer(text or ""):
        i = int(m.group())
        if i in valid:
            seen.setdefault(i)
    return list(seen) + [i for i in prior if i not in seen], not seen


def parse_pairwise(text: str, first: int, second: int) -> int | None:
    for m in _INT_RE.finditer(text or ""):
        i = int(m.group())
        if i in (first, second):
            return i
    return None


class _Session:
    """Prompt bookkeeping shared by the three strategies."""

    def __init__(self, provider: LLMProvider, outcome: RerankOutcome, strategy: str):
        self.provider = provider
        self.outcome = outcome
        self.strategy = strategy
        self._lock = threading.Lock()

    def ask(self, prompt: str, ids: Sequence[int], levels: Sequence[DetailLevel]) -> str | None:
        """Send one prompt; ``None`` on provider failure."""
        try:
            text = self.provider.complete(prompt)
        except (ProviderError, BudgetExceeded) as exc:
            logger.warning("%s rerank prompt for ids %s failed: %s", self.strategy, list(ids), exc)
            text = None
        with self._lock:
            self._record(prompt, text, ids, levels)
        return text

    def _record(self, prompt: str, text: str | None, ids: Sequence[int], levels: Sequence[DetailLevel]) -> None:
        out = self.outcome
        for lv in levels:
            out.degradations[lv.value] += 1
        out.prompts_sent += 1
        out.tokens_in += self.provider.estimate(prompt)
        out.tokens_out += self.provider.estimate(text or "")
        out.exchanges.append({"strategy": self.strategy, "local_ids": list(ids),
                              "levels": [lv.value for lv in levels], "prompt": prompt, "response": text})


def _templates(templates: Mapping[str, PromptTemplate] | None) -> Mapping[str, PromptTemplate]:
    return templates or load_templates()


def rerank_pointwise(candidates: Sequence[RerankCandidate], q: str, provider: LLMProvider,
                     templates: Mapping[str, PromptTemplate] | None = None, max_workers: int = 1) -> RerankOutcome:
    """One scoring prompt per candidate, then a stable sort by descending score."""
    tpl = _templates(templates)["pointwise"]
    outcome = RerankOutcome(list(candidates))
    session = _Session(provider, outcome, "pointwise")

    def prompt_for(c: RerankCandidate) -> tuple[str, DetailLevel]:
        for lv in LEVELS:
            prompt = tpl.render(node_type=c.node_type, query=q, description=c.describe(lv))
            if provider.fits(prompt):
                return prompt, lv
        return prompt, DetailLevel.BARE

    prompts = [prompt_for(c) for c in candidates]

    def score(i: int) -> float:
        prompt, lv = prompts[i]
        text = session.ask(prompt, [candidates[i].local_id], [lv])
        value = parse_score(text) if text is not None else None
        return 0.0 if value is None else value

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        scores = list(pool.map(score, range(len(candidates))))
    # the pool may finish out of order; keep the exchange log in candidate order
    outcome.exchanges.sort(key=lambda ex: ex["local_ids"][0])
    ranked = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].prior_rank))
    outcome.order = [candidates[i] for i in ranked]
    return outcome


def _possible_answers(candidates: Sequence[RerankCandidate], level: DetailLevel) -> str:
    return "".join(f"\n{c.local_id}, {c.node_type}, {c.describe(level)}" for c in candidates)


def rerank_listwise(candidates: Sequence[RerankCandidate], q: str, provider: LLMProvider,
                    templates: Mapping[str, PromptTemplate] | None = None) -> RerankOutcome:
    """All candidates in one prompt; the answer is repaired into a permutation.

    Raises
    ------
    BudgetExceeded
        If even relation-free descriptions do not fit the context window.
    """
    tpl = _templates(templates)["listwise"]
    candidates = sorted(candidates, key=lambda c: c.prior_rank)
    by_id = {c.local_id: c for c in candidates}
    outcome = RerankOutcome(list(candidates))
    if not candidates:
        return outcome
    for lv in LEVELS:
        prompt = tpl.render(possible_answers=_possible_answers(candidates, lv), query=q)
        if provider.fits(prompt):
            break
    else:
        raise BudgetExceeded(provider.estimate(prompt), provider.token_budget)
    text = _Session(provider, outcome, "listwise").ask(prompt, list(by_id), [lv])
    ids, flagged = repair_listwise(text or "", list(by_id))
    outcome.flagged = flagged
    outcome.order = [by_id[i] for i in ids]
    return outcome


def rerank_pairwise(candidates: Sequence[RerankCandidate], q: str, provider: LLMProvider,
                    templates: Mapping[str, PromptTemplate] | None = None) -> RerankOutcome:
    """Binary insertion sort with one comparison prompt per step.

    The incumbent from the sorted list is shown first, the candidate being
    inserted second. Unusable answers keep the incumbent ahead, so failures
    fall back to prior order.
    """
    tpl = _templates(templates)["pairwise"]
    outcome = RerankOutcome([])
    session = _Session(provider, outcome, "pairwise")

    def render(a: RerankCandidate, b: RerankCandidate, la: DetailLevel, lb: DetailLevel) -> str:
        return tpl.render(node1_id=a.local_id, node_type_1=a.node_type, doc_info_1=a.describe(la),
                          node2_id=b.local_id, node_type_2=b.node_type, doc_info_2=b.describe(lb), query=q)

    def challenger_wins(inc: RerankCandidate, new: RerankCandidate) -> bool:
        la = lb = 0
        prompt = render(inc, new, LEVELS[la], LEVELS[lb])
        # degrade the longer description first, one level at a time
        while not provider.fits(prompt) and (la < 2 or lb < 2):
            if lb == 2 or (la < 2 and len(inc.describe(LEVELS[la])) >= len(new.describe(LEVELS[lb]))):
                la += 1
            else:
                lb += 1
            prompt = render(inc, new, LEVELS[la], LEVELS[lb])
        text = session.ask(prompt, [inc.local_id, new.local_id], [LEVELS[la], LEVELS[lb]])
        return parse_pairwise(text or "", inc.local_id, new.local_id) == new.local_id

    ordered: list[RerankCandidate] = []
    for c in sorted(candidates, key=lambda c: c.prior_rank):
        lo, hi = 0, len(ordered)
        while lo < hi:
            mid = (lo + hi) // 2
            if challenger_wins(ordered[mid], c):
                hi = mid
            else:
                lo = mid + 1
        ordered.insert(lo, c)
    outcome.order = ordered
    return outcome


def rerank(strategy: str, candidates: Sequence[RerankCandidate], q: str, provider: LLMProvider | None,
           templates: Mapping[str, PromptTemplate] | None = None, max_workers: int = 1) -> RerankOutcome:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown reranker {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "none" or not candidates:
        return RerankOutcome(sorted(candidates, key=lambda c: c.prior_rank))
    if provider is None:
        raise ValueError(f"reranker {strategy!r} needs an LLM provider")
    if strategy == "pointwise":
        return rerank_pointwise(candidates, q, provider, templates, max_workers)
    if strategy == "listwise":
        return rerank_listwise(candidates, q, provider, templates)
    return rerank_pairwise(candidates, q, provider, templates)


def write_trace(outcome: RerankOutcome, path: str | Path, query_id: str | None = None) -> None:
    """Append every prompt/response pair of ``outcome`` to a JSONL file."""
    mapping = {c.local_id: c.node for c in outcome.order}
    with open(path, "a", encoding="utf-8") as fh:
        for ex in outcome.exchanges:
            rec = {"query_id": query_id, **ex, "nodes": [mapping.get(i) for i in ex["local_ids"]]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
