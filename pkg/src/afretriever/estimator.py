"""Estimator-style front end: ``fit`` embeds an SKB, ``retrieve``/``predict`` answer questions."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._http import ProviderError
from .embed import EmbeddingSpace, HashingEmbedder
from .llm import BudgetExceeded, load_templates
from .pipeline import PipelineConfig, Providers, QueryRecord, RankedAnswers, answer_query
from .skb import Skb
from .validation import check_queries, check_skb

logger = logging.getLogger(__name__)

# failures that cost one query, not the whole batch
QUERY_ERRORS = (ProviderError, BudgetExceeded, AssertionError, ValueError, KeyError)


class AFRetriever(BaseEstimator):
    """Retriever over a semi-structured knowledge base.

    Parameters
    ----------
    chat_provider : LLM provider
        Answers the type, Cypher and rerank prompts.
    embedding_provider : embedding provider, optional
        Defaults to the offline :class:`HashingEmbedder`.
    k : int
        Number of answers returned per question.
    l_max : int
        Cap on candidates per constant during grounding.
    alpha : float
        Share of the ``k`` slots given to grounded candidates.
    reranker : {"none", "pointwise", "listwise", "pairwise"}
    steps : {"1+7", "1-5", "1-6", "1-7", "1-8"}
        Which pipeline stages run; "1-8" is the full method.

    Attributes
    ----------
    skb_ : Skb
    spaces_ : dict
        Embedding space per description variant.
    """

    def __init__(self, chat_provider=None, embedding_provider=None, k=20, l_max=100, alpha=2 / 3,
                 mode="strict_nodes", reranker="pairwise", space_step4="text_only", space_step6="text_only",
                 space_step7="text_plus_relations", concealed_node_types=(), steps="1-8", rerank_workers=1,
                 prompt_dir=None):
        self.chat_provider = chat_provider
        self.embedding_provider = embedding_provider
        self.k = k
        self.l_max = l_max
        self.alpha = alpha
        self.mode = mode
        self.reranker = reranker
        self.space_step4 = space_step4
        self.space_step6 = space_step6
        self.space_step7 = space_step7
        self.concealed_node_types = concealed_node_types
        self.steps = steps
        self.rerank_workers = rerank_workers
        self.prompt_dir = prompt_dir

    def config(self) -> PipelineConfig:
        return PipelineConfig(k=self.k, l_max=self.l_max, alpha=self.alpha, mode=self.mode, reranker=self.reranker,
                              space_step4=self.space_step4, space_step6=self.space_step6,
                              space_step7=self.space_step7, concealed_node_types=frozenset(self.concealed_node_types),
                              steps=self.steps, rerank_workers=self.rerank_workers)

    def fit(self, skb: Skb, y=None, spaces: Mapping[str, EmbeddingSpace] | None = None) -> "AFRetriever":
        """Embed every node under the description variants the config uses.

        Spaces passed in ``spaces`` are reused (and completed lazily) instead
        of being rebuilt.
        """
        skb = check_skb(skb)
        cfg = self.config()
        embedder = self.embedding_provider if self.embedding_provider is not None else HashingEmbedder()
        spaces = dict(spaces or {})
        self.spaces_ = {}
        for variant in cfg.variants:
            space = spaces.get(variant)
            if space is None:
                space = EmbeddingSpace.build(skb, embedder, variant)
            elif space.provider_id != embedder.provider_id:
                raise ValueError(f"space {variant!r} was built with {space.provider_id!r}")
            self.spaces_[variant] = space
        self.skb_ = skb
        self.embedder_ = embedder
        self.templates_ = load_templates(self.prompt_dir)
        return self

    def _answer(self, q: QueryRecord, cfg: PipelineConfig, keep_details: bool) -> RankedAnswers:
        providers = Providers(self.chat_provider, self.embedder_)
        return answer_query(q, self.skb_, cfg, providers, self.spaces_, self.templates_, keep_details)

    def _answer_or_record(self, q: QueryRecord, cfg: PipelineConfig, keep_details: bool) -> RankedAnswers:
        try:
            return self._answer(q, cfg, keep_details)
        except QUERY_ERRORS as exc:
            logger.error("query %s failed: %s: %s", q.id, type(exc).__name__, exc)
            trace = {"target_type": None, "cypher_text": None, "triplets": [], "final_l": None,
                     "skipped_graph": True}
            return RankedAnswers(q.id, trace=trace, error=f"{type(exc).__name__}: {exc}")

    def retrieve(self, X, parallelism: int = 1, errors: str = "raise", keep_details: bool = False
                 ) -> list[RankedAnswers]:
        """Answer each question; results come back in input order.

        With ``errors="record"`` a failing question yields an empty answer
        list carrying the error message instead of aborting the batch.
        """
        check_is_fitted(self, "skb_")
        if errors not in ("raise", "record"):
            raise ValueError("errors must be 'raise' or 'record'")
        queries = check_queries(X)
        cfg = self.config()
        run = self._answer if errors == "raise" else self._answer_or_record
        if parallelism <= 1 or len(queries) <= 1:
            return [run(q, cfg, keep_details) for q in queries]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(lambda q: run(q, cfg, keep_details), queries))

    def predict(self, X, parallelism: int = 1) -> list[list[int]]:
        return [r.nodes for r in self.retrieve(X, parallelism)]

    def score(self, X, y=None) -> float:
        """Mean reciprocal rank (fraction, not percent) over questions with gold answers."""
        from .evaluation import compute_metrics

        queries = check_queries(X)
        if y is not None:
            queries = [QueryRecord(q.id, q.text, frozenset(g)) for q, g in zip(queries, y)]
        report = compute_metrics(self.retrieve(queries, errors="record"), queries)
        return report.aggregate["mrr"] / 100.0
