"""Hybrid graph and vector retrieval over semi-structured knowledge bases."""

from .estimator import AFRetriever
from .pipeline import PipelineConfig, QueryRecord, RankedAnswers, answer_query
from .skb import Edge, Node, Skb, load_skb, load_skb_dir

__all__ = ["AFRetriever", "Edge", "Node", "PipelineConfig", "QueryRecord", "RankedAnswers", "Skb", "answer_query",
           "load_skb", "load_skb_dir"]
__version__ = "0.1.0"
