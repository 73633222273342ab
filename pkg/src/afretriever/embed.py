"""Node descriptions, embedding providers, named embedding spaces and exact VSS."""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from ._http import ProviderError, post_json
from .skb import INCOMING, OUTGOING, Skb

logger = logging.getLogger(__name__)

TEXT_ONLY = "text_only"
TEXT_PLUS_RELATIONS = "text_plus_relations"
VARIANTS = (TEXT_ONLY, TEXT_PLUS_RELATIONS)

MAX_RELATION_LINES = 200

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class DetailLevel(str, Enum):
    FULL = "full"
    REDUCED = "reduced"
    BARE = "bare"


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def content_hash(text: str) -> int:
    return fnv1a_64(text.encode("utf-8"))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------- rendering
def _relation_lines(skb: Skb, v: int, anchors: frozenset[int] | None) -> list[str]:
    out_rel, in_rel = skb.relations(v)
    keyed = []
    hops = [(etype, u, OUTGOING) for etype, u in out_rel] + [(etype, u, INCOMING) for etype, u in in_rel]
    for etype, u, direction in hops:
        arrow = "->" if direction == OUTGOING else "<-"
        u_label = skb.node(u).label
        if anchors is None or u in anchors:
            keyed.append(((etype, u, "", -1, direction), f"{etype} {arrow} {u_label}"))
        card = skb.edge_type_cardinality(etype)
        if direction == INCOMING:
            card = card.flipped()
        if not card.functional:
            continue
        u_out, u_in = skb.relations(u)
        second = [(e2, w, OUTGOING) for e2, w in u_out] + [(e2, w, INCOMING) for e2, w in u_in]
        for e2, w, d2 in second:
            if w == v:
                continue
            if anchors is not None and u not in anchors and w not in anchors:
                continue
            arrow2 = "->" if d2 == OUTGOING else "<-"
            keyed.append(((etype, u, e2, w, direction + d2),
                          f"{etype} {arrow} {u_label}; {e2} {arrow2} {skb.node(w).label}"))
    keyed.sort(key=lambda kv: kv[0])
    return [line for _, line in keyed[:MAX_RELATION_LINES]]


def render_node_text(skb: Skb, v: int, variant: str = TEXT_ONLY, detail: DetailLevel | str = DetailLevel.FULL,
                     anchor_set: Iterable[int] | None = None) -> str:
    """Deterministic textual description of node ``v``.

    ``detail="reduced"`` keeps only relation lines touching ``anchor_set``;
    ``detail="bare"`` and ``variant="text_only"`` drop relations entirely.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown embedding variant {variant!r}")
    detail = DetailLevel(detail)
    node = skb.node(v)
    head = [f"type: {node.node_type}"]
    for key in ("name", "title"):
        if node.attributes.get(key):
            head.append(f"{key}: {node.attributes[key]}")
    lines = ["; ".join(head)]
    for key in sorted(node.attributes):
        if key in ("name", "title"):
            continue
        lines.append(f"attr {key}: {node.attributes[key]}")
    if node.document:
        lines.append(node.document)
    if variant == TEXT_PLUS_RELATIONS and detail is not DetailLevel.BARE:
        anchors = None
        if detail is DetailLevel.REDUCED:
            anchors = frozenset(anchor_set or ())
        lines.extend(_relation_lines(skb, v, anchors))
    return "\n".join(lines)


# ---------------------------------------------------------------- providers
class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int | None
    calls: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Offline bag-of-tokens embedder with FNV-1a feature hashing.

    Each token adds ``+1`` or ``-1`` (top hash bit) to bucket ``hash % dim``;
    the result is L2-normalised. Deterministic across runs and platforms.
    """

    def __deepcopy__(self, memo: dict):
        return self

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.provider_id = f"hashing-fnv1a-{dim}"
        self.calls = 0

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in tokenize(text):
            h = fnv1a_64(token.encode("utf-8"))
            vec[h % self.dim] += -1.0 if h >> 63 else 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_one(t) for t in texts])


class HttpEmbeddingProvider:
    """OpenAI-compatible ``/embeddings`` client."""

    def __deepcopy__(self, memo: dict):
        return self

    def __init__(self, endpoint: str, model: str, *, timeout: float = 60.0, max_retries: int = 3,
                 batch_size: int = 256, max_concurrency: int = 4, dim: int | None = None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.max_concurrency = max_concurrency
        self.dim = dim
        self.provider_id = f"http:{model}"
        self.calls = 0
        self._lock = threading.Lock()

    def _embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        with self._lock:
            self.calls += 1
        body = post_json(self.endpoint, {"model": self.model, "input": list(texts)},
                         timeout=self.timeout, max_retries=self.max_retries)
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            arr = np.asarray([d["embedding"] for d in data], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"{self.endpoint}: malformed embedding response ({exc})") from None
        if arr.ndim != 2 or arr.shape[0] != len(texts):
            raise ProviderError(f"{self.endpoint}: expected {len(texts)} embeddings, got {arr.shape[0]}")
        return arr

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim or 0))
        batches = [texts[i:i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        with ThreadPoolExecutor(max_workers=max(1, self.max_concurrency)) as pool:
            parts = list(pool.map(self._embed_batch, batches))
        arr = np.vstack(parts)
        if self.dim is None:
            self.dim = arr.shape[1]
        elif arr.shape[1] != self.dim:
            raise ProviderError(f"embedding dimension {arr.shape[1]} != expected {self.dim}")
        return arr


class EmbeddingCache:
    """Content-hash keyed cache in front of a provider (used for query strings)."""

    def __init__(self, provider: EmbeddingProvider):
        self.provider = provider
        self._store: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def get(self, text: str) -> np.ndarray | None:
        return self._store.get(content_hash(text))

    def put(self, text: str, vec: np.ndarray) -> None:
        with self._lock:
            self._store[content_hash(text)] = vec


def _normalize_rows(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    return np.divide(arr, norms, out=np.zeros_like(arr, dtype=float), where=norms > 0)


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str], cache: EmbeddingCache | None = None) -> list[np.ndarray]:
    """Embed ``texts`` in order; duplicates and cached texts cost no provider call."""
    if cache is None:
        cache = _default_cache(provider)
    out: list[np.ndarray | None] = [cache.get(t) for t in texts]
    missing = list(dict.fromkeys(t for t, v in zip(texts, out) if v is None))
    if missing:
        arr = _normalize_rows(np.asarray(provider.embed(missing), dtype=float))
        for text, vec in zip(missing, arr):
            cache.put(text, vec)
        out = [cache.get(t) for t in texts]
    return out  # type: ignore[return-value]


_CACHES: dict[int, EmbeddingCache] = {}


def _default_cache(provider: EmbeddingProvider) -> EmbeddingCache:
    cache = _CACHES.get(id(provider))
    if cache is None or cache.provider is not provider:
        cache = _CACHES[id(provider)] = EmbeddingCache(provider)
    return cache


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# ---------------------------------------------------------------- spaces
class EmbeddingSpace:
    """Vectors for SKB nodes under one description variant.

    Vectors missing at query time are rendered and embedded on demand; a
    stored content hash detects stale descriptions.
    """

    def __init__(self, variant: str, provider_id: str, dim: int | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown embedding variant {variant!r}")
        self.variant = variant
        self.provider_id = provider_id
        self.dim = dim
        self.vectors: dict[int, np.ndarray] = {}
        self.content_hashes: dict[int, int] = {}
        self._lock = threading.Lock()
        self._matrix: np.ndarray | None = None
        self._row: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.vectors)

    def __repr__(self) -> str:
        return f"EmbeddingSpace({self.variant!r}, provider={self.provider_id!r}, n={len(self)}, dim={self.dim})"

    def add(self, node_id: int, vector: np.ndarray, text_hash: int) -> None:
        vector = np.asarray(vector, dtype=float)
        if self.dim is None:
            self.dim = vector.shape[0]
        elif vector.shape != (self.dim,):
            raise ValueError(f"vector for node {node_id} has dim {vector.shape}, space has {self.dim}")
        norm = np.linalg.norm(vector)
        with self._lock:
            self.vectors[node_id] = vector / norm if norm > 0 else vector
            self.content_hashes[node_id] = text_hash
            self._matrix = None

    def ensure(self, skb: Skb, node_ids: Iterable[int], provider: EmbeddingProvider) -> None:
        """Embed every node in ``node_ids`` that has no (or a stale) vector."""
        if provider.provider_id != self.provider_id:
            raise ValueError(f"space built with {self.provider_id!r}, got provider {provider.provider_id!r}")
        todo_ids, todo_texts = [], []
        for v in node_ids:
            if v in self.vectors:
                continue
            todo_ids.append(v)
            todo_texts.append(render_node_text(skb, v, self.variant))
        if not todo_ids:
            return
        arr = np.asarray(provider.embed(todo_texts), dtype=float)
        for v, text, vec in zip(todo_ids, todo_texts, arr):
            self.add(v, vec, content_hash(text))

    def refresh(self, skb: Skb, provider: EmbeddingProvider) -> int:
        """Re-embed nodes whose rendered text changed; returns how many were redone."""
        stale = [v for v in sorted(skb.node_ids)
                 if self.content_hashes.get(v) != content_hash(render_node_text(skb, v, self.variant))]
        with self._lock:
            for v in stale:
                self.vectors.pop(v, None)
            self._matrix = None
        self.ensure(skb, stale, provider)
        return len(stale)

    @classmethod
    def build(cls, skb: Skb, provider: EmbeddingProvider, variant: str = TEXT_ONLY) -> "EmbeddingSpace":
        space = cls(variant, provider.provider_id, provider.dim)
        space.ensure(skb, sorted(skb.node_ids), provider)
        return space

    def _rows(self) -> tuple[np.ndarray, dict[int, int]]:
        with self._lock:
            if self._matrix is None:
                ids = sorted(self.vectors)
                self._row = {v: i for i, v in enumerate(ids)}
                self._matrix = np.vstack([self.vectors[v] for v in ids]) if ids else np.zeros((0, self.dim or 0))
            return self._matrix, self._row

    def scores(self, query_vec: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
        matrix, row = self._rows()
        idx = np.fromiter((row[c] for c in candidates), dtype=np.int64, count=len(candidates))
        sub = matrix[idx]
        qn = np.linalg.norm(query_vec)
        if qn == 0:
            return np.zeros(len(candidates))
        norms = np.linalg.norm(sub, axis=1)
        dots = sub @ query_vec
        return np.clip(np.divide(dots, norms * qn, out=np.zeros_like(dots), where=norms > 0), -1.0, 1.0)

    # ---- persistence
    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"dim": self.dim, "provider_id": self.provider_id, "variant": self.variant}) + "\n")
            for v in sorted(self.vectors):
                rec = {"node_id": v, "hash": str(self.content_hashes[v]), "vector": self.vectors[v].tolist()}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingSpace":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            space = cls(header["variant"], header["provider_id"], header["dim"])
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    space.add(int(rec["node_id"]), np.asarray(rec["vector"], dtype=float), int(rec["hash"]))
        return space


def vss(query_text: str, candidates: Iterable[int], n: int, space: EmbeddingSpace, provider: EmbeddingProvider,
        skb: Skb | None = None, cache: EmbeddingCache | None = None) -> list[tuple[int, float]]:
    """Exact top-``n`` of ``candidates`` by cosine to ``query_text``.

    Ties are broken by ascending node id. ``skb`` is needed only when some
    candidates have no vector yet.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    cand = sorted(set(candidates))
    if n == 0 or not cand:
        return []
    missing = [c for c in cand if c not in space.vectors]
    if missing:
        if skb is None:
            raise ValueError(f"{len(missing)} candidates lack vectors and no skb was given")
        space.ensure(skb, missing, provider)
    (qvec,) = embed_texts(provider, [query_text], cache)
    scores = space.scores(qvec, cand)
    ids = np.asarray(cand)
    order = np.lexsort((ids, -scores))[: min(n, len(cand))]
    return [(int(ids[i]), float(scores[i])) for i in order]
