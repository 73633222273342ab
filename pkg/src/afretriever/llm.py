"""Chat providers, prompt templates and the two LLM-driven pipeline steps."""

from __future__ import annotations

import json
import logging
import math
import re
import string
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

from ._http import ProviderError, post_json
from ._labels import label_key

logger = logging.getLogger(__name__)

TEMPLATE_NAMES = ("target_type", "cypher", "pointwise", "listwise", "pairwise")
REASONING_EFFORTS = ("none", "low", "medium", "high")


class BudgetExceeded(Exception):
    """The prompt does not fit the provider's context window."""

    def __init__(self, tokens: int, budget: int):
        super().__init__(f"prompt needs ~{tokens} tokens, budget is {budget}")
        self.tokens = tokens
        self.budget = budget


class UnmatchedPrompt(AssertionError):
    """A scripted provider received a prompt its transcript does not cover."""


def estimate_tokens(text: str, chars_per_token: float = 4) -> int:
    return math.ceil(len(text) / chars_per_token)


# ---------------------------------------------------------------- templates
@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(f for _, f, _, _ in string.Formatter().parse(self.body) if f)

    def render(self, **values: object) -> str:
        missing = self.placeholders - values.keys()
        if missing:
            raise KeyError(f"template {self.name!r} is missing values for {sorted(missing)}")
        return self.body.format(**{k: values[k] for k in self.placeholders})


def load_templates(prompt_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Read the prompt templates, from ``prompt_dir`` if given else the packaged copies."""
    out = {}
    for name in TEMPLATE_NAMES:
        if prompt_dir is not None:
            text = (Path(prompt_dir) / f"{name}.txt").read_text(encoding="utf-8")
        else:
            text = resources.files("afretriever").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
        out[name] = PromptTemplate(name, text.rstrip("\n"))
    return out


# ---------------------------------------------------------------- providers
@dataclass
class Usage:
    prompts: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, tokens_in: int, tokens_out: int) -> None:
        with self._lock:
            self.prompts += 1
            self.tokens_in += tokens_in
            self.tokens_out += tokens_out

    def snapshot(self) -> tuple[int, int, int]:
        with self._lock:
            return self.prompts, self.tokens_in, self.tokens_out


class _BaseProvider:
    token_budget: int
    chars_per_token: float

    def __init__(self) -> None:
        self.usage = Usage()

    def __deepcopy__(self, memo: dict) -> "_BaseProvider":
        # clients are shared handles; estimator cloning must not duplicate them
        return self

    def estimate(self, text: str) -> int:
        return estimate_tokens(text, self.chars_per_token)

    def fits(self, prompt: str) -> bool:
        return self.estimate(prompt) <= self.token_budget

    def complete(self, prompt: str) -> str:
        tokens = self.estimate(prompt)
        if tokens > self.token_budget:
            raise BudgetExceeded(tokens, self.token_budget)
        text = self._complete(prompt)
        self.usage.record(tokens, self.estimate(text))
        return text

    def _complete(self, prompt: str) -> str:
        raise NotImplementedError


class ChatProvider(_BaseProvider):
    """OpenAI-compatible chat-completions client.

    Parameters
    ----------
    endpoint : str
        Full URL of the chat-completions route.
    model : str
        Model name sent with every request.
    reasoning_effort : {"none", "low", "medium", "high"}, optional
    token_budget : int
        Context window (prompt + completion) used for the overflow check.
    """

    def __init__(self, endpoint: str, model: str, *, reasoning_effort: str | None = None, timeout: float = 120.0,
                 max_retries: int = 3, token_budget: int = 131_072, chars_per_token: float = 4,
                 max_concurrency: int = 8, backoff: float = 0.5):
        super().__init__()
        if token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if reasoning_effort is not None and reasoning_effort not in REASONING_EFFORTS:
            raise ValueError(f"reasoning_effort must be one of {REASONING_EFFORTS}")
        self.endpoint = endpoint
        self.model = model
        self.reasoning_effort = reasoning_effort
        self.timeout = timeout
        self.max_retries = max_retries
        self.token_budget = token_budget
        self.chars_per_token = chars_per_token
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max(1, max_concurrency))

    def __repr__(self) -> str:
        return f"ChatProvider({self.endpoint!r}, model={self.model!r})"

    def _complete(self, prompt: str) -> str:
        payload: dict = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        if self.reasoning_effort is not None:
            payload["reasoning_effort"] = self.reasoning_effort
        with self._slots:
            body = post_json(self.endpoint, payload, timeout=self.timeout, max_retries=self.max_retries,
                             backoff=self.backoff)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderError(f"{self.endpoint}: malformed chat response") from None
        return content or ""


LLMProvider = _BaseProvider
Responder = Union[str, Callable[[str], str]]

_ELEMENT_RE = re.compile(r"(\d+), [^,\n]+, type: [^;\n]+; (?:name|title): ([^;\n]*)")
_HEADER_RE = re.compile(r"^type: [^;\n]+; (?:name|title): ([^;\n]*)", re.MULTILINE)


def preference_responder(preferred: Sequence[str]) -> Callable[[str], str]:
    """Scripted judge for rerank prompts that favours labels early in ``preferred``.

    For prompts listing numbered elements it answers all their ids, best
    first (ties keep prompt order), which serves both the pairwise and the
    listwise templates. For a single described node it answers a score that
    is higher for earlier labels and ``0.0`` for unlisted ones.
    """
    rank = {label.strip().casefold(): i for i, label in enumerate(preferred)}
    worst = len(rank)

    def respond(prompt: str) -> str:
        elements = _ELEMENT_RE.findall(prompt)
        if elements:
            ordered = sorted(elements, key=lambda e: rank.get(e[1].strip().casefold(), worst))
            return ", ".join(i for i, _ in ordered)
        m = _HEADER_RE.search(prompt)
        r = rank.get(m.group(1).strip().casefold(), worst) if m else worst
        return "0.0" if r == worst else f"{1.0 - r / (worst + 1):.3f}"

    return respond


class ScriptedProvider(_BaseProvider):
    """Deterministic provider answering from a transcript, for offline runs.

    ``entries`` is a sequence of ``(matcher, response)``. A matcher is an
    exact prompt string or a compiled regular expression (``search``-ed in
    the prompt). A response is a string, where ``\\1``-style group
    references are expanded for regex matchers, or a callable receiving the
    prompt. The first matching entry wins; a prompt with no match raises
    :class:`UnmatchedPrompt`.
    """

    def __init__(self, entries: Iterable[tuple[str | re.Pattern, Responder]] = (), *, token_budget: int = 131_072,
                 chars_per_token: float = 4):
        super().__init__()
        self.entries = list(entries)
        self.token_budget = token_budget
        self.chars_per_token = chars_per_token
        self.transcript: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def add(self, matcher: str | re.Pattern, response: Responder) -> "ScriptedProvider":
        self.entries.append((matcher, response))
        return self

    def _complete(self, prompt: str) -> str:
        for matcher, response in self.entries:
            if isinstance(matcher, re.Pattern):
                m = matcher.search(prompt)
                if m is None:
                    continue
                text = response(prompt) if callable(response) else m.expand(response)
            elif matcher == prompt:
                text = response(prompt) if callable(response) else response
            else:
                continue
            with self._lock:
                self.transcript.append((prompt, text))
            return text
        raise UnmatchedPrompt(f"no scripted response for prompt: {prompt[:200]!r}")

    @classmethod
    def from_records(cls, records: Sequence[Mapping], **kwargs) -> "ScriptedProvider":
        """Build from ``{"match": str} | {"regex": str}`` records with a ``"response"`` string
        or a ``"prefer"`` list of labels (see :func:`preference_responder`)."""
        entries = []
        for i, rec in enumerate(records):
            if "match" in rec:
                matcher: str | re.Pattern = rec["match"]
            elif "regex" in rec:
                matcher = re.compile(rec["regex"], re.DOTALL)
            else:
                raise ValueError(f"transcript entry {i} needs 'match' or 'regex'")
            if "prefer" in rec:
                entries.append((matcher, preference_responder(rec["prefer"])))
            elif "response" in rec:
                entries.append((matcher, str(rec["response"])))
            else:
                raise ValueError(f"transcript entry {i} needs 'response' or 'prefer'")
        return cls(entries, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedProvider":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.load(fh), **kwargs)


def complete(provider: _BaseProvider, prompt: str) -> str:
    return provider.complete(prompt)


# ------------------------------------------------------------ pipeline steps
@dataclass(frozen=True)
class TargetType:
    type: str | None
    valid: bool
    raw: str = ""


def _label_list(labels: Iterable[str]) -> str:
    return ", ".join(sorted(labels))


def derive_target_type(q: str, node_types: Iterable[str], provider: _BaseProvider,
                       templates: Mapping[str, PromptTemplate] | None = None) -> TargetType:
    """Ask the LLM which node type answers ``q``; validate against ``node_types``."""
    node_types = sorted(node_types)
    if not node_types:
        raise ValueError("node_types must be non-empty")
    templates = templates or load_templates()
    prompt = templates["target_type"].render(candidate_types=_label_list(node_types), question=q)
    raw = provider.complete(prompt)
    key = label_key(raw.strip().strip("\"'`.").strip())
    hits = [t for t in node_types if label_key(t) == key]
    if len(hits) == 1:
        return TargetType(hits[0], True, raw)
    logger.info("invalid target type answer %r", raw)
    return TargetType(None, False, raw)


def render_cypher_prompt(q: str, node_types: Iterable[str], edge_types: Iterable[str], target_type: str | None,
                         templates: Mapping[str, PromptTemplate] | None = None) -> str:
    templates = templates or load_templates()
    line = f"\n- Target Node Label: {target_type}" if target_type else ""
    return templates["cypher"].render(query=q, nodes_to_consider=_label_list(node_types),
                                      edges_to_consider=_label_list(edge_types), target_type_line=line)


def derive_cypher(q: str, node_types: Iterable[str], edge_types: Iterable[str], target_type: str | None,
                  provider: _BaseProvider, templates: Mapping[str, PromptTemplate] | None = None) -> str:
    """Ask the LLM for a Cypher query; the raw completion is returned untouched."""
    return provider.complete(render_cypher_prompt(q, node_types, edge_types, target_type, templates))
