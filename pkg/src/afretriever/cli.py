"""``afr`` command line: ingest, embed, query, eval, ablate, convert-stark."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from ._http import ProviderError
from .embed import VARIANTS, EmbeddingSpace, HashingEmbedder, HttpEmbeddingProvider
from .estimator import AFRetriever
from .evaluation import AblationGrid, QueryFileError, read_queries, run_ablation, run_batch
from .llm import BudgetExceeded, ChatProvider, ScriptedProvider, UnmatchedPrompt
from .pipeline import PipelineConfig, QueryRecord
from .rerank import write_trace
from .skb import SkbError, load_skb_dir, write_skb
from .stark import convert_stark

logger = logging.getLogger("afretriever")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3

PIPELINE_KEYS = ("k", "l_max", "alpha", "mode", "reranker", "space_step4", "space_step6", "space_step7",
                 "concealed_node_types", "steps", "rerank_workers")
CONFIG_KEYS = PIPELINE_KEYS + ("prompt_dir", "parallelism", "skb", "queries", "out", "spaces_dir", "chat",
                               "embedding")
CHAT_KEYS = ("kind", "endpoint", "model", "reasoning_effort", "timeout", "max_retries", "token_budget",
             "chars_per_token", "max_concurrency", "transcript")
EMBEDDING_KEYS = ("kind", "dim", "endpoint", "model", "timeout", "max_retries", "batch_size", "max_concurrency")

DEFAULTS = {"k": 20, "l_max": 100, "alpha": 2 / 3, "mode": "strict_nodes", "reranker": "pairwise",
            "space_step4": "text_only", "space_step6": "text_only", "space_step7": "text_plus_relations",
            "concealed_node_types": [], "steps": "1-8", "rerank_workers": 1, "prompt_dir": None, "parallelism": 1,
            "skb": None, "queries": None, "out": None, "spaces_dir": None, "chat": None,
            "embedding": {"kind": "hashing", "dim": 256}}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


# ------------------------------------------------------------------ config
def _check_keys(obj: object, allowed: Sequence[str], where: str) -> dict:
    if not isinstance(obj, dict):
        raise UsageError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise UsageError(f"{where}: unknown keys {unknown}")
    return obj


def load_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON file, then command-line flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
        _check_keys(raw, CONFIG_KEYS, path)
        cfg.update(raw)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["chat"] is not None:
        _check_keys(cfg["chat"], CHAT_KEYS, "chat")
    _check_keys(cfg["embedding"], EMBEDDING_KEYS, "embedding")
    try:
        pipeline_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def pipeline_config(cfg: dict) -> PipelineConfig:
    params = {k: cfg[k] for k in PIPELINE_KEYS}
    params["concealed_node_types"] = frozenset(params["concealed_node_types"] or ())
    return PipelineConfig(**params)


def build_chat(spec: dict | None):
    if spec is None:
        return None
    kind = spec.get("kind", "http")
    budget = {k: spec[k] for k in ("token_budget", "chars_per_token") if k in spec}
    if kind == "scripted":
        if "transcript" not in spec:
            raise UsageError("chat.transcript is required for a scripted provider")
        try:
            return ScriptedProvider.from_file(spec["transcript"], **budget)
        except FileNotFoundError:
            raise DataError(f"{spec['transcript']}: transcript not found") from None
        except (ValueError, KeyError) as exc:
            raise DataError(f"{spec['transcript']}: {exc}") from None
    if kind == "http":
        if not spec.get("endpoint") or not spec.get("model"):
            raise UsageError("chat.endpoint and chat.model are required for an http provider")
        extra = {k: spec[k] for k in ("reasoning_effort", "timeout", "max_retries", "max_concurrency") if k in spec}
        return ChatProvider(spec["endpoint"], spec["model"], **extra, **budget)
    raise UsageError(f"unknown chat kind {kind!r}")


def build_embedder(spec: dict):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(spec.get("dim", 256)))
    if kind == "http":
        if not spec.get("endpoint") or not spec.get("model"):
            raise UsageError("embedding.endpoint and embedding.model are required for an http provider")
        extra = {k: spec[k] for k in ("timeout", "max_retries", "batch_size", "max_concurrency", "dim") if k in spec}
        return HttpEmbeddingProvider(spec["endpoint"], spec["model"], **extra)
    raise UsageError(f"unknown embedding kind {kind!r}")


def _need(cfg: dict, key: str, flag: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"{flag} is required (flag or config key {key!r})")
    return cfg[key]


def _load_skb(cfg: dict):
    path = _need(cfg, "skb", "--skb")
    try:
        return load_skb_dir(path)
    except FileNotFoundError as exc:
        raise DataError(f"{exc.filename}: not found") from None


def _space_path(spaces_dir: str, variant: str) -> Path:
    return Path(spaces_dir) / f"{variant}.jsonl"


def _load_spaces(cfg: dict) -> dict:
    spaces = {}
    if cfg.get("spaces_dir"):
        for variant in VARIANTS:
            path = _space_path(cfg["spaces_dir"], variant)
            if path.exists():
                try:
                    spaces[variant] = EmbeddingSpace.load(path)
                except (ValueError, KeyError) as exc:
                    raise DataError(f"{path}: {exc}") from None
    return spaces


def build_estimator(cfg: dict, chat=None) -> AFRetriever:
    pc = pipeline_config(cfg)
    if chat is None:
        chat = build_chat(cfg["chat"])
    if chat is None:
        raise UsageError("no chat provider configured (config key 'chat')")
    return AFRetriever(chat_provider=chat, embedding_provider=build_embedder(cfg["embedding"]), k=pc.k,
                       l_max=pc.l_max, alpha=pc.alpha, mode=pc.mode, reranker=pc.reranker,
                       space_step4=pc.space_step4, space_step6=pc.space_step6, space_step7=pc.space_step7,
                       concealed_node_types=tuple(sorted(pc.concealed_node_types)), steps=pc.steps,
                       rerank_workers=pc.rerank_workers, prompt_dir=cfg["prompt_dir"])


def planned_calls(cfg: dict, n_queries: int) -> dict:
    """Upper bounds on provider calls for ``n_queries`` questions."""
    pc = pipeline_config(cfg)
    per_query = 1 + (0 if pc.steps == "1+7" else 1)
    rerank = 0
    if pc.steps == "1-8":
        rerank = {"none": 0, "pointwise": pc.k, "listwise": 1,
                  "pairwise": sum(math.ceil(math.log2(i)) for i in range(2, pc.k + 1))}[pc.reranker]
    return {"queries": n_queries, "llm_prompts_per_query_max": per_query + rerank,
            "llm_prompts_total_max": n_queries * (per_query + rerank),
            "embedding_variants": list(pc.variants)}


# ------------------------------------------------------------------ commands
def cmd_ingest(args, cfg: dict) -> int:
    skb = _load_skb(cfg)
    summary = {"nodes": len(skb), "edges": skb.n_edges,
               "node_types": {t: len(skb.nodes_of_type(t)) for t in sorted(skb.node_types)},
               "edge_types": {e: skb.edge_type_cardinality(e).value for e in sorted(skb.edge_types)}}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if cfg.get("out"):
        write_skb(skb, cfg["out"])
    return EXIT_OK


def cmd_embed(args, cfg: dict) -> int:
    skb = _load_skb(cfg)
    spaces_dir = cfg.get("spaces_dir") or cfg.get("out")
    if not spaces_dir:
        raise UsageError("--out (or config key 'spaces_dir') is required")
    variants = [args.variant] if args.variant else list(pipeline_config(cfg).variants)
    if args.dry_run:
        print(json.dumps({"config": cfg, "variants": variants, "nodes": len(skb)}, indent=2, sort_keys=True))
        return EXIT_OK
    embedder = build_embedder(cfg["embedding"])
    for variant in variants:
        path = _space_path(spaces_dir, variant)
        if path.exists():
            space = EmbeddingSpace.load(path)
            redone = space.refresh(skb, embedder)
        else:
            space = EmbeddingSpace.build(skb, embedder, variant)
            redone = len(space)
        space.save(path)
        print(f"{variant}: {len(space)} vectors ({redone} embedded) -> {path}")
    return EXIT_OK


def cmd_query(args, cfg: dict) -> int:
    if args.dry_run:
        print(json.dumps({"config": cfg, "planned_calls": planned_calls(cfg, 1)}, indent=2, sort_keys=True))
        return EXIT_OK
    skb = _load_skb(cfg)
    est = build_estimator(cfg).fit(skb, spaces=_load_spaces(cfg))
    (res,) = est.retrieve([QueryRecord("query", args.question)], keep_details=True)
    for i, item in enumerate(res.items, 1):
        print(f"{i:>3}  {item.node:>8}  {item.provenance:<6}  {skb.node(item.node).label}")
    print("trace: " + json.dumps(res.trace, ensure_ascii=False))
    if args.dump_extraction and res.extraction is not None:
        print("extraction: " + json.dumps(res.extraction.to_dict(), ensure_ascii=False))
    if args.trace and res.rerank is not None:
        Path(args.trace).unlink(missing_ok=True)
        write_trace(res.rerank, args.trace, res.query_id)
    return EXIT_OK


def _queries(cfg: dict, require_gold: bool) -> list[QueryRecord]:
    path = _need(cfg, "queries", "--queries")
    try:
        return read_queries(path, require_gold=require_gold)
    except FileNotFoundError:
        raise DataError(f"{path}: not found") from None


def cmd_eval(args, cfg: dict) -> int:
    queries = _queries(cfg, require_gold=True)
    if args.dry_run:
        print(json.dumps({"config": cfg, "planned_calls": planned_calls(cfg, len(queries))}, indent=2,
                         sort_keys=True))
        return EXIT_OK
    skb = _load_skb(cfg)
    est = build_estimator(cfg).fit(skb, spaces=_load_spaces(cfg))
    report, _ = run_batch(queries, est, int(cfg["parallelism"]), cfg.get("out"), args.trace)
    print(json.dumps({"aggregate": report.rounded(), "counts": report.counts}, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_axis_value(name: str, text: str):
    if name == "alpha":
        return float(Fraction(text))
    if name in ("l_max", "k"):
        return int(text)
    if name == "concealed":
        return tuple(sorted(t for t in text.split("|") if t))
    if name == "spaces":
        out = {}
        for part in text.split("+"):
            key, _, value = part.partition(":")
            out[key if key.startswith("space_") else f"space_{key}"] = value
        return out
    return text


def parse_axes(specs: Sequence[str]) -> dict[str, list]:
    axes: dict[str, list] = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        if not sep or not values:
            raise UsageError(f"--axis expects name=v1,v2,... (got {spec!r})")
        try:
            axes[name.strip()] = [_parse_axis_value(name.strip(), v.strip()) for v in values.split(",")]
        except ValueError as exc:
            raise UsageError(f"--axis {spec!r}: {exc}") from None
    return axes


def cmd_ablate(args, cfg: dict) -> int:
    try:
        grid = AblationGrid(parse_axes(args.axis or []))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    queries = _queries(cfg, require_gold=True)
    if args.dry_run:
        print(json.dumps({"config": cfg, "cells": len(grid), "planned_calls_per_cell": planned_calls(cfg, len(queries))},
                         indent=2, sort_keys=True, default=list))
        return EXIT_OK
    out = Path(cfg.get("out") or "metrics.csv")
    if out.suffix != ".csv":
        out = out / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    skb = _load_skb(cfg)
    est = build_estimator(cfg).fit(skb, spaces=_load_spaces(cfg))
    try:
        rows = run_ablation(grid, queries, est, int(cfg["parallelism"]), out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_convert_stark(args, cfg: dict) -> int:
    out = _need(cfg, "out", "--out")
    skb = convert_stark(args.input)
    write_skb(skb, out)
    print(f"{len(skb)} nodes, {skb.n_edges} edges -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------ entry
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--skb", help="directory with nodes.jsonl and edges.jsonl")
    common.add_argument("--queries", help="queries.jsonl")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--parallelism", type=int, help="concurrent queries")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and planned calls only")
    common.add_argument("--trace", help="write rerank prompt/response pairs to this JSONL file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="afr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="load and validate an SKB")
    p = sub.add_parser("embed", parents=[common], help="build or refresh embedding spaces")
    p.add_argument("--variant", choices=VARIANTS)
    p = sub.add_parser("query", parents=[common], help="answer one question")
    p.add_argument("question")
    p.add_argument("--dump-extraction", action="store_true", help="also print the parsed Cypher extraction")
    sub.add_parser("eval", parents=[common], help="batch run with metrics")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--axis", action="append", help="name=v1,v2,... (repeatable)")
    p = sub.add_parser("convert-stark", parents=[common], help="convert a STaRK-style JSON export")
    p.add_argument("input", help="export directory")
    return parser


COMMANDS = {"ingest": cmd_ingest, "embed": cmd_embed, "query": cmd_query, "eval": cmd_eval, "ablate": cmd_ablate,
            "convert-stark": cmd_convert_stark}


def dispatch(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {"skb": args.skb, "queries": args.queries, "out": args.out, "parallelism": args.parallelism}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"afr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SkbError, QueryFileError) as exc:
        print(f"afr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ProviderError, BudgetExceeded, UnmatchedPrompt) as exc:
        print(f"afr: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


def main() -> None:
    sys.exit(dispatch())
