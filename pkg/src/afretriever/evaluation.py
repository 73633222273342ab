"""Retrieval metrics, batch runs and ablation grids."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from sklearn.base import clone

from .pipeline import QueryRecord, RankedAnswers, normalize_steps
from .validation import check_query

logger = logging.getLogger(__name__)

HIT_MS = (1, 5, 20)
RECALL_MS = (20,)
METRIC_NAMES = ("hit@1", "hit@5", "hit@20", "recall@20", "mrr")


class QueryFileError(ValueError):
    """A queries file is malformed."""


def read_queries(path: str | Path, require_gold: bool = False) -> list[QueryRecord]:
    out: list[QueryRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("expected a JSON object")
                if "id" not in rec:
                    raise ValueError("missing 'id'")
                q = check_query(rec, lineno)
            except (ValueError, TypeError) as exc:
                raise QueryFileError(f"{path}:{lineno}: {exc}") from None
            if require_gold and q.gold is None:
                raise QueryFileError(f"{path}:{lineno}: query {q.id!r} has no answer_ids")
            if q.id in seen:
                raise QueryFileError(f"{path}:{lineno}: duplicate query id {q.id!r}")
            seen.add(q.id)
            out.append(q)
    return out


# ------------------------------------------------------------------ metrics
def hit_at(answers: Sequence[int], gold: frozenset[int], m: int) -> float:
    return 1.0 if any(a in gold for a in answers[:m]) else 0.0


def recall_at(answers: Sequence[int], gold: frozenset[int], m: int) -> float:
    return len(set(answers[:m]) & gold) / len(gold)


def reciprocal_rank(answers: Sequence[int], gold: frozenset[int]) -> float:
    for i, a in enumerate(answers):
        if a in gold:
            return 1.0 / (i + 1)
    return 0.0


@dataclass
class MetricsReport:
    """Per-query metrics as fractions, aggregates as percentages."""

    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def rounded(self, digits: int = 1) -> dict[str, float]:
        return {k: round(v, digits) for k, v in self.aggregate.items()}


def compute_metrics(results: Iterable[RankedAnswers], gold: Sequence[QueryRecord] | Mapping[str, Iterable[int]],
                    hit_ms: Sequence[int] = HIT_MS, recall_ms: Sequence[int] = RECALL_MS) -> MetricsReport:
    """Score ranked answers against gold sets.

    Queries without gold are skipped and counted; failed queries score zero
    everywhere and are counted separately.
    """
    if isinstance(gold, Mapping):
        gold_of = {str(k): frozenset(v) for k, v in gold.items()}
    else:
        gold_of = {q.id: q.gold for q in gold if q.gold is not None}
    report = MetricsReport()
    counts = {"processed": 0, "evaluated": 0, "no_gold": 0, "errors": 0, "skipped_graph": 0}
    for res in results:
        counts["processed"] += 1
        if res.error is not None:
            counts["errors"] += 1
        if res.trace.get("skipped_graph"):
            counts["skipped_graph"] += 1
        g = gold_of.get(res.query_id)
        if not g:
            counts["no_gold"] += 1
            continue
        counts["evaluated"] += 1
        answers = [] if res.error is not None else res.nodes
        row = {f"hit@{m}": hit_at(answers, g, m) for m in hit_ms}
        row.update({f"recall@{m}": recall_at(answers, g, m) for m in recall_ms})
        row["rr"] = reciprocal_rank(answers, g)
        report.per_query[res.query_id] = row
    names = [f"hit@{m}" for m in hit_ms] + [f"recall@{m}" for m in recall_ms]
    n = counts["evaluated"]
    for name in names:
        report.aggregate[name] = 100.0 * sum(r[name] for r in report.per_query.values()) / n if n else 0.0
    report.aggregate["mrr"] = 100.0 * sum(r["rr"] for r in report.per_query.values()) / n if n else 0.0
    report.counts = counts
    return report


# ------------------------------------------------------------------ batch
def write_results(results: Iterable[RankedAnswers], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for res in results:
            fh.write(json.dumps(res.to_record(), ensure_ascii=False) + "\n")


def run_batch(queries: Sequence[QueryRecord], estimator, parallelism: int = 1, out_dir: str | Path | None = None,
              trace_path: str | Path | None = None) -> tuple[MetricsReport, list[RankedAnswers]]:
    """Answer every query with a fitted estimator and score the answers.

    Failing queries are recorded and the run continues. With ``out_dir`` the
    answers go to ``results.jsonl`` in query order and the aggregate to
    ``metrics.json``.
    """
    results = estimator.retrieve(queries, parallelism=parallelism, errors="record")
    report = compute_metrics(results, queries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results(results, out_dir / "results.jsonl")
        with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({"aggregate": report.rounded(), "counts": report.counts}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if trace_path is not None:
        from .rerank import write_trace

        Path(trace_path).unlink(missing_ok=True)
        for res in results:
            if res.rerank is not None:
                write_trace(res.rerank, trace_path, res.query_id)
    return report, results


# ------------------------------------------------------------------ ablation
_AXIS_PARAMS = {"steps": "steps", "alpha": "alpha", "l_max": "l_max", "mode": "mode", "reranker": "reranker",
                "concealed": "concealed_node_types", "k": "k"}
AXES = tuple(_AXIS_PARAMS) + ("spaces",)


@dataclass
class AblationGrid:
    """Cartesian grid over pipeline settings.

    ``axes`` maps an axis name to its values. ``spaces`` values are dicts
    such as ``{"space_step7": "text_only"}``; ``concealed`` values are
    collections of node types. Cells are enumerated in axis order, the last
    axis varying fastest.
    """

    axes: dict[str, list] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.axes:
            raise ValueError("the ablation grid has no axes")
        for name, values in self.axes.items():
            if name not in AXES:
                raise ValueError(f"unknown ablation axis {name!r}; expected one of {AXES}")
            if not values:
                raise ValueError(f"axis {name!r} has no values")
        if "steps" in self.axes:
            self.axes["steps"] = [normalize_steps(s) for s in self.axes["steps"]]

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def __len__(self) -> int:
        n = 1
        for values in self.axes.values():
            n *= len(values)
        return n


def cell_params(cell: Mapping[str, object]) -> dict:
    params: dict = {}
    for name, value in cell.items():
        if name == "spaces":
            params.update(dict(value))  # type: ignore[arg-type]
        elif name == "concealed":
            params["concealed_node_types"] = tuple(sorted(value))  # type: ignore[arg-type]
        else:
            params[_AXIS_PARAMS[name]] = value
    return params


def _format_cell_value(name: str, value: object) -> str:
    if name == "spaces":
        return ";".join(f"{k}={v}" for k, v in sorted(dict(value).items()))  # type: ignore[arg-type]
    if name == "concealed":
        return "|".join(sorted(value))  # type: ignore[arg-type]
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def run_ablation(grid: AblationGrid, queries: Sequence[QueryRecord], estimator, parallelism: int = 1,
                 csv_path: str | Path | None = None) -> list[tuple[dict, MetricsReport]]:
    """Run every grid cell with a clone of ``estimator``, reusing its embedding spaces."""
    rows = []
    for cell in grid.cells():
        est = clone(estimator).set_params(**cell_params(cell))
        est.fit(estimator.skb_, spaces=estimator.spaces_)
        report, _ = run_batch(queries, est, parallelism)
        logger.info("ablation cell %s: %s", cell, report.rounded())
        rows.append((cell, report))
    if csv_path is not None:
        write_metrics_csv(rows, csv_path)
    return rows


def write_metrics_csv(rows: Sequence[tuple[dict, MetricsReport]], path: str | Path) -> None:
    axis_names = list(rows[0][0]) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(axis_names + list(METRIC_NAMES))
        for cell, report in rows:
            values = [_format_cell_value(n, cell[n]) for n in axis_names]
            writer.writerow(values + [f"{report.aggregate.get(m, 0.0):.1f}" for m in METRIC_NAMES])
