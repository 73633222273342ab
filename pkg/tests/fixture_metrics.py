"""Twelve hand-scored queries (plus one without gold) for the metrics code."""

from fractions import Fraction as F

from afretriever.pipeline import AnswerItem, RankedAnswers

# id, gold, answers, error, expected (hit@1, hit@5, hit@20, recall@20, rr)
CASES = [
    ("m01", {1}, [1, 2, 3], False, (1, 1, 1, 1, 1)),
    ("m02", {1}, [2, 1, 3], False, (0, 1, 1, 1, F(1, 2))),
    ("m03", {1, 2}, [3, 4, 5, 6, 7, 1], False, (0, 0, 1, F(1, 2), F(1, 6))),
    ("m04", {9}, list(range(1, 21)), False, (0, 0, 1, 1, F(1, 9))),
    ("m05", {99}, list(range(1, 21)), False, (0, 0, 0, 0, 0)),
    ("m06", {1, 2, 3}, [1, 2], False, (1, 1, 1, F(2, 3), 1)),
    ("m07", {5}, [], False, (0, 0, 0, 0, 0)),
    ("m08", {4, 5}, [6, 5, 4], False, (0, 1, 1, 1, F(1, 2))),
    ("m09", {20}, list(range(1, 21)), False, (0, 0, 1, 1, F(1, 20))),
    ("m10", {3}, [7, 8, 3], False, (0, 1, 1, 1, F(1, 3))),
    ("m11", {1, 2, 3, 4}, [4], False, (1, 1, 1, F(1, 4), 1)),
    ("m12", {1}, [1], True, (0, 0, 0, 0, 0)),
]

# aggregate percentages, summed by hand from the rows above
EXPECTED = {
    "hit@1": F(3, 12) * 100,
    "hit@5": F(6, 12) * 100,
    "hit@20": F(9, 12) * 100,
    "recall@20": F(89, 12) / 12 * 100,
    "mrr": F(839, 180) / 12 * 100,
}


def results():
    out = []
    for qid, _, answers, error, _ in CASES:
        items = [AnswerItem(v, "vector", 0.0) for v in answers]
        out.append(RankedAnswers(qid, items, {"skipped_graph": False}, error="boom" if error else None))
    out.append(RankedAnswers("m13", [AnswerItem(1, "vector", 0.0)], {"skipped_graph": True}))
    return out


def gold():
    return {qid: g for qid, g, _, _, _ in CASES}
