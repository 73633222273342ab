import random

import pytest
from hypothesis import given, settings, strategies as st

import fixture_skb
import oracles
from afretriever.cypherlite import AttributeFilter, CypherExtraction, SymbolSpec, Triplet, parse_cypher
from afretriever.grounding import (CandidateSet, CandidateTable, apply_filters, expand_scope, filter_matches,
                                   ground_triplets, propagate, retrieve_symbol_candidates, round_half_up,
                                   scope_schedule)


@pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (13.333, 13), (12.5, 13), (0.49, 0)])
def test_round_half_up(x, expected):
    assert round_half_up(x) == expected


class TestFilters:
    @pytest.mark.parametrize("year,ok", [(2011, False), (2012, True), (2013, True)])
    def test_year_boundary(self, year, ok):
        assert filter_matches(AttributeFilter("publication_year", "ge", 2012), year) is ok

    @pytest.mark.parametrize("op,value,attr,ok", [
        ("eq", 2015, "2015", True),
        ("lt", 10, 9.5, True),
        ("gt", "2020-01-02", "2020-01-10", True),
        ("le", "2020-01-02", "2020-01-10", False),
        ("eq", "Nature", "nature", True),
        ("contains", "bio", "Molecular Biology", True),
        ("gt", "abc", "abd", False),
        ("eq", 1, None, False),
    ])
    def test_comparisons(self, op, value, attr, ok):
        assert filter_matches(AttributeFilter("x", op, value), attr) is ok

    def test_matches_linear_scan(self, skb):
        papers = skb.nodes_of_type("paper")
        got = apply_filters(skb, papers, [AttributeFilter("publication_year", "eq", 2015)])
        scan = {n.id for n in skb.nodes() if n.node_type == "paper" and n.attributes["publication_year"] == 2015}
        assert got == scan and len(scan) == 7

    @settings(max_examples=60, deadline=None)
    @given(op=st.sampled_from(["eq", "lt", "le", "gt", "ge"]), year=st.integers(2008, 2021))
    def test_applied_filters_are_exact(self, skb, embedder, spaces, op, year):
        flt = AttributeFilter("publication_year", op, year)
        ext = CypherExtraction("p", "paper", [], {"p": SymbolSpec("p", "paper", filters=[flt])}, empty=False)
        table = retrieve_symbol_candidates(ext, skb, spaces["text_only"], embedder, 100)
        pyop = {"eq": "__eq__", "lt": "__lt__", "le": "__le__", "gt": "__gt__", "ge": "__ge__"}[op]
        expected = {v for v in skb.nodes_of_type("paper")
                    if getattr(skb.node(v).attributes["publication_year"], pyop)(year)}
        if expected:
            assert table["p"].members == expected
        else:
            # a variable whose filter matches nothing has no candidates
            assert table["p"].members == frozenset()


class TestRunningExample:
    @pytest.fixture
    def setup(self, skb, embedder, spaces):
        ext = parse_cypher(fixture_skb.RUNNING_CYPHER, skb.node_types, skb.edge_types)
        table = retrieve_symbol_candidates(ext, skb, spaces["text_only"], embedder, 100)
        return ext, table

    def test_constant_candidates(self, setup, label_of):
        _, table = setup
        assert [label_of(v) for v in table["i"].order[:3]] == [
            "University of Miami", "Miami University", "Miami Dade College"]

    @pytest.mark.parametrize("l,expected", [(1, set()), (2, {"RNA Transcription", "Review on Ribosomes"})])
    def test_grounding_by_scope(self, setup, skb, label_of, l, expected):
        ext, table = setup
        got = ground_triplets(ext.triplets, table.sliced(l), "p", skb)
        assert {label_of(v) for v in got} == expected

    def test_expansion_trace(self, setup, skb):
        ext, table = setup
        out = expand_scope(ext, table, "p", skb, k=20, l_max=100)
        assert [t["effective_count"] for t in out.trace] == [1, 2, 4, 9, 26, 100]
        assert out.iterations == 6
        assert out.final_l == pytest.approx(134.98, abs=0.01)

    def test_single_call_when_k_met(self, setup, skb):
        ext, table = setup
        out = expand_scope(ext, table, "p", skb, k=1, l_max=100)
        assert out.iterations == 1 or out.trace[0]["c_cypher"] == 0
        out = expand_scope(ext, table, "p", skb, k=2, l_max=100)
        assert [t["effective_count"] for t in out.trace] == [1, 2]

    def test_missing_target(self, setup, skb):
        ext, table = setup
        with pytest.raises(KeyError):
            ground_triplets(ext.triplets, table, "zz", skb)


@pytest.mark.parametrize("l_max,expected", [
    (100, [1, 2, 4, 9, 26, 100]), (1, [1]), (3, [1, 2, 3]), (10, [1, 2, 4, 9, 10]), (333, [1, 2, 4, 9, 26, 135, 333]),
])
def test_scope_schedule(l_max, expected):
    assert scope_schedule(l_max) == expected


def test_unknown_filter_attribute_moves_to_search_string(skb, embedder, spaces):
    spec = SymbolSpec("i", "institution", search_parts=["Miami"], filters=[AttributeFilter("country", "eq", "USA")])
    ext = CypherExtraction("i", "institution", [], {"i": spec}, empty=False)
    table = retrieve_symbol_candidates(ext, skb, spaces["text_only"], embedder, 5)
    assert table.search_strings["i"] == "Miami country USA"
    assert len(table["i"]) == 5


# --------------------------------------------------------------- properties
def _instance(seed, acyclic=True):
    rng = random.Random(seed)
    skb, edges, etypes = oracles.random_skb(rng)
    triplets, symbols = oracles.random_pattern(rng, etypes, acyclic=acyclic)
    domains = oracles.random_domains(rng, skb, symbols)
    return skb, edges, triplets, symbols, domains


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**9))
def test_acyclic_equals_join(seed):
    skb, edges, triplets, symbols, domains = _instance(seed)
    target = symbols[0]
    got = ground_triplets(triplets, {s: CandidateSet.materialized(d) for s, d in domains.items()}, target, skb,
                          "strict_both")
    assert got == oracles.join_projection(triplets, domains, edges, target)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**9))
def test_cyclic_is_superset_and_sound(seed):
    skb, edges, triplets, symbols, domains = _instance(seed, acyclic=False)
    state, _ = propagate(triplets, domains, skb, "strict_both")
    for s in symbols:
        assert state[s] <= domains[s]
        assert state[s] >= oracles.join_projection(triplets, domains, edges, s)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_propagation_is_a_fixpoint(seed):
    skb, _, triplets, _, domains = _instance(seed, acyclic=False)
    state, _ = propagate(triplets, domains, skb, "strict_both")
    again, passes = propagate(triplets, state, skb, "strict_both")
    assert again == state and passes == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_results_nested_in_scope(seed):
    rng = random.Random(seed)
    skb, _, etypes = oracles.random_skb(rng)
    triplets, symbols = oracles.random_pattern(rng, etypes, acyclic=rng.random() < 0.5)
    ids = sorted(skb.node_ids)
    entries = {}
    for s in symbols:
        if rng.random() < 0.5:
            order = rng.sample(ids, len(ids))
            entries[s] = CandidateSet.ranked((v, 1.0 - i / len(order)) for i, v in enumerate(order))
        else:
            entries[s] = CandidateSet.universe(skb, None)
    table = CandidateTable(entries)
    prev = frozenset()
    for l in range(1, 11):
        got = ground_triplets(triplets, table.sliced(l), symbols[0], skb, "strict_both")
        assert prev <= got
        prev = got


def test_wildcard_edge_in_lenient_mode(skb, node_of):
    trip = [Triplet("a", "authored", "p")]
    sets = {"a": frozenset({node_of("Bob Ito")}), "p": skb.nodes_of_type("paper")}
    lenient, _ = propagate(trip, sets, skb, "lenient")
    strict, _ = propagate(trip, sets, skb, "strict_both")
    assert {skb.node(v).label for v in lenient["p"]} == {
        "Quantum Error Codes", "Superconducting Qubits", "Statistical Physics of Reef Growth"}
    assert strict["p"] == frozenset()
