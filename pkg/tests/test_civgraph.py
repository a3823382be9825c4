import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import graph_oracle as oracle
from tdciv.civgraph import (DagParseError, FullTimeDag, GraphError, UnknownNodeError, add_edge,
                            build_paper_dag, check_civ, civ_triple, d_separated, find_open_path,
                            parse_dag, remove_edge, history_conditioning)

A, B, C = ("A", 1), ("B", 1), ("C", 1)


def _dag(*edges, horizon=1):
    nodes = {v for e in edges for v in e}
    return FullTimeDag(nodes, edges, horizon)


def test_chain():
    g = _dag((A, B), (B, C))
    assert d_separated(g, {A}, {C}, {B})
    assert not d_separated(g, {A}, {C}, set())


def test_collider():
    g = _dag((A, B), (C, B))
    assert d_separated(g, {A}, {C}, set())
    assert not d_separated(g, {A}, {C}, {B})


def test_collider_opened_by_descendant():
    D = ("D", 1)
    g = _dag((A, B), (C, B), (B, D))
    assert not d_separated(g, {A}, {C}, {D})


def test_unknown_node():
    g = _dag((A, B))
    with pytest.raises(UnknownNodeError):
        d_separated(g, {A}, {("Q", 1)}, set())


def test_sets_must_be_disjoint():
    g = _dag((A, B), (B, C))
    with pytest.raises(ValueError):
        d_separated(g, {A}, {C}, {A})


def test_backward_edge_rejected():
    with pytest.raises(GraphError):
        _dag((("X", 2), ("W", 1)))


def test_cycle_rejected():
    with pytest.raises(GraphError):
        _dag((A, B), (B, A))


def test_outcome_is_sink():
    with pytest.raises(GraphError):
        _dag((("Y", 2), ("W", 2)))
    _dag((("Y", 2), ("Y", 3)))


# ---------------------------------------------------------------- built-in graph

def test_builtin_dag_small():
    g = build_paper_dag(2)
    assert g.has_edge(("W", 1), ("Y", 2))
    assert g.has_edge(("W", 1), ("X", 2))


@pytest.mark.parametrize("T", [2, 3, 5, 8])
def test_builtin_dag_respects_time(T):
    g = build_paper_dag(T)
    assert all(a[1] <= b[1] for a, b in g.edges)


def test_node_count_linear_in_horizon():
    counts = [len(build_paper_dag(T).nodes) for T in range(2, 8)]
    diffs = set(np.diff(counts))
    assert len(diffs) == 1


def test_proxy_edge_toggle():
    assert build_paper_dag(3).has_edge(("S", 2), ("X", 2))
    assert not build_paper_dag(3, with_proxy=False).has_edge(("S", 2), ("X", 2))


def test_remove_edge():
    g = build_paper_dag(3)
    w, y = ("W", 2), ("Y", 3)
    h = remove_edge(g, w, y)
    assert not h.has_edge(w, y) and g.has_edge(w, y)
    assert h.nodes == g.nodes
    assert add_edge(h, w, y).edges == g.edges
    with pytest.raises(GraphError):
        remove_edge(h, w, y)


def test_worked_example_t3():
    g = remove_edge(build_paper_dag(3), ("W", 2), ("Y", 3))
    cond = {("Z", 1), ("Z", 2), ("S", 1), ("W", 1), ("Y", 2)}
    assert d_separated(g, {("S", 2)}, {("Y", 3)}, cond)
    assert oracle.d_separated(g.edges, {("S", 2)}, {("Y", 3)}, cond)


@pytest.mark.parametrize("t", [2, 3])
def test_history_conditioning_valid(t):
    g = build_paper_dag(4)
    s, w, y = civ_triple(t)
    verdict = check_civ(g, s, w, y, history_conditioning(t))
    assert verdict.relevance and verdict.exclusion and verdict.non_descendant
    assert verdict.witness_path is None


def test_dropping_current_z_breaks_exclusion():
    g = build_paper_dag(4)
    s, w, y = civ_triple(3)
    cond = history_conditioning(3) - {("Z", 3)}
    verdict = check_civ(g, s, w, y, cond)
    assert not verdict.exclusion and verdict.relevance and verdict.non_descendant
    path = list(verdict.witness_path)
    assert path[0] == s and path[-1] == y
    assert ("Z", 3) in path and ("X", 3) in path
    assert oracle.path_is_open(remove_edge(g, w, y).edges, path, cond)


def test_confounder_is_not_an_instrument():
    g = build_paper_dag(4)
    _, w, y = civ_triple(3)
    observables = {v for v in g.nodes if v[0] in ("X", "W", "Y") and v not in (w, y)}
    verdict = check_civ(g, ("U", 3), w, y, observables)
    assert not verdict.exclusion


def test_descendant_of_outcome_in_conditioning():
    g = build_paper_dag(4)
    s, w, y = civ_triple(2)
    verdict = check_civ(g, s, w, y, history_conditioning(2) | {("Y", 4)})
    assert not verdict.non_descendant
    # Y[4] is also a collider on S[2] -> W[2] ... paths, so exclusion fails first
    assert not verdict.exclusion and verdict.failed == "exclusion"


def test_non_descendant_witness_is_directed_path():
    W, Y2, Y3 = ("W", 1), ("Y", 2), ("Y", 3)
    g = _dag((("S", 1), W), (W, Y2), (Y2, Y3))
    verdict = check_civ(g, ("S", 1), W, Y2, {Y3})
    assert verdict.exclusion and not verdict.non_descendant
    assert verdict.failed == "non_descendant"
    assert list(verdict.witness_path) == [Y2, Y3]


def test_irrelevant_instrument():
    g = _dag((A, ("W", 1)), (("W", 1), ("Y", 2)), (("S", 1), C))
    verdict = check_civ(g, ("S", 1), ("W", 1), ("Y", 2), set())
    assert not verdict.relevance and verdict.exclusion
    assert verdict.witness_path is not None


@pytest.mark.parametrize("T", [3, 4, 6])
def test_history_set_valid_for_every_step(T):
    g = build_paper_dag(T)
    for t in range(2, T):
        s, w, y = civ_triple(t)
        assert check_civ(g, s, w, y, history_conditioning(t)).valid


def test_witness_present_iff_failure():
    g = build_paper_dag(4)
    s, w, y = civ_triple(3)
    full = history_conditioning(3)
    for drop in sorted(full):
        v = check_civ(g, s, w, y, full - {drop})
        assert (v.witness_path is None) == v.valid


# ---------------------------------------------------------------- text format

def test_parse_roundtrip():
    g = build_paper_dag(3)
    assert parse_dag(g.to_text()) == g


def test_parse_comments_and_blank_lines():
    g = parse_dag("# header\n\nS[1] -> W[1]  # instrument\nW[1] -> Y[2]\n")
    assert g.has_edge(("S", 1), ("W", 1)) and len(g.edges) == 2


@pytest.mark.parametrize("text,line", [
    ("S[1] -> W[1]\nW[1] => Y[2]\n", 2),
    ("S[1] -> W[1]\n\nW[x] -> Y[2]\n", 3),
    ("S1 -> W[1]\n", 1),
])
def test_parse_error_has_line(text, line):
    with pytest.raises(DagParseError) as err:
        parse_dag(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


# ---------------------------------------------------------------- properties

@st.composite
def random_dags(draw):
    n = draw(st.integers(3, 8))
    nodes = [(f"V{i}", 1) for i in range(n)]
    pairs = list(itertools.combinations(range(n), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)))
    g = FullTimeDag(nodes, [(nodes[i], nodes[j]) for i, j in chosen], 1)
    a, b = draw(st.lists(st.sampled_from(nodes), min_size=2, max_size=2, unique=True))
    rest = [v for v in nodes if v not in (a, b)]
    cond = set(draw(st.lists(st.sampled_from(rest), unique=True))) if rest else set()
    return g, a, b, cond


@settings(max_examples=300, deadline=None)
@given(random_dags())
def test_reachability_agrees_with_enumeration(case):
    g, a, b, cond = case
    fast = d_separated(g, {a}, {b}, cond)
    assert fast == oracle.d_separated(g.edges, {a}, {b}, cond)
    assert fast == d_separated(g, {b}, {a}, cond)
    path = find_open_path(g, {a}, {b}, cond)
    assert (path is None) == fast
    if path is not None:
        assert oracle.path_is_open(g.edges, path, cond)


DAG4 = build_paper_dag(4)
DAG4_NODES = sorted(DAG4.nodes)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(DAG4_NODES), st.sampled_from(DAG4_NODES), st.sets(st.sampled_from(DAG4_NODES), max_size=10))
def test_builtin_graph_agrees_with_enumeration(a, b, cond):
    if a == b:
        return
    cond = cond - {a, b}
    assert d_separated(DAG4, {a}, {b}, cond) == oracle.d_separated(DAG4.edges, {a}, {b}, cond)


# ---------------------------------------------------------------- soundness against data

def _linear_gaussian_sample(g, n, seed):
    rng = np.random.default_rng(seed)
    order = sorted(g.nodes, key=lambda v: (v[1], "SUXZWY".index(v[0])))
    data = {}
    for v in order:
        x = rng.normal(size=n)
        for p in sorted(g.parents(v)):
            x += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * data[p]
        data[v] = (x - x.mean()) / x.std()
    return data


def _partial_corr(data, a, b, cond):
    n = len(data[a])
    Z = np.column_stack([np.ones(n)] + [data[c] for c in sorted(cond)])
    ra = data[a] - Z @ np.linalg.lstsq(Z, data[a], rcond=None)[0]
    rb = data[b] - Z @ np.linalg.lstsq(Z, data[b], rcond=None)[0]
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))


DAG3 = build_paper_dag(3)
SAMPLE3 = _linear_gaussian_sample(DAG3, 20000, seed=7)
DAG3_NODES = sorted(DAG3.nodes)


def _local_markov_cases(g):
    # every node is independent of its non-descendants given its parents
    for v in sorted(g.nodes):
        desc = g.descendants(v)
        pa = set(g.parents(v))
        for u in sorted(g.nodes - desc - pa - {v}):
            yield v, u, pa


def test_local_markov_independences_hold_in_data():
    cases = list(_local_markov_cases(DAG3))
    assert len(cases) > 50
    for v, u, pa in cases:
        assert d_separated(DAG3, {v}, {u}, pa)
        assert abs(_partial_corr(SAMPLE3, v, u, pa)) <= 0.05


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(DAG3_NODES), st.sampled_from(DAG3_NODES), st.sets(st.sampled_from(DAG3_NODES), max_size=8))
def test_d_separations_hold_in_data(a, b, cond):
    if a == b:
        return
    cond = cond - {a, b}
    if d_separated(DAG3, {a}, {b}, cond):
        assert abs(_partial_corr(SAMPLE3, a, b, cond)) <= 0.05
