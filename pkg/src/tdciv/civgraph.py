"""Full-time DAGs, d-separation and the time-varying CIV conditions.

Nodes are ``(name, t)`` pairs and print as ``name[t]``. The outcome caused at
step t lives at time t + 1, so ``Y[t+1]`` is the child of ``W[t]``.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

Node = tuple  # (name, t)

OUTCOME = "Y"


class GraphError(ValueError):
    pass


class UnknownNodeError(KeyError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"unknown node {fmt(node)}")


class DagParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def fmt(node: Node) -> str:
    return f"{node[0]}[{node[1]}]"


_NODE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*\[\s*(-?\d+)\s*\]\s*$")


def parse_node(text: str) -> Node:
    m = _NODE_RE.match(text)
    if not m:
        raise ValueError(f"malformed node {text.strip()!r}; expected name[t]")
    return (m.group(1), int(m.group(2)))


class FullTimeDag:
    """Immutable DAG over (variable, time) nodes."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[tuple[Node, Node]], horizon: int):
        self.nodes = frozenset(nodes)
        self.edges = frozenset(edges)
        self.horizon = horizon
        parents: dict = {v: set() for v in self.nodes}
        children: dict = {v: set() for v in self.nodes}
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise GraphError(f"edge {fmt(a)} -> {fmt(b)} uses a node outside the node set")
            if a[1] > b[1]:
                raise GraphError(f"edge {fmt(a)} -> {fmt(b)} points backwards in time")
            if a[0] == OUTCOME and b[0] != OUTCOME:
                raise GraphError(f"outcome node {fmt(a)} must be a sink apart from later outcomes")
            children[a].add(b)
            parents[b].add(a)
        self._parents = {v: frozenset(s) for v, s in parents.items()}
        self._children = {v: frozenset(s) for v, s in children.items()}
        self._check_acyclic()

    def _check_acyclic(self):
        indeg = {v: len(p) for v, p in self._parents.items()}
        queue = deque(v for v, d in indeg.items() if d == 0)
        seen = 0
        while queue:
            v = queue.popleft()
            seen += 1
            for c in self._children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if seen != len(self.nodes):
            raise GraphError("graph has a directed cycle")

    def _require(self, node):
        if node not in self.nodes:
            raise UnknownNodeError(node)

    def parents(self, node) -> frozenset:
        self._require(node)
        return self._parents[node]

    def children(self, node) -> frozenset:
        self._require(node)
        return self._children[node]

    def has_edge(self, a, b) -> bool:
        return (a, b) in self.edges

    def descendants(self, node) -> set:
        """Strict descendants of ``node``."""
        self._require(node)
        out, stack = set(), [node]
        while stack:
            for c in self._children[stack.pop()]:
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def ancestors(self, nodes: Iterable[Node]) -> set:
        """``nodes`` together with all their ancestors."""
        out = set()
        stack = list(nodes)
        for v in stack:
            self._require(v)
        while stack:
            v = stack.pop()
            if v in out:
                continue
            out.add(v)
            stack.extend(self._parents[v])
        return out

    def neighbours(self, node) -> frozenset:
        return self._parents[node] | self._children[node]

    def sorted_nodes(self) -> list:
        return sorted(self.nodes, key=lambda v: (v[1], v[0]))

    def to_text(self) -> str:
        lines = [f"{fmt(a)} -> {fmt(b)}" for a, b in sorted(self.edges, key=lambda e: (e[0][1], e[0][0], e[1][1], e[1][0]))]
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, FullTimeDag) and self.nodes == other.nodes and self.edges == other.edges

    def __hash__(self):
        return hash((self.nodes, self.edges))

    def __repr__(self):
        return f"FullTimeDag(horizon={self.horizon}, nodes={len(self.nodes)}, edges={len(self.edges)})"


# ---------------------------------------------------------------- builders

# (source, target, lag in steps). Step t of the outcome is the node Y[t+1],
# so ("W", "Y", 0) is W[t] -> Y[t+1].
PAPER_EDGES = [
    ("S", "W", 0), ("Z", "W", 0), ("U", "W", 0),
    ("Z", "Y", 0), ("U", "Y", 0), ("W", "Y", 0),
    ("X", "Z", 0),
    # own next state
    ("X", "X", 1), ("U", "U", 1), ("S", "S", 1), ("Z", "Z", 1), ("W", "W", 1), ("Y", "Y", 1),
    # treatment feeds every later state
    ("W", "X", 1), ("W", "U", 1), ("W", "S", 1), ("W", "Z", 1), ("W", "Y", 1),
]
PROXY_EDGES = [("S", "X", 0)]


def node_at(name: str, step: int) -> Node:
    return (name, step + 1) if name == OUTCOME else (name, step)


def build_from_templates(horizon: int, templates: Iterable[tuple[str, str, int]]) -> FullTimeDag:
    """Unroll lagged edge templates over steps 1..horizon."""
    if horizon < 1:
        raise GraphError(f"horizon must be >= 1, got {horizon}")
    templates = list(templates)
    names = sorted({n for a, b, _ in templates for n in (a, b)})
    nodes = {node_at(name, t) for name in names for t in range(1, horizon + 1)}
    edges = set()
    for a, b, lag in templates:
        for t in range(1, horizon + 1 - lag):
            edges.add((node_at(a, t), node_at(b, t + lag)))
    return FullTimeDag(nodes, edges, horizon)


def build_paper_dag(horizon: int, with_proxy: bool = True) -> FullTimeDag:
    """Unrolled graph of the latent-CIV model.

    With ``with_proxy`` the measured covariates X_t carry a noisy copy of S_t,
    i.e. the edge S_t -> X_t.
    """
    if horizon < 2:
        raise GraphError(f"horizon must be >= 2, got {horizon}")
    return build_from_templates(horizon, PAPER_EDGES + (PROXY_EDGES if with_proxy else []))


def remove_edge(g: FullTimeDag, a: Node, b: Node) -> FullTimeDag:
    if (a, b) not in g.edges:
        raise GraphError(f"no edge {fmt(a)} -> {fmt(b)}")
    return FullTimeDag(g.nodes, g.edges - {(a, b)}, g.horizon)


def add_edge(g: FullTimeDag, a: Node, b: Node) -> FullTimeDag:
    return FullTimeDag(g.nodes | {a, b}, g.edges | {(a, b)}, g.horizon)


# ---------------------------------------------------------------- text format

def parse_dag(text: str) -> FullTimeDag:
    """One ``name[t] -> name[t+k]`` edge per line; ``#`` starts a comment."""
    nodes, edges = set(), set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("->")
        if len(parts) != 2:
            raise DagParseError(lineno, f"expected 'name[t] -> name[t]', got {raw.strip()!r}")
        try:
            a, b = parse_node(parts[0]), parse_node(parts[1])
        except ValueError as exc:
            raise DagParseError(lineno, str(exc)) from None
        if a == b:
            raise DagParseError(lineno, f"self-loop on {fmt(a)}")
        nodes.update((a, b))
        edges.add((a, b))
    if not edges:
        raise DagParseError(0, "no edges found")
    steps = [t for name, t in nodes if name != OUTCOME] or [t - 1 for _, t in nodes]
    try:
        return FullTimeDag(nodes, edges, max(steps))
    except GraphError as exc:
        raise DagParseError(0, str(exc)) from None


def read_dag(path) -> FullTimeDag:
    return parse_dag(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- d-separation

def _check_sets(g, A, B, C):
    A, B, C = set(A), set(B), set(C)
    for v in A | B | C:
        g._require(v)
    if A & B or A & C or B & C:
        raise ValueError("A, B and C must be disjoint")
    return A, B, C


def reachable(g: FullTimeDag, A: Iterable[Node], C: Iterable[Node]) -> set:
    """Nodes d-connected to some member of A given C (reachability algorithm)."""
    C = set(C)
    anc = g.ancestors(C)
    # state: (node, arrived_from_child)
    queue = deque((a, True) for a in A)
    visited, out = set(), set()
    while queue:
        v, up = queue.popleft()
        if (v, up) in visited:
            continue
        visited.add((v, up))
        if v not in C:
            out.add(v)
        if up and v not in C:
            queue.extend((p, True) for p in g._parents[v])
            queue.extend((c, False) for c in g._children[v])
        elif not up:
            if v not in C:
                queue.extend((c, False) for c in g._children[v])
            if v in anc:
                queue.extend((p, True) for p in g._parents[v])
    return out


def d_separated(g: FullTimeDag, A, B, C=()) -> bool:
    A, B, C = _check_sets(g, A, B, C)
    return not (reachable(g, A, C) & B)


def _triple_open(g, prev, mid, nxt, C, anc) -> bool:
    collider = prev in g._parents[mid] and nxt in g._parents[mid]
    return (mid in anc) if collider else (mid not in C)


def find_open_path(g: FullTimeDag, A, B, C=()) -> list | None:
    """An open simple path from A to B given C, or None.

    Depth-first over simple paths, dropping a prefix as soon as it is
    blocked. Only nodes d-connected to A are explored.
    """
    A, B, C = _check_sets(g, A, B, C)
    reach = reachable(g, A, C)
    if not reach & B:
        return None
    anc = g.ancestors(C)
    allowed = reach | anc | set(A)
    for a in sorted(A):
        path, on_path = [a], {a}

        def dfs():
            v = path[-1]
            for nb in sorted(g.neighbours(v)):
                if nb in on_path or nb not in allowed:
                    continue
                if len(path) >= 2 and not _triple_open(g, path[-2], v, nb, C, anc):
                    continue
                if nb in B:
                    return path + [nb]
                if nb in C and nb not in anc:
                    continue
                path.append(nb)
                on_path.add(nb)
                found = dfs()
                if found:
                    return found
                on_path.discard(path.pop())
            return None

        found = dfs()
        if found:
            return found
    return None


def directed_path(g: FullTimeDag, src: Node, dst: Node) -> list | None:
    """Some directed path src -> ... -> dst (breadth-first, so shortest)."""
    g._require(src)
    g._require(dst)
    prev = {src: None}
    queue = deque([src])
    while queue:
        v = queue.popleft()
        if v == dst and v != src:
            break
        for c in sorted(g._children[v]):
            if c not in prev:
                prev[c] = v
                queue.append(c)
    if dst not in prev or dst == src:
        return None
    out = [dst]
    while out[-1] != src:
        out.append(prev[out[-1]])
    return out[::-1]


# ---------------------------------------------------------------- CIV checks

@dataclass(frozen=True)
class CivVerdict:
    relevance: bool
    exclusion: bool
    non_descendant: bool
    witness_path: tuple | None = None
    failed: str | None = None

    @property
    def valid(self) -> bool:
        return self.relevance and self.exclusion and self.non_descendant

    def to_dict(self) -> dict:
        return {
            "relevance": self.relevance,
            "exclusion": self.exclusion,
            "non_descendant": self.non_descendant,
            "valid": self.valid,
            "failed": self.failed,
            "witness_path": None if self.witness_path is None else [fmt(v) for v in self.witness_path],
        }


def check_civ(g: FullTimeDag, s: Node, w: Node, y: Node, cond: Iterable[Node]) -> CivVerdict:
    """Test the three conditions for ``s`` to instrument ``w -> y`` given ``cond``.

    The witness, reported for the first failing condition in the order
    exclusion, non-descendant, relevance, is respectively: an open s..y path
    in the graph without w -> y; a directed path from y into the conditioning
    set; the pair (s, w), which no open path joins.
    """
    cond = set(cond)
    for v in (s, w, y):
        g._require(v)
    if cond & {s, w, y}:
        raise ValueError("conditioning set must exclude s, w and y")
    relevance = not d_separated(g, {s}, {w}, cond)
    manipulated = remove_edge(g, w, y) if g.has_edge(w, y) else g
    witness = find_open_path(manipulated, {s}, {y}, cond)
    exclusion = witness is None
    desc = g.descendants(y)
    offending = sorted(cond & desc, key=lambda v: (v[1], v[0]))
    non_descendant = not offending
    failed = None
    if not exclusion:
        failed = "exclusion"
    elif not non_descendant:
        failed, witness = "non_descendant", directed_path(g, y, offending[0])
    elif not relevance:
        failed, witness = "relevance", [s, w]
    return CivVerdict(relevance, exclusion, non_descendant,
                      None if witness is None else tuple(witness), failed)


def history_conditioning(t: int) -> set:
    """{Z_1..Z_t, S_1..S_{t-1}, W_1..W_{t-1}, Y_2..Y_t} for the instrument S_t."""
    cond = {("Z", k) for k in range(1, t + 1)}
    cond |= {("S", k) for k in range(1, t)}
    cond |= {("W", k) for k in range(1, t)}
    cond |= {("Y", k) for k in range(2, t + 1)}
    return cond


def civ_triple(t: int) -> tuple[Node, Node, Node]:
    return ("S", t), ("W", t), ("Y", t + 1)
