"""Query logic dependency graphs and their rank-grouped execution plans.

A graph holds the subproblems a query was decomposed into, plus edges
``(from, to)`` meaning ``to`` needs the answer of ``from``. The plan groups
nodes by level (longest path from any root), which is the unit of graph
pruning: every node in a group can be retrieved for in one round.

Graphs and plans are immutable; augmentation returns new values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_MAX_NODES = 16

DECOMPOSITION = "decomposition"
AUGMENTATION = "augmentation"


class DagError(ValueError):
    """Base class for graph construction and scheduling errors."""


class EmptyDecomposition(DagError):
    pass


class InvalidEdge(DagError):
    pass


class EmptySubproblemText(DagError):
    pass


class UnknownNode(DagError, KeyError):
    pass


class UnknownParent(UnknownNode):
    pass


class UnresolvedParent(DagError):
    pass


class GraphTooLarge(DagError):
    pass


class CycleError(DagError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


@dataclass(frozen=True)
class Subproblem:
    id: str
    text: str
    origin: str = DECOMPOSITION


@dataclass(frozen=True)
class DependencyGraph:
    nodes: tuple[Subproblem, ...]
    edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise DagError(f"duplicate node ids in {ids}")
        known = set(ids)
        seen = set()
        for u, v in self.edges:
            if u == v:
                raise InvalidEdge(f"self-loop on {u}")
            if u not in known or v not in known:
                raise InvalidEdge(f"edge ({u}, {v}) references an unknown node")
            if (u, v) in seen:
                raise InvalidEdge(f"duplicate edge ({u}, {v})")
            seen.add((u, v))

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Subproblem:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownNode(node_id)

    def __contains__(self, node_id: object) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class ExecutionPlan:
    rank_groups: tuple[tuple[str, ...], ...]
    rank_of: dict[str, int] = field(hash=False)

    @property
    def order(self) -> list[str]:
        """Flattened linear order; each node appears once."""
        return [v for group in self.rank_groups for v in group]

    def __len__(self) -> int:
        return len(self.rank_groups)


def build_graph(
    subproblems: Sequence[str],
    dependencies: Iterable[tuple[int, int]] = (),
    *,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> DependencyGraph:
    """Create a graph from decomposed subproblem texts and index pairs.

    Node ids are ``p1..pn`` in input order. A pair ``(i, j)`` means
    subproblem ``j`` depends on subproblem ``i``.
    """
    if not subproblems:
        raise EmptyDecomposition("decomposition produced no subproblems")
    if len(subproblems) > max_nodes:
        raise GraphTooLarge(f"{len(subproblems)} subproblems exceeds the cap of {max_nodes}")
    nodes = []
    for i, text in enumerate(subproblems):
        if not isinstance(text, str) or not text.strip():
            raise EmptySubproblemText(f"subproblem {i} has empty text")
        nodes.append(Subproblem(f"p{i + 1}", text.strip()))

    n = len(nodes)
    edges: list[tuple[str, str]] = []
    for pair in dependencies:
        i, j = pair
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidEdge(f"edge {tuple(pair)} out of bounds for {n} subproblems")
        if i == j:
            raise InvalidEdge(f"self-loop on subproblem {i}")
        edge = (nodes[i].id, nodes[j].id)
        if edge in edges:
            raise InvalidEdge(f"duplicate edge {tuple(pair)}")
        edges.append(edge)
    return DependencyGraph(tuple(nodes), tuple(edges))


def parents_of(g: DependencyGraph, node_id: str) -> list[str]:
    """Parents of ``node_id`` in node insertion order."""
    if node_id not in g:
        raise UnknownNode(node_id)
    parents = {u for u, v in g.edges if v == node_id}
    return [i for i in g.ids if i in parents]


def children_of(g: DependencyGraph, node_id: str) -> list[str]:
    if node_id not in g:
        raise UnknownNode(node_id)
    children = {v for u, v in g.edges if u == node_id}
    return [i for i in g.ids if i in children]


def check_acyclic(g: DependencyGraph) -> None:
    """Raise :class:`CycleError` with one witness cycle if ``g`` has a cycle.

    Iterative DFS in insertion order; the witness starts and ends at the
    node the back edge points to, e.g. ``[a, b, c, a]``.
    """
    succ = {i: children_of(g, i) for i in g.ids}
    white, grey, black = 0, 1, 2
    color = dict.fromkeys(g.ids, white)
    for root in g.ids:
        if color[root] != white:
            continue
        path = [root]
        stack = [iter(succ[root])]
        color[root] = grey
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                color[path.pop()] = black
                stack.pop()
            elif color[nxt] == grey:
                start = path.index(nxt)
                raise CycleError(path[start:] + [nxt])
            elif color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                stack.append(iter(succ[nxt]))


def build_plan(g: DependencyGraph) -> ExecutionPlan:
    """Level-schedule ``g``: rank 0 for roots, else 1 + max parent rank."""
    check_acyclic(g)
    rank: dict[str, int] = {}
    # Kahn's algorithm; a node's rank is final once all its parents are done.
    indegree = {i: 0 for i in g.ids}
    for _, v in g.edges:
        indegree[v] += 1
    ready = [i for i in g.ids if indegree[i] == 0]
    for i in ready:
        rank[i] = 0
    while ready:
        u = ready.pop()
        for v in children_of(g, u):
            rank[v] = max(rank.get(v, 0), rank[u] + 1)
            indegree[v] -= 1
            if indegree[v] == 0:
                ready.append(v)

    depth = max(rank.values()) + 1
    groups = tuple(tuple(i for i in g.ids if rank[i] == r) for r in range(depth))
    return ExecutionPlan(groups, {i: rank[i] for i in g.ids})


def augment_graph(
    g: DependencyGraph,
    plan: ExecutionPlan,
    new_subproblem: str,
    parents: Sequence[str] = (),
    *,
    current_rank: int | None = None,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> tuple[DependencyGraph, ExecutionPlan]:
    """Append a subproblem discovered mid-run as a new trailing rank.

    The new node always gets its own group after the current final group,
    whatever its parents' ranks; existing ranks never move. If
    ``current_rank`` is given, every parent must already be resolved.
    """
    text = new_subproblem.strip() if isinstance(new_subproblem, str) else ""
    if not text:
        raise EmptySubproblemText("augmented subproblem has empty text")
    for p in parents:
        if p not in g:
            raise UnknownParent(p)
        if current_rank is not None and plan.rank_of[p] > current_rank:
            raise UnresolvedParent(f"parent {p} has rank {plan.rank_of[p]} > {current_rank}")
    if len(g) >= max_nodes:
        raise GraphTooLarge(f"graph already has {len(g)} nodes (cap {max_nodes})")

    new_id = _fresh_id(g)
    node = Subproblem(new_id, text, AUGMENTATION)
    edges = g.edges + tuple((p, new_id) for p in dict.fromkeys(parents))
    graph = DependencyGraph(g.nodes + (node,), edges)
    rank_of = dict(plan.rank_of)
    rank_of[new_id] = len(plan.rank_groups)
    return graph, ExecutionPlan(plan.rank_groups + ((new_id,),), rank_of)


def _fresh_id(g: DependencyGraph) -> str:
    k = len(g) + 1
    while f"p{k}" in g:
        k += 1
    return f"p{k}"


def graph_to_record(g: DependencyGraph, plan: ExecutionPlan | None = None) -> dict:
    """JSON-ready form used inside run traces."""
    nodes = []
    for n in g.nodes:
        rec = {"id": n.id, "text": n.text, "origin": n.origin}
        rec["rank"] = plan.rank_of.get(n.id) if plan is not None else None
        nodes.append(rec)
    return {"nodes": nodes, "edges": [{"from": u, "to": v} for u, v in g.edges]}


def graph_from_record(record: dict) -> tuple[DependencyGraph, ExecutionPlan | None]:
    nodes = tuple(Subproblem(n["id"], n["text"], n.get("origin", DECOMPOSITION)) for n in record["nodes"])
    graph = DependencyGraph(nodes, tuple((e["from"], e["to"]) for e in record["edges"]))
    ranks = {n["id"]: n.get("rank") for n in record["nodes"]}
    if any(r is None for r in ranks.values()):
        return graph, None
    depth = max(ranks.values()) + 1
    groups = tuple(tuple(i for i in graph.ids if ranks[i] == r) for r in range(depth))
    return graph, ExecutionPlan(groups, ranks)
