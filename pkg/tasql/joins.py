"""Join inference: the smallest FK-connected set of tables covering a plan's tables."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import networkx as nx

from .errors import JoinInferenceError, PreconditionError
from .schema_catalog import ColumnRef, FkLink, JoinGraph

# Above this many optional tables the exact subset search gives way to the networkx approximation.
EXACT_SEARCH_LIMIT = 18


@dataclass(frozen=True)
class JoinStep:
    table: str
    link: FkLink
    via: str

    def condition(self) -> Tuple[ColumnRef, ColumnRef]:
        """(already-joined endpoint, new-table endpoint)."""
        return self.link.oriented_from(self.via)


@dataclass(frozen=True)
class JoinPath:
    anchor: str
    steps: Tuple[JoinStep, ...] = ()

    def tables(self) -> List[str]:
        return [self.anchor] + [s.table for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def _steiner_nodes(graph: JoinGraph, required: List[str], component: Iterable[str]) -> Tuple[str, ...]:
    """Fewest nodes covering `required` that induce a connected subgraph; ties go to the smallest sorted tuple."""
    optional = sorted(set(component) - set(required))
    if len(optional) > EXACT_SEARCH_LIMIT:
        tree = nx.approximation.steiner_tree(nx.Graph(graph.graph), required)
        return tuple(sorted(set(tree.nodes) | set(required)))
    for k in range(len(optional) + 1):
        best: Optional[Tuple[str, ...]] = None
        for extra in itertools.combinations(optional, k):
            nodes = tuple(sorted(required + list(extra)))
            if best is not None and nodes >= best:
                continue
            if nx.is_connected(graph.graph.subgraph(nodes)):
                best = nodes
        if best is not None:
            return best
    raise JoinInferenceError("required tables are not connected", graph.components())


def infer_join_path(required_tables: Iterable[str], graph: JoinGraph) -> JoinPath:
    required = sorted({t.lower() for t in required_tables})
    if not required:
        raise PreconditionError("no tables to join")
    missing = [t for t in required if t not in graph]
    if missing:
        raise PreconditionError(f"tables not in the join graph: {', '.join(missing)}")

    components = graph.components()
    touched = [c for c in components if set(c) & set(required)]
    if len(touched) > 1:
        listing = "; ".join("{" + ", ".join(c) + "}" for c in touched)
        raise JoinInferenceError(f"tables cannot be joined through foreign keys: {listing}", touched)

    anchor = required[0]
    if len(required) == 1:
        return JoinPath(anchor=graph.display(anchor))

    nodes = set(_steiner_nodes(graph, required, touched[0]))
    steps: List[JoinStep] = []
    visited = {anchor}
    queue = [anchor]
    while queue:
        node = queue.pop(0)
        for neighbor, link in graph.neighbors(node):
            if neighbor in nodes and neighbor not in visited:
                visited.add(neighbor)
                steps.append(JoinStep(table=graph.display(neighbor), link=link, via=graph.display(node)))
                queue.append(neighbor)
    return JoinPath(anchor=graph.display(anchor), steps=tuple(steps))
