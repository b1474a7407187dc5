"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

from itertools import product

import numpy as np
import pytest

from rptdetect.hetgraph import EdgeType, HetGraph, Schema
from rptdetect.matcher import RptInstance
from rptdetect.patterns import RptPattern


def tax_schema(dim: int = 2) -> Schema:
    return Schema(
        node_types={"company": dim, "person": dim, "item": dim, "event": dim},
        edge_types={
            "transaction": EdgeType("company", "company"),
            "invest": EdgeType("person", "company"),
            "sell": EdgeType("company", "item"),
            "buy": EdgeType("company", "item"),
            "belong": EdgeType("event", "company"),
            "category": EdgeType("item", "item"),
        },
    )


def small_schema(dim: int = 2) -> Schema:
    return Schema(
        node_types={"company": dim, "person": dim},
        edge_types={
            "transaction": EdgeType("company", "company"),
            "invest": EdgeType("person", "company"),
        },
    )


def make_graph(schema: Schema, nodes, edges) -> HetGraph:
    """nodes: (id, type) pairs; attributes filled with zeros of the right size."""
    full = [(nid, t, np.zeros(schema.node_types[t])) for nid, t in nodes]
    return HetGraph(schema, full, edges)


def random_typed_graph(rng: np.random.Generator, n_companies: int, n_persons: int,
                       n_items: int, edge_rate: float = 0.15) -> HetGraph:
    """A small random graph over the tax schema for oracle comparisons."""
    schema = tax_schema()
    nodes = ([(f"c{i}", "company") for i in range(n_companies)]
             + [(f"p{i}", "person") for i in range(n_persons)]
             + [(f"i{i}", "item") for i in range(n_items)])
    edges = []
    for a in range(n_companies):
        for b in range(n_companies):
            if a != b and rng.random() < edge_rate:
                edges.append((f"c{a}", f"c{b}", "transaction"))
    for p in range(n_persons):
        for c in range(n_companies):
            if rng.random() < edge_rate:
                edges.append((f"p{p}", f"c{c}", "invest"))
    for c in range(n_companies):
        for i in range(n_items):
            if rng.random() < edge_rate:
                edges.append((f"c{c}", f"i{i}", "sell"))
            if rng.random() < edge_rate:
                edges.append((f"c{c}", f"i{i}", "buy"))
    return make_graph(schema, nodes, edges)


def brute_force_instances(graph: HetGraph, pattern: RptPattern,
                          injective: bool = False) -> list[RptInstance]:
    """Exhaustive enumeration over every typed role assignment.

    Checks all pattern edges on complete assignments only; deduplicates by
    (anchor node, sorted node multiset) keeping the lexicographically smallest
    representative, then sorts like the production matcher.
    """
    role_names = list(pattern.role_names)
    anchor_pos = role_names.index(pattern.anchor)
    candidate_lists = [graph.nodes_of_type(t) for _, t in pattern.roles]
    kept: dict[tuple, tuple[int, ...]] = {}
    for combo in product(*candidate_lists):
        if injective and len(set(combo)) != len(combo):
            continue
        assign = dict(zip(role_names, combo))
        if not all(graph.has_edge(assign[s], assign[t], e)
                   for s, t, e in pattern.edges):
            continue
        key = (combo[anchor_pos], tuple(sorted(combo)))
        if key not in kept or combo < kept[key]:
            kept[key] = tuple(combo)
    out = [RptInstance(pattern.pattern_id, key[0], nodes)
           for key, nodes in kept.items()]
    out.sort(key=lambda inst: (inst.anchor, inst.nodes))
    return out


def brute_force_metapath(graph: HetGraph, metapath: list[str]) -> dict[int, set[int]]:
    """Recursive typed-path walk, independent of the production traversal."""
    node_types = metapath[0::2]
    edge_types = metapath[1::2]

    def step(node: int, depth: int) -> set[int]:
        if depth == len(edge_types):
            return {node}
        etype = edge_types[depth]
        want = node_types[depth + 1]
        out: set[int] = set()
        for s, t, r in graph.edges:
            if r != etype:
                continue
            if s == node and graph.types[t] == want:
                out |= step(t, depth + 1)
            if t == node and graph.types[s] == want:
                out |= step(s, depth + 1)
        return out

    result = {}
    for start in graph.nodes_of_type(node_types[0]):
        result[start] = step(start, 0) - {start}
    return result


def brute_force_k_order(graph: HetGraph, k: int) -> dict[int, set[int]]:
    """Boolean adjacency-matrix powers as an independent reachability oracle."""
    n = len(graph)
    A = np.zeros((n, n), dtype=bool)
    for s, t, _ in graph.edges:
        A[s, t] = A[t, s] = True
    np.fill_diagonal(A, False)
    reach = np.zeros((n, n), dtype=bool)
    power = np.eye(n, dtype=bool)
    for _ in range(k):
        power = power @ A
        reach |= power
    np.fill_diagonal(reach, False)
    company = [graph.types[i] == graph.schema.company_type for i in range(n)]
    return {i: {j for j in range(n) if reach[i, j] and company[j]} for i in range(n)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
