"""Schema-conformant synthetic tax graphs with plantable evasion communities.

Each evasion community wires three companies, three persons, and one item so
that every bundled pattern has at least one instance anchored at the first
company; members evade with probability ``p_rpt`` against a ``p_bg``
background.  Decoy groups instantiate only the shared-investor or shared-item
pattern among background-rate companies, giving the pattern-level attention
something real to discriminate.  Background topology uses weighted random
attachment so degree distributions come out heavy-tailed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InfeasibleConfig, IoFailure
from .hetgraph import EdgeType, HetGraph, Schema, save_graph, save_labels


@dataclass(frozen=True)
class GenConfig:
    companies: int = 500
    persons: int = 400
    items: int = 120
    events: int = 20
    communities: int = 60
    decoy_communities: int = 20
    p_rpt: float = 0.8
    p_bg: float = 0.1
    label_coverage: float = 0.9
    feature_dim: int = 8
    class_shift: float = 0.25
    transaction_density: float = 1.5
    invest_coverage: float = 0.1
    item_trade_rate: float = 0.5
    event_degree: float = 1.0
    category_density: float = 0.3
    degree_exponent: float = 2.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_rpt", "p_bg", "label_coverage", "invest_coverage"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InfeasibleConfig(f"{name} must be in [0, 1], got {v}")
        if self.p_rpt < self.p_bg:
            raise InfeasibleConfig(
                f"p_rpt ({self.p_rpt}) must be >= p_bg ({self.p_bg})")
        if min(self.companies, self.persons, self.items, self.events) < 0:
            raise InfeasibleConfig("node counts must be non-negative")
        if self.degree_exponent <= 1.0:
            raise InfeasibleConfig("degree_exponent must exceed 1")
        needed_c = 3 * self.communities + 2 * self.decoy_communities
        if needed_c > self.companies:
            raise InfeasibleConfig(
                f"{needed_c} companies needed for planted groups, have {self.companies}")
        n_decoy_a = (self.decoy_communities + 1) // 2
        n_decoy_b = self.decoy_communities // 2
        bg_companies = self.companies - needed_c
        needed_p = (3 * self.communities + 3 * n_decoy_a + 2 * n_decoy_b
                    + int(self.invest_coverage * bg_companies))
        if needed_p > self.persons:
            raise InfeasibleConfig(
                f"{needed_p} persons needed for planted groups, have {self.persons}")
        needed_i = self.communities + n_decoy_b
        if needed_i > self.items:
            raise InfeasibleConfig(
                f"{needed_i} items needed for planted groups, have {self.items}")


def default_schema(feature_dim: int = 8) -> Schema:
    return Schema(
        node_types={"company": feature_dim, "person": feature_dim,
                    "item": feature_dim, "event": feature_dim},
        edge_types={
            "transaction": EdgeType("company", "company"),
            "invest": EdgeType("person", "company"),
            "sell": EdgeType("company", "item"),
            "buy": EdgeType("company", "item"),
            "belong": EdgeType("event", "company"),
            "category": EdgeType("item", "item"),
        },
        company_type="company",
    )


@dataclass
class CommunityInfo:
    kind: str  # "evasion", "decoy_invest", "decoy_item"
    companies: list[str]
    persons: list[str]
    items: list[str]
    instances: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)


@dataclass
class GroundTruth:
    communities: list[CommunityInfo]
    community_of: dict[str, int]
    true_labels: dict[str, int]


def _power_weights(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(n) + 1
    w = ranks ** (-1.0 / (exponent - 1.0))
    return w / w.sum()


def generate(config: GenConfig) -> tuple[HetGraph, dict[str, int], GroundTruth]:
    """Deterministic per seed; returns (graph, observed labels, ground truth)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    schema = default_schema(config.feature_dim)

    c_ids = [f"c{i:06d}" for i in range(config.companies)]
    p_ids = [f"p{i:06d}" for i in range(config.persons)]
    i_ids = [f"i{i:06d}" for i in range(config.items)]
    e_ids = [f"e{i:06d}" for i in range(config.events)]

    edges: list[tuple[str, str, str]] = []
    edge_seen: set[tuple[str, str, str]] = set()

    def add_edge(src: str, dst: str, etype: str) -> None:
        key = (src, dst, etype)
        if key not in edge_seen:
            edge_seen.add(key)
            edges.append(key)

    communities: list[CommunityInfo] = []
    community_of: dict[str, int] = {}
    c_next = p_next = i_next = 0

    for k in range(config.communities):
        ca, cb, cc = c_ids[c_next:c_next + 3]
        pa, pb, pc = p_ids[p_next:p_next + 3]
        ia = i_ids[i_next]
        c_next += 3
        p_next += 3
        i_next += 1
        add_edge(pa, ca, "invest")
        add_edge(pb, ca, "invest")
        add_edge(pb, cb, "invest")
        add_edge(pc, cb, "invest")
        add_edge(pc, cc, "invest")
        add_edge(ca, cb, "transaction")
        add_edge(cb, cc, "transaction")
        add_edge(ca, ia, "sell")
        add_edge(cb, ia, "buy")
        info = CommunityInfo(
            kind="evasion",
            companies=[ca, cb, cc],
            persons=[pa, pb, pc],
            items=[ia],
            instances=[
                ("PCCP", ca, (pa, ca, cb, pb)),
                ("PCCCP", ca, (pa, ca, cb, cc, pc)),
                ("PCICP", ca, (pa, ca, ia, cb, pb)),
                ("PCPCP", ca, (pa, ca, pb, cb, pc)),
                ("PCPCCP", ca, (pa, ca, pb, cb, cc, pc)),
            ],
        )
        for node in info.companies + info.persons + info.items:
            community_of[node] = k
        communities.append(info)

    for k in range(config.decoy_communities):
        idx = config.communities + k
        if k % 2 == 0:  # shared-investor pair -> PCPCP only
            b1, b2 = c_ids[c_next:c_next + 2]
            q1, q2, q3 = p_ids[p_next:p_next + 3]
            c_next += 2
            p_next += 3
            add_edge(q1, b1, "invest")
            add_edge(q2, b1, "invest")
            add_edge(q2, b2, "invest")
            add_edge(q3, b2, "invest")
            info = CommunityInfo("decoy_invest", [b1, b2], [q1, q2, q3], [])
        else:  # shared-item pair -> PCICP only
            b1, b2 = c_ids[c_next:c_next + 2]
            q1, q2 = p_ids[p_next:p_next + 2]
            j = i_ids[i_next]
            c_next += 2
            p_next += 2
            i_next += 1
            add_edge(q1, b1, "invest")
            add_edge(q2, b2, "invest")
            add_edge(b1, j, "sell")
            add_edge(b2, j, "buy")
            info = CommunityInfo("decoy_item", [b1, b2], [q1, q2], [j])
        for node in info.companies + info.persons + info.items:
            community_of[node] = idx
        communities.append(info)

    evasion_companies = {c for info in communities if info.kind == "evasion"
                         for c in info.companies}
    planted_companies = {c for info in communities for c in info.companies}
    bg_companies = [c for c in c_ids if c not in planted_companies]

    # one dedicated investor for a fraction of background companies
    n_invested = int(config.invest_coverage * len(bg_companies))
    invested = rng.choice(len(bg_companies), size=n_invested, replace=False)
    for slot in sorted(invested.tolist()):
        add_edge(p_ids[p_next], bg_companies[slot], "invest")
        p_next += 1

    # heavy-tailed random transactions over all companies
    weights = _power_weights(config.companies, config.degree_exponent, rng)
    n_tx = round(config.transaction_density * config.companies)
    attempts = 0
    placed = 0
    while placed < n_tx and attempts < 20 * n_tx + 100:
        attempts += 1
        s, t = rng.choice(config.companies, size=2, p=weights)
        if s == t:
            continue
        key = (c_ids[s], c_ids[t], "transaction")
        if key in edge_seen:
            continue
        add_edge(*key)
        placed += 1

    # item trading for non-community companies over the background item pool
    bg_items = i_ids[i_next:]
    traders = [c for c in c_ids if c not in evasion_companies]
    if bg_items:
        item_w = _power_weights(len(bg_items), config.degree_exponent, rng)
        for c in traders:
            for etype in ("sell", "buy"):
                if rng.random() < config.item_trade_rate:
                    j = int(rng.choice(len(bg_items), p=item_w))
                    add_edge(c, bg_items[j], etype)

    # events and item categories are schema-conformant noise
    for e in e_ids:
        for _ in range(rng.poisson(config.event_degree)):
            c = int(rng.choice(config.companies, p=weights))
            add_edge(e, c_ids[c], "belong")
    n_cat = round(config.category_density * config.items)
    for _ in range(n_cat):
        if config.items < 2:
            break
        a, b = rng.choice(config.items, size=2, replace=False)
        add_edge(i_ids[a], i_ids[b], "category")

    # labels first, then class-conditioned company features
    true_labels: dict[str, int] = {}
    for c in c_ids:
        p = config.p_rpt if c in evasion_companies else config.p_bg
        true_labels[c] = int(rng.random() < p)
    shift_dir = rng.normal(size=config.feature_dim)
    shift_dir /= np.linalg.norm(shift_dir)

    nodes: list[tuple[str, str, np.ndarray]] = []
    for c in c_ids:
        x = rng.normal(size=config.feature_dim)
        x = x + config.class_shift * true_labels[c] * shift_dir
        nodes.append((c, "company", x))
    for pid in p_ids:
        nodes.append((pid, "person", rng.normal(size=config.feature_dim)))
    for iid in i_ids:
        nodes.append((iid, "item", rng.normal(size=config.feature_dim)))
    for eid in e_ids:
        nodes.append((eid, "event", rng.normal(size=config.feature_dim)))

    n_observed = int(round(config.label_coverage * config.companies))
    observed_idx = rng.choice(config.companies, size=n_observed, replace=False)
    labels = {c_ids[i]: true_labels[c_ids[i]] for i in sorted(observed_idx.tolist())}

    graph = HetGraph(schema, nodes, edges)
    truth = GroundTruth(communities, community_of, true_labels)
    return graph, labels, truth


def export(graph: HetGraph, labels: dict[str, int], out_dir: str | os.PathLike) -> dict[str, str]:
    """Write schema/nodes/edges/labels files loadable by the graph module."""
    try:
        paths = save_graph(graph, out_dir)
        paths["labels"] = os.path.join(out_dir, "labels.csv")
        save_labels(labels, paths["labels"])
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {out_dir}: {exc}") from exc
    return paths


def save_ground_truth(truth: GroundTruth, path: str | os.PathLike) -> None:
    doc = {
        "communities": [
            {
                "kind": info.kind,
                "companies": info.companies,
                "persons": info.persons,
                "items": info.items,
                "instances": [
                    {"pattern": pid, "anchor": anchor, "nodes": list(nodes)}
                    for pid, anchor, nodes in info.instances
                ],
            }
            for info in truth.communities
        ],
        "community_of": truth.community_of,
        "true_labels": truth.true_labels,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def scaled_config(base: GenConfig, total_nodes: int) -> GenConfig:
    """Rescale node counts to a total while keeping per-type shares and densities."""
    total_base = base.companies + base.persons + base.items + base.events
    f = total_nodes / total_base
    return replace(
        base,
        companies=max(1, round(base.companies * f)),
        persons=max(1, round(base.persons * f)),
        items=max(1, round(base.items * f)),
        events=max(0, round(base.events * f)),
        communities=max(1, round(base.communities * f)),
        decoy_communities=round(base.decoy_communities * f),
    )
