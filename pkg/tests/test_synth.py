"""Generator tests: validation, planted recoverability, determinism, label stats."""

import math

import numpy as np
import pytest

from rptdetect.errors import InfeasibleConfig
from rptdetect.hetgraph import load_graph, load_labels
from rptdetect.matcher import enumerate_instances
from rptdetect.patterns import bundled_patterns
from rptdetect.synth import GenConfig, export, generate, scaled_config


SMALL = GenConfig(companies=80, persons=70, items=20, events=6,
                  communities=8, decoy_communities=4, feature_dim=4,
                  label_coverage=1.0, seed=21)


def test_generated_graph_validates_against_bundled_schema():
    graph, labels, truth = generate(SMALL)
    assert set(graph.schema.node_types) == {"company", "person", "item", "event"}
    assert len(graph.schema.edge_types) == 6
    assert all(graph.types[graph.index[i]] == "company" for i in labels)
    assert len(truth.communities) == 12


def test_every_planted_instance_is_found_by_the_matcher():
    graph, _, truth = generate(SMALL)
    found = {}
    for pattern in bundled_patterns():
        found[pattern.pattern_id] = set(
            enumerate_instances(graph, pattern, cap=4096, cap_mode="truncate"))
    for info in truth.communities:
        for pid, anchor, node_ids in info.instances:
            nodes = tuple(graph.index[v] for v in node_ids)
            key = tuple(sorted(nodes))
            hits = [inst for inst in found[pid]
                    if inst.anchor == graph.index[anchor]
                    and tuple(sorted(inst.nodes)) == key]
            assert hits, (pid, anchor, node_ids)


def test_decoy_wiring_instantiates_only_its_pattern():
    # a decoy group in isolation: no transactions or shared items beyond plan
    bare = GenConfig(companies=8, persons=10, items=3, events=0,
                     communities=0, decoy_communities=2, label_coverage=1.0,
                     transaction_density=0.0, invest_coverage=0.0,
                     item_trade_rate=0.0, event_degree=0.0,
                     category_density=0.0, feature_dim=3, seed=7)
    graph, _, truth = generate(bare)
    per_pattern = {
        p.pattern_id: enumerate_instances(graph, p, cap=512)
        for p in bundled_patterns()
    }
    assert per_pattern["PCPCP"] and per_pattern["PCICP"]
    for pid in ("PCCP", "PCCCP", "PCPCCP"):
        assert per_pattern[pid] == []
    kinds = {info.kind for info in truth.communities}
    assert kinds == {"decoy_invest", "decoy_item"}


def test_recoverability_at_reference_scale():
    # four-type population with dedicated pools: every planted group's
    # instances must come back from the matcher
    graph, _, truth = generate(GenConfig(
        companies=2000, persons=1000, items=200, events=100,
        communities=60, decoy_communities=20, feature_dim=3,
        label_coverage=0.3, seed=17))
    assert len(graph) == 3300
    found = {}
    for pattern in bundled_patterns():
        found[pattern.pattern_id] = {
            (inst.anchor, tuple(sorted(inst.nodes)))
            for inst in enumerate_instances(graph, pattern, cap=4096,
                                            cap_mode="truncate")
        }
    planted = 0
    for info in truth.communities:
        for pid, anchor, node_ids in info.instances:
            nodes = tuple(sorted(graph.index[v] for v in node_ids))
            assert (graph.index[anchor], nodes) in found[pid], (pid, anchor)
            planted += 1
    assert planted == 60 * 5


def test_export_round_trip_equality(tmp_path):
    graph, labels, _ = generate(SMALL)
    paths = export(graph, labels, tmp_path)
    again = load_graph(paths["schema"], paths["nodes"], paths["edges"])
    assert graph.equals(again)
    assert load_labels(paths["labels"]) == labels


def test_same_seed_exports_byte_identical_files(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    ga, la, _ = generate(SMALL)
    gb, lb, _ = generate(SMALL)
    pa = export(ga, la, a_dir)
    pb = export(gb, lb, b_dir)
    for key in pa:
        assert open(pa[key], "rb").read() == open(pb[key], "rb").read(), key


def test_different_seeds_differ():
    ga, _, _ = generate(SMALL)
    gb, _, _ = generate(GenConfig(**{**SMALL.__dict__, "seed": 22}))
    assert not ga.equals(gb)


def test_label_coverage_and_empty_labels():
    _, labels, _ = generate(GenConfig(**{**SMALL.__dict__, "label_coverage": 0.5}))
    assert len(labels) == 40
    _, empty, _ = generate(GenConfig(**{**SMALL.__dict__, "label_coverage": 0.0}))
    assert empty == {}


def test_label_statistics_match_configured_probabilities():
    config = GenConfig(companies=2500, persons=2000, items=300, events=40,
                       communities=300, decoy_communities=0, p_rpt=0.8,
                       p_bg=0.1, label_coverage=1.0, feature_dim=3, seed=33)
    _, labels, truth = generate(config)
    members = {c for info in truth.communities for c in info.companies}
    inside = [labels[c] for c in sorted(members)]
    outside = [y for c, y in labels.items() if c not in members]
    for sample, p in ((inside, 0.8), (outside, 0.1)):
        n = len(sample)
        rate = sum(sample) / n
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(rate - p) <= 3 * sigma, (rate, p, n)


def test_null_model_labels_independent_of_structure():
    config = GenConfig(companies=2000, persons=1600, items=250, events=30,
                       communities=250, decoy_communities=0, p_rpt=0.15,
                       p_bg=0.15, class_shift=0.0, label_coverage=1.0,
                       feature_dim=3, seed=44)
    _, labels, truth = generate(config)
    members = {c for info in truth.communities for c in info.companies}
    inside = [labels[c] for c in sorted(members)]
    rate = sum(inside) / len(inside)
    sigma = math.sqrt(0.15 * 0.85 / len(inside))
    assert abs(rate - 0.15) <= 3 * sigma


def test_class_shift_moves_company_features():
    strong = GenConfig(**{**SMALL.__dict__, "class_shift": 5.0})
    graph, labels, _ = generate(strong)
    pos = np.stack([graph.x[graph.index[i]] for i, y in labels.items() if y == 1])
    neg = np.stack([graph.x[graph.index[i]] for i, y in labels.items() if y == 0])
    gap = np.linalg.norm(pos.mean(axis=0) - neg.mean(axis=0))
    assert gap > 3.0


def test_infeasible_configs_rejected():
    with pytest.raises(InfeasibleConfig):
        generate(GenConfig(companies=10, communities=10))  # 30 companies needed
    with pytest.raises(InfeasibleConfig):
        generate(GenConfig(p_rpt=0.2, p_bg=0.5))
    with pytest.raises(InfeasibleConfig):
        generate(GenConfig(label_coverage=1.5))
    with pytest.raises(InfeasibleConfig):
        GenConfig(companies=100, persons=5, communities=10).validate()


def test_scaled_config_preserves_shares():
    base = GenConfig()
    big = scaled_config(base, 4 * (base.companies + base.persons + base.items
                                   + base.events))
    assert big.companies == 4 * base.companies
    assert big.communities == 4 * base.communities
    assert big.transaction_density == base.transaction_density
