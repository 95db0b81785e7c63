import dataclasses
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridzsl.grid_model import (
    BranchKind,
    GridFormatError,
    GridValidationError,
    build_electrical_graph,
    fuse_switch_buses,
    load_grid,
    normalized_adjacency,
    save_grid,
    symmetric_normalize,
    topology_from_dict,
    topology_to_dict,
)
from helpers import make_grid, union_find_groups


def two_bus_dict():
    return {
        "buses": [{"id": 0, "nominal_kv": 10.0, "kind": "slack"},
                  {"id": 1, "nominal_kv": 10.0, "kind": "load"}],
        "branches": [{"id": 0, "from": 0, "to": 1, "kind": "line",
                      "r_ohm": 0.3, "x_ohm": 0.4}],
    }


def test_load_minimal_two_bus(tmp_path):
    path = tmp_path / "two.json"
    path.write_text(json.dumps(two_bus_dict()))
    topo = load_grid(path)
    assert len(topo.buses) == 2 and len(topo.branches) == 1
    assert topo.name == "two"
    assert topo.slack_bus == 0


def test_unknown_bus_reference_rejected():
    raw = two_bus_dict()
    raw["branches"][0]["to"] = 99
    with pytest.raises(GridValidationError, match="unknown bus 99"):
        topology_from_dict(raw)


@pytest.mark.parametrize("mutate, error", [
    (lambda r: r["buses"][0].update(kind="load"), GridValidationError),
    (lambda r: r["branches"][0].update(r_ohm=0.0, x_ohm=0.0), GridValidationError),
    (lambda r: r["branches"][0].update(colour="red"), GridFormatError),
    (lambda r: r.update(extra=1), GridFormatError),
    (lambda r: r["buses"][1].pop("nominal_kv"), GridFormatError),
    (lambda r: r["buses"].append({"id": 2, "nominal_kv": 10.0}), GridValidationError),
])
def test_invalid_grids(mutate, error):
    raw = two_bus_dict()
    mutate(raw)
    with pytest.raises(error):
        topology_from_dict(raw)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(GridFormatError):
        load_grid(path)


def test_round_trip(tmp_path, mv30):
    save_grid(mv30, tmp_path / "mv30.json")
    again = load_grid(tmp_path / "mv30.json")
    assert again == mv30
    assert topology_to_dict(again) == topology_to_dict(mv30)


def test_fixture_shape(mv30):
    kinds = [br.kind for br in mv30.branches]
    assert len(mv30.buses) == 30
    assert kinds.count(BranchKind.LINE) == 29
    assert len(mv30.open_switches()) == 4


def test_fusion_chain():
    topo = make_grid(4, lines=[(0, 1, 1, 1)], switches=[(1, 2, True), (2, 3, True)])
    groups, mapping = fuse_switch_buses(topo)
    assert frozenset({1, 2, 3}) in groups
    assert mapping[1] == mapping[2] == mapping[3] != mapping[0]


def test_fusion_star():
    topo = make_grid(5, lines=[(0, 1, 1, 1)],
                     switches=[(1, 2, True), (1, 3, True), (1, 4, True)])
    groups, mapping = fuse_switch_buses(topo)
    assert frozenset({1, 2, 3, 4}) in groups
    assert len({mapping[b] for b in (1, 2, 3, 4)}) == 1


def test_fusion_disjoint_pairs_and_open_switch():
    topo = make_grid(6, lines=[(0, 1, 1, 1), (1, 3, 1, 1), (3, 5, 1, 1)],
                     switches=[(1, 2, True), (3, 4, True), (4, 5, False)])
    groups, _ = fuse_switch_buses(topo)
    multi = [g for g in groups if len(g) > 1]
    assert sorted(multi, key=min) == [frozenset({1, 2}), frozenset({3, 4})]
    assert groups == union_find_groups(range(6), [(1, 2), (3, 4)])


def test_fusion_without_closed_switches_is_identity(mv30):
    groups, mapping = fuse_switch_buses(mv30)
    assert all(len(g) == 1 for g in groups)
    assert mapping == {b: b for b in mv30.bus_ids}


def test_fusion_cycle_of_switches():
    topo = make_grid(4, lines=[(0, 1, 1, 1)],
                     switches=[(1, 2, True), (2, 3, True), (3, 1, True)])
    groups, _ = fuse_switch_buses(topo)
    assert frozenset({1, 2, 3}) in groups


def test_edge_weights():
    topo = make_grid(2, lines=[(0, 1, 3.0, 4.0)])
    assert build_electrical_graph(topo, True).edges == ((0, 1, pytest.approx(0.2)),)
    assert build_electrical_graph(topo, False).edges == ((0, 1, 1.0),)


def test_parallel_lines_merge_by_admittance():
    # admittances 0.2 and 0.3 in parallel, the second reaching bus 1 through a switch
    topo = make_grid(3, lines=[(0, 1, 3.0, 4.0), (0, 2, 0.0, 1 / 0.3)],
                     switches=[(1, 2, True)])
    g = build_electrical_graph(topo, True)
    assert g.node_count == 2
    assert len(g.edges) == 1
    assert g.edges[0][2] == pytest.approx(0.5)


def test_transformer_gets_median_admittance():
    topo = make_grid(4, lines=[(1, 2, 3.0, 4.0), (2, 3, 0.6, 0.8)], trafos=[(0, 1)])
    g = build_electrical_graph(topo, True)
    weights = {(u, v): w for u, v, w in g.edges}
    assert weights[(0, 1)] == pytest.approx(np.median([0.2, 1.0]))
    assert build_electrical_graph(topo, False).edges[0][2] == 1.0


def test_closed_switch_never_becomes_an_edge(mv15):
    g = build_electrical_graph(mv15, True)
    _, _, w = g.edge_arrays()
    assert np.all(np.isfinite(w)) and np.all(w > 0)
    assert g.node_count == len(mv15.buses) - 1  # one closed switch
    assert all(u != v for u, v, _ in g.edges)


def test_out_of_service_line_and_closed_switch(mv30):
    sw = mv30.branch(100)     # open loop switch 6-13
    line = mv30.branch(5)     # feeder line 5-6
    variant = mv30.replace_branches({
        sw.id: dataclasses.replace(sw, closed=True),
        line.id: dataclasses.replace(line, in_service=False),
    }, "variant")
    g = build_electrical_graph(variant, False)
    assert g.node_count == 29
    assert len(g.edges) == 28
    assert g.bus_to_node[sw.from_bus] == g.bus_to_node[sw.to_bus]


def test_normalized_adjacency_examples():
    single = make_grid(1)
    assert normalized_adjacency(build_electrical_graph(single, False), True).toarray() \
        == pytest.approx(np.array([[1.0]]))
    pair = build_electrical_graph(make_grid(2, lines=[(0, 1, 1, 1)]), False)
    assert normalized_adjacency(pair, False).toarray() == pytest.approx(
        np.array([[0.0, 1.0], [1.0, 0.0]]))
    path = build_electrical_graph(make_grid(4, lines=[(0, 1, 1, 1), (1, 2, 1, 1),
                                                      (2, 3, 1, 1)]), False)
    a = path.adjacency().toarray() + np.eye(4)
    d = np.diag(1 / np.sqrt(a.sum(axis=1)))
    assert normalized_adjacency(path, True).toarray() == pytest.approx(d @ a @ d)


def test_isolated_node_rejected():
    import scipy.sparse as sp
    with pytest.raises(GridValidationError):
        symmetric_normalize(sp.csr_matrix((2, 2)), add_self_loops=False)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 50), st.integers(0, 10_000), st.booleans())
def test_normalized_adjacency_symmetric_and_bounded(n, seed, loops):
    rng = np.random.default_rng(seed)
    g = nx.random_labeled_tree(n, seed=seed) if hasattr(nx, "random_labeled_tree") \
        else nx.random_tree(n, seed=seed)
    a = nx.to_scipy_sparse_array(g, weight=None).astype(float)
    a = a.multiply(rng.uniform(0.1, 3.0, a.shape))
    a = (a + a.T) / 2
    m = symmetric_normalize(a, loops)
    assert abs(m - m.T).max() < 1e-12
    x = rng.standard_normal(n)
    for _ in range(300):
        x = m @ x
        x /= np.linalg.norm(x)
    assert np.linalg.norm(m @ x) <= 1 + 1e-9
