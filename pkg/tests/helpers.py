"""Builders and numerical oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from gridzsl.grid_model import Branch, BranchKind, Bus, BusKind, GridTopology
from gridzsl.gnn import MessageGraph


def make_grid(n_buses: int, lines=(), switches=(), trafos=(), kv: float = 10.0,
              name: str = "t") -> GridTopology:
    """Bus 0 is the slack. ``lines`` holds (a, b, r, x); ``switches`` (a, b, closed)."""
    buses = [Bus(i, kv, BusKind.SLACK if i == 0 else BusKind.LOAD) for i in range(n_buses)]
    branches = []
    for a, b, r, x in lines:
        branches.append(Branch(len(branches), a, b, BranchKind.LINE, r, x))
    for a, b, closed in switches:
        branches.append(Branch(len(branches), a, b, BranchKind.SWITCH, closed=closed))
    for a, b in trafos:
        branches.append(Branch(len(branches), a, b, BranchKind.TRANSFORMER))
    return GridTopology(tuple(buses), tuple(branches), name).validate()


def two_bus_voltage(z: complex, p_load: float, q_load: float) -> complex:
    """Closed-form load-bus voltage for a 1 pu slack feeding P + jQ through z.

    From conj(V2) = |V2|^2 + z conj(S): with u = |V2|^2 and a + jb = conj(z) S,
    u^2 + (2a - 1) u + a^2 + b^2 = 0; the high-voltage root is physical.
    """
    w = z.conjugate() * complex(p_load, q_load)
    a, b = w.real, w.imag
    u = ((1 - 2 * a) + math.sqrt((1 - 2 * a) ** 2 - 4 * (a * a + b * b))) / 2
    return complex(u + a, b)


def random_tree_edges(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    return [(int(rng.integers(0, i)), i) for i in range(1, n)]


def random_connected_adjacency(rng: np.random.Generator, n: int, extra: int = 0,
                               weighted: bool = True) -> sp.csr_matrix:
    edges = set(random_tree_edges(rng, n))
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    u, v = map(np.array, zip(*edges)) if edges else (np.zeros(0, int), np.zeros(0, int))
    w = rng.uniform(0.1, 5.0, len(u)) if weighted else np.ones(len(u))
    return sp.csr_matrix((np.r_[w, w], (np.r_[u, v], np.r_[v, u])), shape=(n, n))


def random_message_graph(rng: np.random.Generator, n: int, extra: int = 2) -> MessageGraph:
    adj = sp.triu(random_connected_adjacency(rng, n, extra)).tocoo()
    return MessageGraph(n, adj.row, adj.col, adj.data)


def laplacian_oracle(adjacency, x, observed):
    """Harmonic extension from the graph Laplacian: L_uu X_u = -L_uk X_k."""
    a = adjacency.toarray()
    lap = np.diag(a.sum(axis=1)) - a
    u, k = ~observed, observed
    out = x.copy()
    out[u] = np.linalg.solve(lap[np.ix_(u, u)], -lap[np.ix_(u, k)] @ x[k])
    return out


def union_find_groups(n_labels, pairs) -> list[frozenset]:
    """Independent oracle: components of the closed-switch graph by union-find."""
    parent = {x: x for x in n_labels}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    groups: dict = {}
    for x in n_labels:
        groups.setdefault(find(x), set()).add(x)
    return sorted((frozenset(g) for g in groups.values()), key=min)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def random_table(rng: np.random.Generator, scenarios=None, models=("GCN", "GAT", "GIN", "GraphSAGE"),
                 layers=range(1, 11)):
    """Full-factorial results table with random MSE values and parameter counts."""
    from gridzsl.bench import BenchmarkResult, ResultsTable, ScenarioKind

    scenarios = list(ScenarioKind) if scenarios is None else scenarios
    params = {(m, n): int(rng.integers(10, 400)) for m in models for n in layers}
    rows = [BenchmarkResult(s, m, n, fp, adm, float(rng.lognormal(-10, 1)), params[(m, n)], 0)
            for s in scenarios for m in models for n in layers
            for fp in (True, False) for adm in (True, False)]
    return ResultsTable(rows)
