"""Grid topologies, switch fusion and the weighted graph seen by the GNNs."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class GridError(ValueError):
    """Base class for grid file and topology problems."""


class GridFormatError(GridError):
    """The grid file cannot be parsed or does not follow the schema."""


class GridValidationError(GridError):
    """The grid parses but violates a topology invariant."""


class BusKind(str, enum.Enum):
    SLACK = "slack"
    LOAD = "load"


class BranchKind(str, enum.Enum):
    LINE = "line"
    TRANSFORMER = "transformer"
    SWITCH = "switch"


@dataclass(frozen=True)
class Bus:
    id: int
    nominal_kv: float
    kind: BusKind = BusKind.LOAD


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    kind: BranchKind
    r_ohm: float | None = None
    x_ohm: float | None = None
    closed: bool | None = None
    in_service: bool = True

    @property
    def impedance(self) -> complex:
        return complex(self.r_ohm, self.x_ohm)

    @property
    def is_closed_switch(self) -> bool:
        return self.kind is BranchKind.SWITCH and self.in_service and bool(self.closed)

    @property
    def conducts(self) -> bool:
        """True if the branch electrically joins its two buses."""
        if not self.in_service:
            return False
        if self.kind is BranchKind.SWITCH:
            return bool(self.closed)
        return True


@dataclass(frozen=True)
class GridTopology:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    name: str = "base"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind is BusKind.SLACK)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def lines(self, in_service_only: bool = True) -> list[Branch]:
        return [
            br
            for br in self.branches
            if br.kind is BranchKind.LINE and (br.in_service or not in_service_only)
        ]

    def open_switches(self) -> list[Branch]:
        return [
            br
            for br in self.branches
            if br.kind is BranchKind.SWITCH and br.in_service and not br.closed
        ]

    def replace_branches(self, changes: Mapping[int, Branch], name: str) -> "GridTopology":
        branches = tuple(changes.get(br.id, br) for br in self.branches)
        return GridTopology(self.buses, branches, name=name)

    def validate(self) -> "GridTopology":
        validate_topology(self)
        return self


def _components(n: int, pairs: list[tuple[int, int]]) -> tuple[int, np.ndarray]:
    if not pairs:
        return n, np.arange(n)
    rows, cols = zip(*pairs)
    adj = sp.coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
    return connected_components(adj, directed=False)


def validate_topology(topology: GridTopology) -> None:
    ids = [b.id for b in topology.buses]
    if not ids:
        raise GridValidationError("grid has no buses")
    if len(set(ids)) != len(ids):
        raise GridValidationError("duplicate bus ids")
    for b in topology.buses:
        if not b.nominal_kv > 0:
            raise GridValidationError(f"bus {b.id}: nominal_kv must be positive")
    n_slack = sum(b.kind is BusKind.SLACK for b in topology.buses)
    if n_slack != 1:
        raise GridValidationError(f"expected exactly one slack bus, found {n_slack}")

    br_ids = [br.id for br in topology.branches]
    if len(set(br_ids)) != len(br_ids):
        raise GridValidationError("duplicate branch ids")
    index = {bid: i for i, bid in enumerate(ids)}
    for br in topology.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in index:
                raise GridValidationError(f"branch {br.id} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise GridValidationError(f"branch {br.id} is a self-loop")
        if br.kind is BranchKind.LINE:
            if br.r_ohm is None or br.x_ohm is None:
                raise GridValidationError(f"line {br.id} needs r_ohm and x_ohm")
            if br.r_ohm < 0 or br.x_ohm < 0 or br.r_ohm + br.x_ohm <= 0:
                raise GridValidationError(f"line {br.id} has invalid impedance")
        else:
            if br.r_ohm is not None or br.x_ohm is not None:
                raise GridValidationError(f"{br.kind.value} {br.id} must not carry impedance")
        if br.kind is BranchKind.SWITCH and br.closed is None:
            raise GridValidationError(f"switch {br.id} needs a closed state")
        if br.kind is not BranchKind.SWITCH and br.closed is not None:
            raise GridValidationError(f"{br.kind.value} {br.id} cannot have a closed state")

    pairs = [(index[br.from_bus], index[br.to_bus]) for br in topology.branches if br.conducts]
    n_comp, _ = _components(len(ids), pairs)
    if n_comp != 1:
        raise GridValidationError(f"grid is disconnected ({n_comp} components)")


_BUS_KEYS = {"id", "nominal_kv", "kind"}
_BRANCH_KEYS = {"id", "from", "to", "kind", "r_ohm", "x_ohm", "closed", "in_service"}


def _check_keys(obj, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise GridFormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise GridFormatError(f"{where}: unknown keys {sorted(unknown)}")


def _number(value, where: str) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GridFormatError(f"{where}: expected a number, got {value!r}")
    return float(value)


def topology_from_dict(raw: dict, name: str = "base") -> GridTopology:
    _check_keys(raw, {"buses", "branches"}, "grid")
    try:
        buses = []
        for i, b in enumerate(raw["buses"]):
            _check_keys(b, _BUS_KEYS, f"buses[{i}]")
            buses.append(Bus(int(b["id"]), _number(b["nominal_kv"], f"buses[{i}].nominal_kv"),
                             BusKind(b.get("kind", "load"))))
        branches = []
        for i, br in enumerate(raw["branches"]):
            _check_keys(br, _BRANCH_KEYS, f"branches[{i}]")
            closed = br.get("closed")
            if closed is not None and not isinstance(closed, bool):
                raise GridFormatError(f"branches[{i}].closed must be boolean")
            in_service = br.get("in_service", True)
            if not isinstance(in_service, bool):
                raise GridFormatError(f"branches[{i}].in_service must be boolean")
            branches.append(Branch(
                id=int(br["id"]),
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                kind=BranchKind(br["kind"]),
                r_ohm=_number(br.get("r_ohm"), f"branches[{i}].r_ohm"),
                x_ohm=_number(br.get("x_ohm"), f"branches[{i}].x_ohm"),
                closed=closed,
                in_service=in_service,
            ))
    except KeyError as exc:
        raise GridFormatError(f"missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, GridError):
            raise
        raise GridFormatError(str(exc)) from None
    return GridTopology(tuple(buses), tuple(branches), name=name).validate()


def topology_to_dict(topology: GridTopology) -> dict:
    branches = []
    for br in topology.branches:
        row = {"id": br.id, "from": br.from_bus, "to": br.to_bus, "kind": br.kind.value}
        if br.kind is BranchKind.LINE:
            row["r_ohm"] = br.r_ohm
            row["x_ohm"] = br.x_ohm
        if br.kind is BranchKind.SWITCH:
            row["closed"] = br.closed
        row["in_service"] = br.in_service
        branches.append(row)
    return {
        "buses": [{"id": b.id, "nominal_kv": b.nominal_kv, "kind": b.kind.value}
                  for b in topology.buses],
        "branches": branches,
    }


def load_grid(path: str | Path) -> GridTopology:
    """Read and validate a grid file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{path}: {exc}") from None
    return topology_from_dict(raw, name=path.stem)


def save_grid(topology: GridTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(topology), indent=1) + "\n")


def fuse_switch_buses(topology: GridTopology) -> tuple[list[frozenset[int]], dict[int, int]]:
    """Group buses joined by closed bus-to-bus switches.

    Works on the auxiliary graph whose nodes are buses and whose edges are
    closed switches. Degree-1 nodes are folded into their only neighbour,
    which lowers that neighbour's degree, until each component is a single
    node. A component containing a cycle of switches never exposes a leaf;
    in that case one of its edges is contracted and peeling resumes.

    Returns the groups ordered by smallest member id and the bus -> node
    index map over all buses.
    """
    adj: dict[int, set[int]] = {}
    for br in topology.branches:
        if br.is_closed_switch:
            adj.setdefault(br.from_bus, set()).add(br.to_bus)
            adj.setdefault(br.to_bus, set()).add(br.from_bus)
    members: dict[int, set[int]] = {b: {b} for b in adj}

    def absorb(leaf: int, into: int) -> None:
        members[into] |= members.pop(leaf)
        for w in adj.pop(leaf):
            adj[w].discard(leaf)
            if w != into:
                adj[w].add(into)
                adj[into].add(w)

    while True:
        leaves = sorted(b for b, nbrs in adj.items() if len(nbrs) == 1)
        if leaves:
            for leaf in leaves:
                if leaf in adj and len(adj[leaf]) == 1:
                    absorb(leaf, next(iter(adj[leaf])))
            continue
        cyclic = sorted(b for b, nbrs in adj.items() if nbrs)
        if not cyclic:
            break
        u = cyclic[0]
        absorb(u, min(adj[u]))

    groups = [frozenset(m) for m in members.values()]
    fused = set().union(*members.values()) if members else set()
    groups += [frozenset({b.id}) for b in topology.buses if b.id not in fused]
    groups.sort(key=min)
    bus_to_node = {bus: i for i, g in enumerate(groups) for bus in g}
    return groups, bus_to_node


@dataclass(frozen=True)
class ElectricalGraph:
    node_count: int
    edges: tuple[tuple[int, int, float], ...]
    bus_to_node: Mapping[int, int]
    slack_node: int
    groups: tuple[frozenset[int], ...] = field(default=())
    name: str = "base"

    def __post_init__(self):
        object.__setattr__(self, "bus_to_node", MappingProxyType(dict(self.bus_to_node)))

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.edges:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        u, v, w = zip(*self.edges)
        return np.array(u, dtype=np.int64), np.array(v, dtype=np.int64), np.array(w, dtype=float)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric weighted adjacency matrix."""
        return weighted_adjacency(self.node_count, *self.edge_arrays())

    def representative_buses(self) -> list[int]:
        """Smallest bus id of each node."""
        return [min(g) for g in self.groups]


def build_electrical_graph(topology: GridTopology, use_admittance: bool) -> ElectricalGraph:
    """Fuse closed switches and turn lines and transformers into weighted edges."""
    groups, bus_to_node = fuse_switch_buses(topology)
    lines = topology.lines()
    for line in lines:
        if abs(line.impedance) == 0:
            raise GridValidationError(f"line {line.id} has zero impedance")
    admittances = [1.0 / abs(line.impedance) for line in lines]
    trafo_weight = float(np.median(admittances)) if (admittances and use_admittance) else 1.0

    merged: dict[tuple[int, int], float] = {}
    for br in topology.branches:
        if not br.in_service or br.kind is BranchKind.SWITCH:
            continue
        u, v = bus_to_node[br.from_bus], bus_to_node[br.to_bus]
        if u == v:
            continue
        if br.kind is BranchKind.LINE:
            w = 1.0 / abs(br.impedance) if use_admittance else 1.0
        else:
            w = trafo_weight
        key = (min(u, v), max(u, v))
        merged[key] = merged[key] + w if (use_admittance and key in merged) else w

    n = len(groups)
    edges = tuple((u, v, w) for (u, v), w in sorted(merged.items()))
    n_comp, _ = _components(n, [(u, v) for u, v, _ in edges])
    if n_comp != 1:
        raise GridValidationError(f"fused graph is disconnected ({n_comp} components)")
    return ElectricalGraph(
        node_count=n,
        edges=edges,
        bus_to_node=bus_to_node,
        slack_node=bus_to_node[topology.slack_bus],
        groups=tuple(groups),
        name=topology.name,
    )


def weighted_adjacency(n: int, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    vals = np.concatenate([w, w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def symmetric_normalize(adj: sp.spmatrix, add_self_loops: bool) -> sp.csr_matrix:
    """D^-1/2 (A [+ I]) D^-1/2 for a symmetric sparse ``adj``."""
    adj = sp.csr_matrix(adj, dtype=float)
    if add_self_loops:
        adj = adj + sp.identity(adj.shape[0], format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise GridValidationError(f"isolated node(s) {np.flatnonzero(deg <= 0).tolist()}")
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    return (scale @ adj @ scale).tocsr()


def normalized_adjacency(graph: ElectricalGraph, add_self_loops: bool) -> sp.csr_matrix:
    return symmetric_normalize(graph.adjacency(), add_self_loops)
