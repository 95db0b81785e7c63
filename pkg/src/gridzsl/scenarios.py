"""Observability masks, topology-change variants and train/test splits."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from .grid_model import (
    BranchKind,
    ElectricalGraph,
    GridError,
    GridTopology,
)

log = logging.getLogger(__name__)

T = TypeVar("T")


def round_half_up(x: float) -> int:
    # the epsilon absorbs binary noise such as 0.3 * 10 = 3.0000000000000004
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True, eq=False)
class ObservabilityMask:
    observed: np.ndarray
    fraction: float

    def __post_init__(self):
        arr = np.array(self.observed, dtype=bool)
        arr.setflags(write=False)
        object.__setattr__(self, "observed", arr)

    @property
    def node_count(self) -> int:
        return len(self.observed)

    @property
    def count(self) -> int:
        return int(self.observed.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)

    def __eq__(self, other):
        if not isinstance(other, ObservabilityMask):
            return NotImplemented
        return self.fraction == other.fraction and np.array_equal(self.observed, other.observed)

    def __hash__(self):
        return hash((self.fraction, self.observed.tobytes()))


def sample_observability_mask(node_count: int, fraction: float, seed: int,
                              slack_node: int | None = None) -> ObservabilityMask:
    """Uniformly random subset of round(fraction * node_count) nodes.

    When ``slack_node`` is given and at least one node is observed, the slack
    node is always among them and the rest are drawn from the other nodes.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    k = round_half_up(fraction * node_count)
    rng = np.random.default_rng(seed)
    observed = np.zeros(node_count, dtype=bool)
    if k == 0:
        return ObservabilityMask(observed, fraction)
    if slack_node is None:
        observed[rng.choice(node_count, size=k, replace=False)] = True
    else:
        others = np.delete(np.arange(node_count), slack_node)
        observed[slack_node] = True
        observed[rng.choice(others, size=k - 1, replace=False)] = True
    return ObservabilityMask(observed, fraction)


def degrade_observability(mask: ObservabilityMask, level: float, seed: int,
                          slack_node: int | None = None) -> ObservabilityMask:
    """Drop observed nodes at random until ``level`` of all nodes remain.

    The removal order depends only on ``seed``, so degrading along one chain
    of levels yields nested masks. A slack node is removed last.
    """
    if level < 0 or level > mask.fraction + 1e-12:
        raise ValueError(f"level {level} outside [0, {mask.fraction}]")
    k = round_half_up(level * mask.node_count)
    idx = mask.indices
    rng = np.random.default_rng(seed)
    order = idx[rng.permutation(len(idx))]
    if slack_node is not None and mask.observed[slack_node]:
        order = np.concatenate([[slack_node], order[order != slack_node]])
    observed = np.zeros(mask.node_count, dtype=bool)
    observed[order[:k]] = True
    return ObservabilityMask(observed, level)


def project_mask(mask: ObservabilityMask, source: ElectricalGraph,
                 target: ElectricalGraph) -> ObservabilityMask:
    """Carry measured buses over to another graph of the same buses."""
    observed = np.zeros(target.node_count, dtype=bool)
    for bus, node in source.bus_to_node.items():
        if mask.observed[node]:
            observed[target.bus_to_node[bus]] = True
    return ObservabilityMask(observed, observed.sum() / target.node_count)


@dataclass(frozen=True)
class TopologyVariant:
    variant_id: str
    base_topology_id: str
    disabled_line_id: int
    closed_switch_id: int
    variant_topology: GridTopology


def _bfs_tree(topology: GridTopology) -> tuple[dict[int, int], dict[int, tuple[int, int]]]:
    """Hop depth and (parent bus, branch id) of every bus from the slack."""
    adj: dict[int, list[tuple[int, int]]] = {b: [] for b in topology.bus_ids}
    for br in sorted(topology.branches, key=lambda b: b.id):
        if br.conducts:
            adj[br.from_bus].append((br.to_bus, br.id))
            adj[br.to_bus].append((br.from_bus, br.id))
    root = topology.slack_bus
    depth = {root: 0}
    parent: dict[int, tuple[int, int]] = {}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, br_id in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                parent[v] = (u, br_id)
                queue.append(v)
    return depth, parent


def _path_branches(bus: int, parent: dict[int, tuple[int, int]]) -> list[int]:
    path = []
    while bus in parent:
        bus, br_id = parent[bus]
        path.append(br_id)
    return path


def make_topology_variants(topology: GridTopology) -> list[TopologyVariant]:
    """One line-fault variant per open loop switch.

    For each open switch the candidate lines are those feeding exactly one of
    its two ends. The one whose far end lies deepest below the slack is taken
    out of service (ties go to the lower id) and the switch is closed, so the
    orphaned part of the branch is resupplied through the switch.
    """
    depth, parent = _bfs_tree(topology)
    variants = []
    for sw in sorted(topology.open_switches(), key=lambda b: b.id):
        path_a = _path_branches(sw.from_bus, parent)
        path_b = _path_branches(sw.to_bus, parent)
        shared = set(path_a) & set(path_b)
        candidates = []
        for br_id in (set(path_a) | set(path_b)) - shared:
            br = topology.branch(br_id)
            if br.kind is BranchKind.LINE:
                far = max(depth[br.from_bus], depth[br.to_bus])
                candidates.append((-far, br_id))
        if not candidates:
            log.warning("switch %s: no line on its feeder paths, skipped", sw.id)
            continue
        line_id = min(candidates)[1]
        line = topology.branch(line_id)
        name = f"{topology.name}-sw{sw.id}"
        variant = topology.replace_branches(
            {line_id: dataclasses.replace(line, in_service=False),
             sw.id: dataclasses.replace(sw, closed=True)},
            name=name,
        )
        try:
            variant.validate()
        except GridError as exc:
            log.warning("switch %s: variant invalid (%s), skipped", sw.id, exc)
            continue
        variants.append(TopologyVariant(name, topology.name, line_id, sw.id, variant))
    return variants


def apply_manifest(topology: GridTopology, manifest: Sequence[dict]) -> list[TopologyVariant]:
    """Rebuild variants from manifest rows."""
    out = []
    for row in manifest:
        line = topology.branch(row["disabled_line_id"])
        sw = topology.branch(row["closed_switch_id"])
        variant = topology.replace_branches(
            {line.id: dataclasses.replace(line, in_service=False),
             sw.id: dataclasses.replace(sw, closed=True)},
            name=row["variant_id"],
        ).validate()
        out.append(TopologyVariant(row["variant_id"], topology.name, line.id, sw.id, variant))
    return out


def variant_manifest(variants: Sequence[TopologyVariant]) -> list[dict]:
    return [
        {"variant_id": v.variant_id, "disabled_line_id": v.disabled_line_id,
         "closed_switch_id": v.closed_switch_id}
        for v in variants
    ]


def save_manifest(variants: Sequence[TopologyVariant], path: str | Path) -> None:
    Path(path).write_text(json.dumps(variant_manifest(variants), indent=1) + "\n")


def load_manifest(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())


def split_variants(variants: Sequence[T], ratio: float = 0.5,
                   seed: int = 0) -> tuple[list[T], list[T]]:
    """Seeded disjoint split; each side keeps the original order."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    n = len(variants)
    if n < 2:
        raise ValueError("need at least two variants to split")
    n_train = min(max(round_half_up(ratio * n), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(perm[:n_train])
    test_idx = sorted(perm[n_train:])
    return [variants[i] for i in train_idx], [variants[i] for i in test_idx]
