"""Newton-Raphson AC power flow and synthetic load time series.

All quantities are per unit on a 1 MVA system base. Line impedances are
converted on the nominal voltage of their from-bus. Closed switches and
transformers carry no impedance, so the buses they join share one voltage
and are solved as a single electrical node.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from .grid_model import BranchKind, GridTopology, GridValidationError

BASE_MVA = 1.0


class PowerFlowError(RuntimeError):
    """Raised on a singular Jacobian or when a series step fails to converge."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class VoltageSolution:
    v_pu: Mapping[int, float]
    theta_rad: Mapping[int, float]
    converged: bool
    iterations: int
    mismatch_history: tuple[float, ...] = ()

    def complex_voltage(self, bus: int) -> complex:
        return self.v_pu[bus] * complex(math.cos(self.theta_rad[bus]), math.sin(self.theta_rad[bus]))


# bus id -> (p_mw, q_mvar); generation positive, consumption negative
PowerInjection = Mapping[int, tuple[float, float]]


@dataclass(frozen=True)
class Snapshot:
    injections: Mapping[int, tuple[float, float]]
    voltages: VoltageSolution
    topology_id: str

    def __post_init__(self):
        if not self.voltages.converged:
            raise ValueError("snapshot requires a converged power flow")


@dataclass(frozen=True)
class LoadProfile:
    """Per-bus base load in [0.5, 1.5] x nominal, daily sinusoid, 5% noise."""

    nominal_p_mw: float = 0.3
    power_factor: float = 0.95
    steps_per_day: int = 96
    daily_amplitude: float = 0.3
    noise: float = 0.05


@dataclass
class _Network:
    buses: list[int]
    node_of: np.ndarray  # bus position -> electrical node
    n_nodes: int
    slack: int
    ybus: np.ndarray = field(repr=False)


def _reduce(topology: GridTopology) -> _Network:
    buses = topology.bus_ids
    pos = {b: i for i, b in enumerate(buses)}
    n = len(buses)
    ties = [
        (pos[br.from_bus], pos[br.to_bus])
        for br in topology.branches
        if br.conducts and br.kind is not BranchKind.LINE
    ]
    if ties:
        r, c = zip(*ties)
        tie_graph = sp.coo_matrix((np.ones(len(ties)), (r, c)), shape=(n, n))
        _, labels = connected_components(tie_graph, directed=False)
    else:
        labels = np.arange(n)
    # relabel by first appearance so node numbering is stable
    _, first, node_of = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    node_of = order[node_of]
    n_nodes = int(node_of.max()) + 1

    ybus = np.zeros((n_nodes, n_nodes), dtype=complex)
    for line in topology.lines():
        i, j = node_of[pos[line.from_bus]], node_of[pos[line.to_bus]]
        if i == j:
            continue
        kv = topology.bus(line.from_bus).nominal_kv
        z_pu = line.impedance / (kv**2 / BASE_MVA)
        y = 1.0 / z_pu
        ybus[i, i] += y
        ybus[j, j] += y
        ybus[i, j] -= y
        ybus[j, i] -= y

    links = np.abs(ybus) > 0
    n_comp, _ = connected_components(sp.csr_matrix(links), directed=False)
    if n_comp != 1:
        raise GridValidationError("power flow network is disconnected")
    slack = int(node_of[pos[topology.slack_bus]])
    return _Network(buses, node_of, n_nodes, slack, ybus)


def admittance_matrix(topology: GridTopology) -> tuple[np.ndarray, dict[int, int]]:
    """Nodal admittance matrix (per unit) and the bus -> electrical node map."""
    net = _reduce(topology)
    return net.ybus, {b: int(net.node_of[i]) for i, b in enumerate(net.buses)}


def _mismatch(ybus, v, s_spec, pq):
    s_calc = v * np.conj(ybus @ v)
    d = s_spec - s_calc
    return np.concatenate([d.real[pq], d.imag[pq]])


def solve_power_flow(
    topology: GridTopology,
    injections: PowerInjection,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> VoltageSolution:
    """Polar Newton-Raphson from a flat start; every non-slack node is PQ."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    net = _reduce(topology)
    slack_bus = topology.slack_bus
    s_spec = np.zeros(net.n_nodes, dtype=complex)
    for i, bus in enumerate(net.buses):
        if bus == slack_bus:
            continue
        try:
            p, q = injections[bus]
        except KeyError:
            raise ValueError(f"missing injection for bus {bus}") from None
        s_spec[net.node_of[i]] += complex(p, q) / BASE_MVA

    pq = np.array([k for k in range(net.n_nodes) if k != net.slack], dtype=int)
    npq = len(pq)
    ybus = net.ybus
    vm = np.ones(net.n_nodes)
    va = np.zeros(net.n_nodes)
    v = vm * np.exp(1j * va)

    history = []
    f = _mismatch(ybus, v, s_spec, pq)
    norm = float(np.max(np.abs(f))) if npq else 0.0
    history.append(norm)
    it = 0
    converged = norm < tol
    while not converged and it < max_iter:
        it += 1
        ibus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(v / np.abs(v))
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dvm = diag_v @ np.conj(ybus @ diag_vn) + np.conj(diag_i) @ diag_vn
        jac = np.block([
            [ds_dva.real[np.ix_(pq, pq)], ds_dvm.real[np.ix_(pq, pq)]],
            [ds_dva.imag[np.ix_(pq, pq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise PowerFlowError(f"singular Jacobian at iteration {it}") from None
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        v = vm * np.exp(1j * va)
        f = _mismatch(ybus, v, s_spec, pq)
        norm = float(np.max(np.abs(f)))
        history.append(norm)
        if not np.isfinite(norm):
            break
        converged = norm < tol

    v_pu = {bus: float(vm[net.node_of[i]]) for i, bus in enumerate(net.buses)}
    theta = {bus: float(va[net.node_of[i]]) for i, bus in enumerate(net.buses)}
    return VoltageSolution(v_pu, theta, bool(converged), it, tuple(history))


def power_balance_residual(topology: GridTopology, injections: PowerInjection,
                           solution: VoltageSolution) -> float:
    """Largest |dP| or |dQ| between the inputs and V conj(Y V), per unit.

    Slack nodes are skipped. This is the same mismatch measure the solver
    stops on.
    """
    ybus, node_of = admittance_matrix(topology)
    n = ybus.shape[0]
    v = np.zeros(n, dtype=complex)
    s_spec = np.zeros(n, dtype=complex)
    slack_bus = topology.slack_bus
    for bus, node in node_of.items():
        v[node] = solution.complex_voltage(bus)
        if bus != slack_bus:
            p, q = injections[bus]
            s_spec[node] += complex(p, q) / BASE_MVA
    s_calc = v * np.conj(ybus @ v)
    keep = np.ones(n, bool)
    keep[node_of[slack_bus]] = False
    diff = (s_spec - s_calc)[keep]
    return float(np.max(np.abs(np.r_[diff.real, diff.imag]), initial=0.0))


def load_injections(topology: GridTopology, n_steps: int, profile: LoadProfile,
                    seed: int) -> list[dict[int, tuple[float, float]]]:
    """Seeded injections for each step; the same seed gives the same loads."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    loads = [b.id for b in topology.buses if b.id != topology.slack_bus]
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.5, 1.5, size=len(loads)) * profile.nominal_p_mw
    q_ratio = math.tan(math.acos(profile.power_factor))
    steps = []
    for t in range(n_steps):
        phase = 2.0 * math.pi * t / profile.steps_per_day
        shape = 1.0 - profile.daily_amplitude * math.cos(phase)
        step_rng = np.random.default_rng([seed, t])
        noise = 1.0 + profile.noise * step_rng.standard_normal(len(loads))
        p = -base * shape * noise
        steps.append({bus: (float(pi), float(pi * q_ratio)) for bus, pi in zip(loads, p)})
    return steps


def generate_time_series(
    topology: GridTopology,
    n_steps: int,
    load_profile_spec: LoadProfile | None = None,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> list[Snapshot]:
    profile = load_profile_spec or LoadProfile()
    snapshots = []
    for t, inj in enumerate(load_injections(topology, n_steps, profile, seed)):
        sol = solve_power_flow(topology, inj, tol=tol, max_iter=max_iter)
        if not sol.converged:
            raise PowerFlowError("power flow did not converge", step=t)
        snapshots.append(Snapshot(inj, sol, topology.name))
    return snapshots


def snapshots_to_records(snapshots: Sequence[Snapshot]) -> list[dict]:
    records = []
    for snap in snapshots:
        records.append({
            "topology_id": snap.topology_id,
            "injections": [{"bus": b, "p_mw": p, "q_mvar": q}
                           for b, (p, q) in sorted(snap.injections.items())],
            "voltages": [{"bus": b, "v_pu": snap.voltages.v_pu[b],
                          "theta_rad": snap.voltages.theta_rad[b]}
                         for b in sorted(snap.voltages.v_pu)],
        })
    return records


def snapshots_from_records(records: Sequence[dict]) -> list[Snapshot]:
    out = []
    for rec in records:
        inj = {r["bus"]: (r["p_mw"], r["q_mvar"]) for r in rec["injections"]}
        v = {r["bus"]: r["v_pu"] for r in rec["voltages"]}
        th = {r["bus"]: r["theta_rad"] for r in rec["voltages"]}
        out.append(Snapshot(inj, VoltageSolution(v, th, True, 0), rec["topology_id"]))
    return out


def save_snapshots(snapshots: Sequence[Snapshot], path: str | Path) -> None:
    Path(path).write_text(json.dumps(snapshots_to_records(snapshots)) + "\n")


def load_snapshots(path: str | Path) -> list[Snapshot]:
    return snapshots_from_records(json.loads(Path(path).read_text()))
