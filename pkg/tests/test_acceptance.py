"""The ten acceptance criteria, one test each, with a verdict line per criterion."""

import time

import numpy as np
import pytest

from gridzsl.autograd import Tensor
from gridzsl.bench import (
    CSV_HEADER,
    ResultsTable,
    ScenarioKind,
    TrainOptions,
    make_batch,
    predict_voltages,
    train_model,
)
from gridzsl.analysis import correlation_matrix, pivot_configs
from gridzsl.cli import main
from gridzsl.gnn import LAYER_TYPES, LayerKind, ModelConfig, build_model, smoothness_metric
from gridzsl.grid_model import build_electrical_graph, fuse_switch_buses
from gridzsl.powerflow import generate_time_series, power_balance_residual, solve_power_flow
from gridzsl.propagation import dirichlet_solve_oracle, propagate_features
from gridzsl.scenarios import make_topology_variants
from gradcases import gradient_error, layer_case, primitive_cases
from helpers import (
    laplacian_oracle,
    make_grid,
    random_connected_adjacency,
    random_message_graph,
    random_table,
    random_tree_edges,
    two_bus_voltage,
    union_find_groups,
)


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_c01_feature_propagation_matches_dirichlet_solve(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    with Clock() as clock:
        for _ in range(50):
            n = int(rng.integers(5, 51))
            adj = random_connected_adjacency(rng, n, extra=int(rng.integers(0, n)))
            x = rng.standard_normal((n, 2))
            observed = rng.random(n) < rng.uniform(0.1, 0.9)
            observed[rng.integers(n)] = True
            out = propagate_features(adj, x, observed)
            for oracle in (dirichlet_solve_oracle(adj, x, observed),
                           laplacian_oracle(adj, x, observed)):
                worst = max(worst, float(np.max(np.abs(out - oracle))))
    ok = worst < 1e-5 and clock.seconds < 10
    verdict(1, ok, f"max abs diff {worst:.2e} (< 1e-5), {clock.seconds:.1f} s")
    assert ok


def test_c02_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(102)
    worst, names = 0.0, []
    with Clock() as clock:
        for name, build in primitive_cases().items():
            for _ in range(20):
                fn, inputs = build(rng)
                worst = max(worst, gradient_error(fn, inputs, rng))
            names.append(name)
        for kind in LayerKind:
            for i in range(20):
                fn, inputs = layer_case(kind, rng, weighted=bool(i % 2))
                worst = max(worst, gradient_error(fn, inputs, rng))
            names.append(kind.value)
    ok = worst < 1e-4 and clock.seconds < 60
    verdict(2, ok, f"{len(names)} cases x 20, worst relative error {worst:.1e} (< 1e-4), "
                   f"{clock.seconds:.1f} s")
    assert ok


def test_c03_power_flow_oracle_and_balance(verdict, mv30, mv15):
    with Clock() as clock:
        two = make_grid(2, lines=[(0, 1, 0.01, 0.05)], kv=1.0)
        analytic = abs(solve_power_flow(two, {1: (-0.1, -0.05)}).complex_voltage(1)
                       - two_bus_voltage(0.01 + 0.05j, 0.1, 0.05))
        residual, count = 0.0, 0
        for base in (mv30, mv15):
            for topo in [base] + [v.variant_topology for v in make_topology_variants(base)]:
                for snap in generate_time_series(topo, 192, seed=0):
                    residual = max(residual,
                                   power_balance_residual(topo, snap.injections, snap.voltages))
                    count += 1
    ok = analytic < 1e-8 and residual < 1e-8 and clock.seconds < 10
    verdict(3, ok, f"2-bus error {analytic:.1e}, worst residual {residual:.1e} over {count} "
                   f"snapshots, {clock.seconds:.1f} s")
    assert ok


def test_c04_bus_fusion_equals_union_find(verdict):
    rng = np.random.default_rng(104)
    mismatches = 0
    with Clock() as clock:
        for _ in range(100):
            n = int(rng.integers(2, 40))
            lines = [(a, b, 0.1, 0.1) for a, b in random_tree_edges(rng, n)]
            switches = []
            for _ in range(int(rng.integers(0, 2 * n))):
                a, b = rng.choice(n, 2, replace=False)
                switches.append((int(a), int(b), bool(rng.random() < 0.7)))
            topo = make_grid(n, lines=lines, switches=switches)
            groups, _ = fuse_switch_buses(topo)
            closed = [(a, b) for a, b, c in switches if c]
            mismatches += sorted(groups, key=min) != union_find_groups(range(n), closed)
        star = make_grid(6, switches=[(0, i, True) for i in range(1, 6)])
        star_nodes = build_electrical_graph(star, False).node_count
    ok = mismatches == 0 and star_nodes == 1 and clock.seconds < 5
    verdict(4, ok, f"{mismatches}/100 mismatches, star -> {star_nodes} node, "
                   f"{clock.seconds:.2f} s")
    assert ok


@pytest.mark.slow
def test_c05_topology_change_close_to_baseline(verdict, fixture_sweep):
    sweep = fixture_sweep
    best = {k: min(sweep.table.filter(scenario=k), key=lambda r: r.mse)
            for k in (ScenarioKind.TC1, ScenarioKind.TC2)}
    ratios = {k: r.mse / sweep.baseline for k, r in best.items()}
    ok = all(v <= 1.25 for v in ratios.values()) and sweep.seconds < 15 * 60
    detail = ", ".join(f"{k.value} {best[k].mse:.3g} ({v:.2f}x)" for k, v in ratios.items())
    verdict(5, ok, f"baseline {sweep.baseline:.3g}; {detail} (<= 1.25x), {sweep.seconds:.0f} s")
    assert ok, detail


def _mean_smoothness(outputs: np.ndarray) -> float:
    return float(np.mean([smoothness_metric(o) for o in outputs]))


@pytest.mark.slow
def test_c06_oversmoothing(verdict, fixture_sweep):
    bench = fixture_sweep.bench
    part = bench.parts("pq_test", False)[0]
    ratios = {}
    with Clock() as clock:
        batch = make_batch([part], True, bench.model(ModelConfig("GCN", 1), "pq_train").scaler)
        for kind in (LayerKind.GCN, LayerKind.GAT):
            shallow, deep = ModelConfig(kind, 1), ModelConfig(kind, 10)
            untrained = [build_model(c)(batch.x, batch.graph).data.reshape(*part.voltages.shape)
                         for c in (shallow, deep)]
            trained = [predict_voltages(bench.model(c, "pq_train"), part) for c in (shallow, deep)]
            for label, (a, b) in (("untrained", untrained), ("trained", trained)):
                ratios[f"{kind.value} {label}"] = _mean_smoothness(b) / _mean_smoothness(a)

        def depth_mean(depths):
            return float(np.mean([bench.in_distribution_mse(ModelConfig(k, d, use_fp=fp,
                                                                        use_adm=adm))
                                  for k in LayerKind for d in depths
                                  for fp in (True, False) for adm in (True, False)]))

        shallow_mse, deep_mse = depth_mean((2, 3)), depth_mean((8, 9, 10))
    ok = all(r < 0.1 for r in ratios.values()) and deep_mse > shallow_mse \
        and clock.seconds < 5 * 60
    detail = ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
    verdict(6, ok, f"depth-10/depth-1 smoothness {detail} (< 0.1); mean MSE depths 8-10 "
                   f"{deep_mse:.3g} vs 2-3 {shallow_mse:.3g}, {clock.seconds:.0f} s")
    assert ok


@pytest.mark.slow
def test_c07_observability_degradation_is_monotone(verdict, fixture_sweep):
    best = min(fixture_sweep.table.filter(scenario=ScenarioKind.OD), key=lambda r: r.mse)
    levels, mses = zip(*best.curve)
    assert levels == (0.5, 0.4, 0.3, 0.2, 0.1, 0.0)
    drops = [(b - a) / a for a, b in zip(mses, mses[1:]) if b < a]
    ok = mses[-1] > mses[0] and len(drops) <= 1 and all(-d <= 0.05 for d in drops)
    curve = " ".join(f"{m:.3g}" for m in mses)
    verdict(7, ok, f"{best.model} {best.layers}L fp={best.fp} adm={best.adm}: {curve}; "
                   f"{len(drops)} inversion(s)")
    assert ok


def test_c08_permutation_equivariance(verdict):
    rng = np.random.default_rng(108)
    worst = 0.0
    with Clock() as clock:
        for _ in range(20):
            n = int(rng.integers(4, 30))
            graph = random_message_graph(rng, n, extra=int(rng.integers(0, n)))
            perm = rng.permutation(n)
            moved = graph.permuted(perm)
            x = rng.standard_normal((n, 3))
            px = np.empty_like(x)
            px[perm] = x
            for kind in LayerKind:
                layer = LAYER_TYPES[kind](3, 4, rng)
                model = build_model(ModelConfig(kind, 3, use_adm=True,
                                                seed=int(rng.integers(1000))))
                for weighted in (False, True):
                    a = layer(Tensor(x), graph, weighted).data
                    b = layer(Tensor(px), moved, weighted).data
                    worst = max(worst, float(np.max(np.abs(b[perm] - a))))
                a, b = model(x, graph).data, model(px, moved).data
                worst = max(worst, float(np.max(np.abs(b[perm] - a))))
    ok = worst < 1e-6 and clock.seconds < 30
    verdict(8, ok, f"max abs diff {worst:.1e} (< 1e-6), {clock.seconds:.1f} s")
    assert ok


def test_c09_grid_search_is_deterministic(verdict, tmp_path):
    with Clock() as clock:
        data = tmp_path / "data"
        assert main(["gen-data", "--steps", "4", "--out", str(data)]) == 0
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            argv = ["grid-search", "--data", str(data), "--epochs", "1", "--jobs", "4",
                    "--out", str(out)]
            assert main(argv) == 0
            outputs.append((out / "results.csv").read_bytes())
        table = ResultsTable.from_csv(outputs[0].decode())
        counts = {k.value: len(table.filter(scenario=k)) for k in table.scenarios()}
        header = outputs[0].decode().splitlines()[0]
    ok = (outputs[0] == outputs[1] and header == ",".join(CSV_HEADER)
          and list(counts.values()) == [160] * 5 and clock.seconds < 5 * 60)
    verdict(9, ok, f"identical bytes: {outputs[0] == outputs[1]}, rows per scenario "
                   f"{sorted(set(counts.values()))} x {len(counts)}, {clock.seconds:.0f} s")
    assert ok


def _direct_pearson(x: np.ndarray, y: np.ndarray) -> float:
    n = len(x)
    sx, sy = sum(x), sum(y)
    num = n * sum(a * b for a, b in zip(x, y)) - sx * sy
    den = np.sqrt(n * sum(a * a for a in x) - sx * sx) * np.sqrt(n * sum(b * b for b in y) - sy * sy)
    return float(num / den)


def test_c10_correlation_matrix(verdict):
    rng = np.random.default_rng(110)
    worst, symmetric, unit = 0.0, True, True
    for _ in range(10):
        layers = range(1, int(rng.integers(3, 11)))
        table = random_table(rng, layers=layers)
        corr = correlation_matrix(table)
        _, data = pivot_configs(table)
        # standardise before the textbook formula so its cancellation stays small
        z = (data - data.mean(axis=0)) / data.std(axis=0)
        k = len(corr.labels)
        for i in range(k):
            for j in range(k):
                worst = max(worst, abs(corr.values[i, j] - _direct_pearson(z[:, i], z[:, j])))
        symmetric &= bool(np.array_equal(corr.values, corr.values.T))
        unit &= bool(np.all(np.diag(corr.values) == 1.0))
    ok = worst < 1e-10 and symmetric and unit
    verdict(10, ok, f"max diff vs direct formula {worst:.1e} (< 1e-10), symmetric {symmetric}, "
                    f"unit diagonal {unit}")
    assert ok
