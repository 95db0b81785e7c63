"""Training, the five transfer scenarios and the exhaustive configuration sweep."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .gnn import MAX_LAYERS, GnnModel, LayerKind, MessageGraph, ModelConfig, Scaler, build_model
from .grid_model import ElectricalGraph, GridTopology, build_electrical_graph
from .powerflow import Snapshot, generate_time_series
from .propagation import PropagationConfig, propagate_features
from .scenarios import (
    ObservabilityMask,
    TopologyVariant,
    degrade_observability,
    make_topology_variants,
    project_mask,
    sample_observability_mask,
    split_variants,
)

log = logging.getLogger(__name__)

OD_LEVELS = (0.5, 0.4, 0.3, 0.2, 0.1, 0.0)
CSV_HEADER = ("scenario", "model", "layers", "fp", "adm", "mse", "n_params", "seed")


class ScenarioKind(str, enum.Enum):
    OD = "OD"
    TC1 = "TC1"
    TC2 = "TC2"
    PQ2MV = "PQ2MV"
    MV2PQ = "MV2PQ"

    @classmethod
    def parse(cls, name: str) -> "ScenarioKind":
        try:
            return cls(name.strip().upper())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown scenario {name!r}; valid names: {valid}") from None


class TrainingError(RuntimeError):
    pass


class MissingDataError(LookupError):
    pass


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 200
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class GraphData:
    """Ground-truth node voltages of one topology plus its measurement mask.

    ``voltages`` has shape (snapshots, nodes, 2) holding (v_real, v_imag) in
    per unit.
    """

    name: str
    graph: ElectricalGraph
    voltages: np.ndarray
    mask: ObservabilityMask


def node_voltages(graph: ElectricalGraph, snapshots: Sequence[Snapshot]) -> np.ndarray:
    buses = graph.representative_buses()
    out = np.empty((len(snapshots), graph.node_count, 2))
    for s, snap in enumerate(snapshots):
        for node, bus in enumerate(buses):
            v = snap.voltages.complex_voltage(bus)
            out[s, node] = v.real, v.imag
    return out


def build_features(part: GraphData, use_fp: bool, scaler: Scaler = Scaler(),
                   prop_config: PropagationConfig = PropagationConfig(),
                   mask: ObservabilityMask | None = None) -> np.ndarray:
    """Input tensor (snapshots, nodes, 3): scaled voltages, fill, observed flag.

    Observed voltages are standardised first, so the zero fill of
    unobserved nodes stands for the training mean. Diffusion commutes with
    the affine scaling because the operator's rows sum to one.
    """
    mask = part.mask if mask is None else mask
    observed = mask.observed
    n_steps, n_nodes, _ = part.voltages.shape
    values = np.where(observed[None, :, None], scaler.transform(part.voltages), 0.0)
    if use_fp and observed.any():
        # all snapshots diffuse at once as extra channels
        wide = values.transpose(1, 0, 2).reshape(n_nodes, -1)
        wide = propagate_features(part.graph, wide, observed, prop_config)
        values = wide.reshape(n_nodes, n_steps, 2).transpose(1, 0, 2)
    flag = np.broadcast_to(observed[None, :, None].astype(float), (n_steps, n_nodes, 1))
    return np.concatenate([values, flag], axis=2)


@dataclass
class Batch:
    graph: MessageGraph
    x: np.ndarray
    y: np.ndarray


def make_batch(parts: Sequence[GraphData], use_fp: bool, scaler: Scaler = Scaler(),
               prop_config: PropagationConfig = PropagationConfig(),
               masks: Sequence[ObservabilityMask] | None = None) -> Batch:
    """Disjoint union of every snapshot graph; targets are scaled voltages."""
    graphs, xs, ys = [], [], []
    for i, part in enumerate(parts):
        feats = build_features(part, use_fp, scaler, prop_config,
                               None if masks is None else masks[i])
        graphs.extend([part.graph] * part.voltages.shape[0])
        xs.append(feats.reshape(-1, feats.shape[2]))
        ys.append(scaler.transform(part.voltages).reshape(-1, 2))
    return Batch(MessageGraph.union(graphs), np.concatenate(xs), np.concatenate(ys))


def fit(model: GnnModel, batch: Batch, options: TrainOptions = TrainOptions()) -> list[float]:
    """Full-batch Adam on the MSE over all nodes; returns the loss per epoch."""
    opt = ag.Adam(model.parameters(), lr=options.lr, beta1=options.beta1,
                  beta2=options.beta2, eps=options.eps)
    losses = []
    for epoch in range(options.epochs):
        opt.zero_grad()
        loss = ag.mse_loss(model(batch.x, batch.graph), batch.y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
        loss.backward()
        opt.step()
        losses.append(value)
    return losses


def train_model(config: ModelConfig, parts: Sequence[GraphData],
                options: TrainOptions = TrainOptions(),
                prop_config: PropagationConfig = PropagationConfig()) -> tuple[GnnModel, list[float]]:
    """Fit a fresh model; its voltage scaler comes from the training truth."""
    if not parts or any(p.voltages.shape[0] == 0 for p in parts):
        raise ValueError("training data is empty")
    for p in parts:
        if p.mask.node_count != p.graph.node_count:
            raise ValueError(f"{p.name}: mask does not match the graph")
    model = build_model(config)
    model.scaler = Scaler.fit([p.voltages for p in parts])
    losses = fit(model, make_batch(parts, config.use_fp, model.scaler, prop_config), options)
    return model, losses


def predict_voltages(model: GnnModel, part: GraphData,
                     prop_config: PropagationConfig = PropagationConfig(),
                     mask: ObservabilityMask | None = None) -> np.ndarray:
    """Per-unit estimates of shape (snapshots, nodes, 2)."""
    batch = make_batch([part], model.config.use_fp, model.scaler, prop_config,
                       None if mask is None else [mask])
    pred = model.scaler.inverse(model(batch.x, batch.graph).data)
    return pred.reshape(part.voltages.shape)


def evaluate_mse(model: GnnModel, parts: Sequence[GraphData],
                 prop_config: PropagationConfig = PropagationConfig(),
                 masks: Sequence[ObservabilityMask] | None = None) -> float:
    """Per-unit MSE over both channels, all nodes and all snapshots."""
    total, count = 0.0, 0
    for i, part in enumerate(parts):
        pred = predict_voltages(model, part, prop_config, None if masks is None else masks[i])
        total += float(np.sum((pred - part.voltages) ** 2))
        count += pred.size
    return total / count


@dataclass(frozen=True)
class GridSeries:
    topology: GridTopology
    snapshots: tuple[Snapshot, ...]
    variant: TopologyVariant | None = None

    @property
    def name(self) -> str:
        return self.topology.name


@dataclass(frozen=True)
class BenchData:
    pq: GridSeries
    variants: tuple[GridSeries, ...] = ()
    mv: GridSeries | None = None


@dataclass(frozen=True)
class BenchSettings:
    observability: float = 0.5
    mask_seed: int = 0
    split_seed: int = 0
    split_ratio: float = 0.5
    od_levels: tuple[float, ...] = OD_LEVELS
    hidden_dim: int = 4
    train: TrainOptions = TrainOptions()
    propagation: PropagationConfig = PropagationConfig()


@dataclass(frozen=True)
class BenchmarkResult:
    scenario: ScenarioKind
    model: str
    layers: int
    fp: bool
    adm: bool
    mse: float
    n_params: int
    seed: int
    curve: tuple[tuple[float, float], ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "scenario", ScenarioKind(self.scenario))
        if not (math.isfinite(self.mse) and self.mse >= 0):
            raise ValueError(f"invalid mse {self.mse}")
        # the CSV keeps 6 significant digits; round here so files round-trip exactly
        object.__setattr__(self, "mse", float(f"{self.mse:.6g}"))

    @property
    def key(self) -> tuple:
        return (self.scenario, self.model, self.layers, self.fp, self.adm, self.seed)


def _half(snapshots: Sequence[Snapshot]) -> tuple[Sequence[Snapshot], Sequence[Snapshot]]:
    cut = len(snapshots) // 2
    if cut == 0:
        raise ValueError("need at least two snapshots for a chronological split")
    return snapshots[:cut], snapshots[cut:]


class Benchmark:
    """Datasets, masks and trained models shared by the scenarios.

    Training is deterministic per configuration, so a model trained on a
    given training set is built once and reused by every scenario that
    trains on that set.
    """

    def __init__(self, data: BenchData, settings: BenchSettings = BenchSettings()):
        self.data = data
        self.settings = settings
        self._parts: dict[tuple[str, bool], list[GraphData]] = {}
        self._models: dict[tuple[str, ModelConfig], GnnModel] = {}
        self.histories: dict[tuple[str, ModelConfig], list[float]] = {}

    def _graph_data(self, series: GridSeries, snapshots, use_adm: bool,
                    mask: ObservabilityMask | None, reference: ElectricalGraph | None,
                    tag: str) -> GraphData:
        graph = build_electrical_graph(series.topology, use_adm)
        if mask is None:
            mask = sample_observability_mask(graph.node_count, self.settings.observability,
                                             self.settings.mask_seed, graph.slack_node)
        elif reference is not None:
            mask = project_mask(mask, reference, graph)
        return GraphData(f"{series.name}:{tag}", graph, node_voltages(graph, snapshots), mask)

    def _build_parts(self, use_adm: bool) -> None:
        d = self.data
        pq_train, pq_test = _half(d.pq.snapshots)
        train = self._graph_data(d.pq, pq_train, use_adm, None, None, "train")
        test = GraphData(f"{d.pq.name}:test", train.graph,
                         node_voltages(train.graph, pq_test), train.mask)
        self._parts[("pq_train", use_adm)] = [train]
        self._parts[("pq_test", use_adm)] = [test]
        if len(d.variants) >= 2:
            tc_train, tc_test = split_variants(list(d.variants), self.settings.split_ratio,
                                               self.settings.split_seed)
            self._parts[("tc_train", use_adm)] = [
                self._graph_data(v, _half(v.snapshots)[0], use_adm, train.mask, train.graph, "train")
                for v in tc_train]
            self._parts[("tc_test", use_adm)] = [
                self._graph_data(v, _half(v.snapshots)[1], use_adm, train.mask, train.graph, "test")
                for v in tc_test]
        if d.mv is not None:
            mv_train, mv_test = _half(d.mv.snapshots)
            mtrain = self._graph_data(d.mv, mv_train, use_adm, None, None, "train")
            self._parts[("mv_train", use_adm)] = [mtrain]
            self._parts[("mv_test", use_adm)] = [
                GraphData(f"{d.mv.name}:test", mtrain.graph,
                          node_voltages(mtrain.graph, mv_test), mtrain.mask)]

    def parts(self, role: str, use_adm: bool) -> list[GraphData]:
        if (role, use_adm) not in self._parts:
            self._build_parts(use_adm)
        try:
            return self._parts[(role, use_adm)]
        except KeyError:
            raise MissingDataError(role) from None

    def model(self, config: ModelConfig, role: str) -> GnnModel:
        key = (role, config)
        if key not in self._models:
            model, losses = train_model(config, self.parts(role, config.use_adm),
                                        self.settings.train, self.settings.propagation)
            self._models[key] = model
            self.histories[key] = losses
        return self._models[key]

    def trained_models(self) -> list[tuple[str, ModelConfig, GnnModel]]:
        return [(role, config, model) for (role, config), model in self._models.items()]

    def mse(self, config: ModelConfig, train_role: str, test_role: str,
            masks: Sequence[ObservabilityMask] | None = None) -> float:
        model = self.model(config, train_role)
        return evaluate_mse(model, self.parts(test_role, config.use_adm),
                            self.settings.propagation, masks)

    def in_distribution_mse(self, config: ModelConfig) -> float:
        """Trained on the first half of the base series, tested on the second."""
        return self.mse(config, "pq_train", "pq_test")

    def od_curve(self, config: ModelConfig) -> list[tuple[float, float]]:
        part = self.parts("pq_test", config.use_adm)[0]
        curve = []
        for level in self.settings.od_levels:
            mask = degrade_observability(part.mask, min(level, part.mask.fraction),
                                         self.settings.mask_seed, part.graph.slack_node)
            curve.append((level, self.mse(config, "pq_train", "pq_test", [mask])))
        return curve


_REQUIRES = {
    ScenarioKind.OD: ("pq_train", "pq_test"),
    ScenarioKind.TC1: ("pq_train", "tc_test"),
    ScenarioKind.TC2: ("tc_train", "tc_test"),
    ScenarioKind.PQ2MV: ("pq_train", "mv_test"),
    ScenarioKind.MV2PQ: ("mv_train", "pq_test"),
}


def run_scenario(kind: ScenarioKind, bench: Benchmark, config: ModelConfig) -> BenchmarkResult:
    """Train on the scenario's source data and score zero-shot on its target.

    OD averages over the degradation levels and keeps the per-level curve.
    """
    kind = ScenarioKind(kind)
    train_role, test_role = _REQUIRES[kind]
    for role in (train_role, test_role):
        try:
            bench.parts(role, config.use_adm)
        except MissingDataError:
            raise MissingDataError(f"scenario {kind.value} needs the '{role}' dataset") from None
    curve: list[tuple[float, float]] = []
    if kind is ScenarioKind.OD:
        curve = bench.od_curve(config)
        mse = float(np.mean([m for _, m in curve]))
    else:
        mse = bench.mse(config, train_role, test_role)
    return BenchmarkResult(
        scenario=kind,
        model=config.kind.value,
        layers=config.layers,
        fp=config.use_fp,
        adm=config.use_adm,
        mse=mse,
        n_params=ag.count_parameters(build_model(config)),
        seed=config.seed,
        curve=tuple(curve),
    )


@dataclass(frozen=True)
class SearchSpace:
    models: tuple[LayerKind, ...] = tuple(LayerKind)
    layers: tuple[int, ...] = tuple(range(1, MAX_LAYERS + 1))
    fp: tuple[bool, ...] = (True, False)
    adm: tuple[bool, ...] = (True, False)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(LayerKind(m) for m in self.models))
        for n in self.layers:
            if not 1 <= n <= MAX_LAYERS:
                raise ValueError(f"layers must lie in [1, {MAX_LAYERS}]")
        if not len(self):
            raise ValueError("search space is empty")

    def __len__(self) -> int:
        return len(self.models) * len(self.layers) * len(self.fp) * len(self.adm)

    def configs(self, seed: int = 0, hidden_dim: int = 4) -> list[ModelConfig]:
        return [
            ModelConfig(kind, n, hidden_dim=hidden_dim, use_fp=fp, use_adm=adm, seed=seed)
            for kind, n, fp, adm in itertools.product(self.models, self.layers, self.fp, self.adm)
        ]


_MODEL_ORDER = {k.value: i for i, k in enumerate(LayerKind)}
_SCENARIO_ORDER = {k: i for i, k in enumerate(ScenarioKind)}


def _sort_key(r: BenchmarkResult) -> tuple:
    return (_SCENARIO_ORDER[r.scenario], _MODEL_ORDER.get(r.model, 99), r.model,
            r.layers, r.fp, r.adm, r.seed)


class ResultsTable:
    """Ordered benchmark rows with unique (scenario, config, seed) keys."""

    def __init__(self, rows: Iterable[BenchmarkResult] = ()):
        self.rows = sorted(rows, key=_sort_key)
        keys = [r.key for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (scenario, model, layers, fp, adm, seed) rows")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        return isinstance(other, ResultsTable) and self.rows == other.rows

    def scenarios(self) -> list[ScenarioKind]:
        return sorted({r.scenario for r in self.rows}, key=_SCENARIO_ORDER.get)

    def filter(self, **criteria) -> "ResultsTable":
        return ResultsTable(r for r in self.rows
                            if all(getattr(r, k) == v for k, v in criteria.items()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.scenario.value, r.model, r.layers, r.fp, r.adm,
                             f"{r.mse:.6g}", r.n_params, r.seed])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ResultsTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            raise ValueError("results file is empty")
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")

        def boolean(s: str) -> bool:
            if s not in ("True", "False"):
                raise ValueError(f"expected True/False, got {s!r}")
            return s == "True"

        rows = []
        for rec in reader:
            if not rec:
                continue
            scen, model, layers, fp, adm, mse, n_params, seed = rec
            rows.append(BenchmarkResult(ScenarioKind(scen), model, int(layers), boolean(fp),
                                        boolean(adm), float(mse), int(n_params), int(seed)))
        return cls(rows)

    @classmethod
    def read_csv(cls, path: str | Path) -> "ResultsTable":
        return cls.from_csv(Path(path).read_text())


def od_curves_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "layers", "fp", "adm", "seed", "level", "mse"])
    for r in table:
        for level, mse in r.curve:
            writer.writerow([r.model, r.layers, r.fp, r.adm, r.seed, f"{level:g}", f"{mse:.6g}"])
    return buf.getvalue()


@dataclass
class SearchOutcome:
    table: ResultsTable
    errors: list[tuple[str, str]] = field(default_factory=list)


_WORKER: Benchmark | None = None


def _init_worker(data: BenchData, settings: BenchSettings) -> None:
    global _WORKER
    _WORKER = Benchmark(data, settings)


def _run_config(bench: Benchmark, scenarios: Sequence[ScenarioKind], config: ModelConfig):
    rows, errors = [], []
    for kind in scenarios:
        try:
            rows.append(run_scenario(kind, bench, config))
        except MissingDataError:
            raise
        except Exception as exc:  # one failing configuration must not stop the sweep
            errors.append((f"{kind.value} {config}", f"{type(exc).__name__}: {exc}"))
    return rows, errors


def _run_config_in_worker(scenarios, config):
    return _run_config(_WORKER, scenarios, config)


def grid_search(scenarios: Sequence[ScenarioKind], space: SearchSpace, bench: Benchmark,
                seeds: Sequence[int] = (0,), jobs: int = 1) -> SearchOutcome:
    """Every (scenario, configuration, seed) of ``space``."""
    scenarios = [ScenarioKind(s) for s in scenarios]
    configs = [c for seed in seeds
               for c in space.configs(seed, bench.settings.hidden_dim)]
    rows, errors = [], []
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker,
                                 initargs=(bench.data, bench.settings)) as pool:
            results = pool.map(_run_config_in_worker, [scenarios] * len(configs), configs)
            for r, e in results:
                rows.extend(r)
                errors.extend(e)
    else:
        for config in configs:
            r, e = _run_config(bench, scenarios, config)
            rows.extend(r)
            errors.extend(e)
    for where, msg in errors:
        log.error("config failed: %s: %s", where, msg)
    return SearchOutcome(ResultsTable(rows), errors)


def baseline_mse(bench: Benchmark, space: SearchSpace, seeds: Sequence[int] = (0,)) -> float:
    """Best in-distribution MSE over the space (chronological half split)."""
    return min(bench.in_distribution_mse(c) for seed in seeds
               for c in space.configs(seed, bench.settings.hidden_dim))


def generate_bench_data(pq: GridTopology, mv: GridTopology | None, n_steps: int,
                        seed: int = 0, profile=None) -> BenchData:
    """Simulate the base grid, each of its loop-switch variants and the second grid."""
    def series(topology, variant=None):
        return GridSeries(topology, tuple(generate_time_series(topology, n_steps, profile, seed)),
                          variant)

    variants = tuple(series(v.variant_topology, v) for v in make_topology_variants(pq))
    return BenchData(series(pq), variants, series(mv) if mv is not None else None)
