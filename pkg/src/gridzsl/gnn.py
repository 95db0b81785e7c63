"""GCN, GAT, GIN and GraphSAGE layers and the configurable model stack."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Linear, Module, Tensor
from .grid_model import ElectricalGraph, symmetric_normalize, weighted_adjacency

MAX_LAYERS = 10
IN_CHANNELS = 3
OUT_CHANNELS = 2


class LayerKind(str, enum.Enum):
    GCN = "GCN"
    GAT = "GAT"
    GIN = "GIN"
    SAGE = "GraphSAGE"

    @classmethod
    def parse(cls, name: str) -> "LayerKind":
        key = name.strip().lower()
        for kind in cls:
            if key in (kind.value.lower(), kind.name.lower()):
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown model {name!r}; valid names: {valid}")


@dataclass(frozen=True)
class ModelConfig:
    kind: LayerKind
    layers: int
    hidden_dim: int = 4
    use_fp: bool = True
    use_adm: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if not 1 <= self.layers <= MAX_LAYERS:
            raise ValueError(f"layers must lie in [1, {MAX_LAYERS}], got {self.layers}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


@dataclass(frozen=True)
class Scaler:
    """Per-channel standardisation of (v_real, v_imag)."""

    mean: tuple[float, float] = (0.0, 0.0)
    std: tuple[float, float] = (1.0, 1.0)

    @classmethod
    def fit(cls, voltages: Sequence[np.ndarray]) -> "Scaler":
        flat = np.concatenate([np.reshape(v, (-1, 2)) for v in voltages])
        std = flat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(flat.mean(axis=0).tolist()), tuple(std.tolist()))

    def transform(self, v: np.ndarray) -> np.ndarray:
        return (v - np.array(self.mean)) / np.array(self.std)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * np.array(self.std) + np.array(self.mean)


class MessageGraph:
    """Edge lists and cached propagation operators for one or more graphs.

    Several graphs (or copies of one graph, one per snapshot) are laid out
    as a disjoint union, so a batch is just a bigger graph. Edges are stored
    in both directions; ``src -> dst`` carries a message into ``dst``.
    """

    def __init__(self, num_nodes: int, u: np.ndarray, v: np.ndarray, w: np.ndarray):
        self.num_nodes = int(num_nodes)
        u, v, w = np.asarray(u, int), np.asarray(v, int), np.asarray(w, float)
        if np.any(u == v):
            raise ValueError("self-loops are added by the layers, not stored")
        self.u, self.v, self.w = u, v, w
        self.src = np.concatenate([u, v])
        self.dst = np.concatenate([v, u])
        self.weight = np.concatenate([w, w])
        self._ops: dict = {}

    @classmethod
    def from_graph(cls, graph: ElectricalGraph, copies: int = 1) -> "MessageGraph":
        return cls.union([graph] * copies)

    @classmethod
    def union(cls, graphs: Sequence[ElectricalGraph]) -> "MessageGraph":
        us, vs, ws, offset = [], [], [], 0
        for g in graphs:
            u, v, w = g.edge_arrays()
            us.append(u + offset)
            vs.append(v + offset)
            ws.append(w)
            offset += g.node_count
        return cls(offset, np.concatenate(us), np.concatenate(vs), np.concatenate(ws))

    def permuted(self, perm: np.ndarray) -> "MessageGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return MessageGraph(self.num_nodes, perm[self.u], perm[self.v], self.w)

    def with_weights(self, w: np.ndarray) -> "MessageGraph":
        return MessageGraph(self.num_nodes, self.u, self.v, w)

    def _adjacency(self, weighted: bool) -> sp.csr_matrix:
        w = self.w if weighted else np.ones_like(self.w)
        return weighted_adjacency(self.num_nodes, self.u, self.v, w)

    def _cached(self, key, build):
        if key not in self._ops:
            self._ops[key] = build()
        return self._ops[key]

    def gcn_operator(self, weighted: bool) -> sp.csr_matrix:
        return self._cached(("gcn", weighted),
                            lambda: symmetric_normalize(self._adjacency(weighted), True))

    def sum_operator(self, weighted: bool) -> sp.csr_matrix:
        return self._cached(("sum", weighted), lambda: self._adjacency(weighted))

    def mean_operator(self, weighted: bool) -> sp.csr_matrix:
        def build():
            adj = self._adjacency(weighted)
            deg = np.asarray(adj.sum(axis=1)).ravel()
            inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
            return (sp.diags(inv) @ adj).tocsr()
        return self._cached(("mean", weighted), build)

    def attention_edges(self, weighted: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, log-weight bias) including one self-loop per node."""
        def build():
            loops = np.arange(self.num_nodes)
            src = np.concatenate([self.src, loops])
            dst = np.concatenate([self.dst, loops])
            if weighted:
                bias = np.concatenate([np.log(self.weight), np.zeros(self.num_nodes)])
            else:
                bias = np.zeros(len(src))
            return src, dst, bias[:, None]
        return self._cached(("att", weighted), build)


class GCNLayer(Module):
    """H' = D^-1/2 (A + I) D^-1/2 H W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.lin = Linear(in_dim, out_dim, rng)

    def __call__(self, h: Tensor, graph: MessageGraph, use_edge_weights: bool) -> Tensor:
        prop = ag.spmm(graph.gcn_operator(use_edge_weights), h)
        return self.lin(prop)


class GATLayer(Module):
    """Single-head attention over in-neighbours plus a self-loop.

    With edge weights the logit of edge j->i gets ``log w_ij`` added, which
    multiplies the unnormalised attention by the weight; self-loops get 1.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 negative_slope: float = 0.2):
        self.weight = ag.glorot(in_dim, out_dim, rng)
        self.att_src = ag.glorot(out_dim, 1, rng)
        self.att_dst = ag.glorot(out_dim, 1, rng)
        self.bias = ag.zeros(out_dim)
        self.negative_slope = negative_slope

    def attention(self, h: Tensor, graph: MessageGraph, use_edge_weights: bool):
        z = ag.matmul(h, self.weight)
        src, dst, bias = graph.attention_edges(use_edge_weights)
        score = ag.add(ag.gather(ag.matmul(z, self.att_src), src),
                       ag.gather(ag.matmul(z, self.att_dst), dst))
        logits = ag.add(ag.leaky_relu(score, self.negative_slope), bias)
        alpha = ag.neighbor_softmax(logits, dst, graph.num_nodes)
        return z, alpha, src, dst

    def __call__(self, h: Tensor, graph: MessageGraph, use_edge_weights: bool) -> Tensor:
        z, alpha, src, dst = self.attention(h, graph, use_edge_weights)
        messages = ag.mul(ag.gather(z, src), alpha)
        return ag.add(ag.segment_sum(messages, dst, graph.num_nodes), self.bias)


class GINLayer(Module):
    """h'_i = MLP((1 + eps) h_i + sum_j w_ij h_j) with a two-layer ReLU MLP."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.eps = ag.zeros(1)
        self.mlp1 = Linear(in_dim, out_dim, rng)
        self.mlp2 = Linear(out_dim, out_dim, rng)

    def __call__(self, h: Tensor, graph: MessageGraph, use_edge_weights: bool) -> Tensor:
        agg = ag.spmm(graph.sum_operator(use_edge_weights), h)
        combined = ag.add(ag.mul(h, ag.add(self.eps, 1.0)), agg)
        return self.mlp2(ag.relu(self.mlp1(combined)))


class SAGELayer(Module):
    """h'_i = W_self h_i + W_neigh mean_j h_j + b; weighted mean with edge weights."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.lin_self = Linear(in_dim, out_dim, rng)
        self.lin_neigh = Linear(in_dim, out_dim, rng, bias=False)

    def __call__(self, h: Tensor, graph: MessageGraph, use_edge_weights: bool) -> Tensor:
        mean = ag.spmm(graph.mean_operator(use_edge_weights), h)
        return ag.add(self.lin_self(h), self.lin_neigh(mean))


LAYER_TYPES = {
    LayerKind.GCN: GCNLayer,
    LayerKind.GAT: GATLayer,
    LayerKind.GIN: GINLayer,
    LayerKind.SAGE: SAGELayer,
}


class GnnModel(Module):
    """``layers`` message-passing layers with ReLU between them and a linear readout."""

    def __init__(self, config: ModelConfig, in_channels: int = IN_CHANNELS,
                 out_channels: int = OUT_CHANNELS):
        self.config = config
        rng = np.random.default_rng(config.seed)
        layer_type = LAYER_TYPES[config.kind]
        dims = [in_channels] + [config.hidden_dim] * config.layers
        self.convs = [layer_type(dims[i], dims[i + 1], rng) for i in range(config.layers)]
        self.readout = Linear(config.hidden_dim, out_channels, rng)
        # fixed voltage standardisation, fitted on the training data
        self.scaler = Scaler()

    def hidden_states(self, x, graph: MessageGraph) -> list[Tensor]:
        """Node representation after each message-passing layer."""
        h = ag.as_tensor(x)
        states = []
        for i, conv in enumerate(self.convs):
            h = conv(h, graph, self.config.use_adm)
            states.append(h)
            if i < len(self.convs) - 1:
                h = ag.relu(h)
        return states

    def __call__(self, x, graph: MessageGraph) -> Tensor:
        x = ag.as_tensor(x)
        if x.shape[0] != graph.num_nodes:
            raise ValueError(f"{x.shape[0]} feature rows for {graph.num_nodes} nodes")
        return self.readout(self.hidden_states(x, graph)[-1])


def build_model(config: ModelConfig, in_channels: int = IN_CHANNELS,
                out_channels: int = OUT_CHANNELS) -> GnnModel:
    return GnnModel(config, in_channels, out_channels)


def _as_message_graph(graph) -> MessageGraph:
    return graph if isinstance(graph, MessageGraph) else MessageGraph.from_graph(graph)


def predict(model: GnnModel, graph: ElectricalGraph | MessageGraph,
            features: np.ndarray) -> np.ndarray:
    """Voltage estimates, one (v_real, v_imag) row per node."""
    mgraph = _as_message_graph(graph)
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] != mgraph.num_nodes:
        raise ValueError(f"features of shape {features.shape} do not fit "
                         f"{mgraph.num_nodes} nodes")
    return model(features, mgraph).data


def smoothness_metric(outputs: np.ndarray) -> float:
    """Mean over channels of the across-node variance; 0 when all rows agree."""
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    return float(np.mean(np.var(outputs, axis=0)))


def save_model(model: GnnModel, path: str | Path) -> None:
    """Configuration, voltage scaler and weights in one JSON file."""
    config = asdict(model.config)
    config["kind"] = model.config.kind.value
    doc = {"config": config, "scaler": asdict(model.scaler),
           "parameters": ag.parameter_records(model)}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path: str | Path) -> GnnModel:
    doc = json.loads(Path(path).read_text())
    model = build_model(ModelConfig(**doc["config"]))
    model.scaler = Scaler(tuple(doc["scaler"]["mean"]), tuple(doc["scaler"]["std"]))
    ag.load_parameter_records(model, doc["parameters"])
    return model
