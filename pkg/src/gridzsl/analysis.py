"""Summaries of a results table: augmentation means, correlations, depth trends."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .bench import BenchmarkResult, ResultsTable, ScenarioKind


def truncate_results(table: ResultsTable, max_layers: int = 7) -> ResultsTable:
    return ResultsTable(r for r in table if r.layers <= max_layers)


@dataclass(frozen=True)
class AugmentationRow:
    scenario: ScenarioKind
    fp: bool
    adm: bool
    mean_mse: float
    count: int


def aggregate_augmentations(table: ResultsTable) -> list[AugmentationRow]:
    """Mean MSE per scenario and (fp, adm) pair, averaged over all other settings."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in table:
        groups[(r.scenario, r.fp, r.adm)].append(r.mse)
    order = {k: i for i, k in enumerate(ScenarioKind)}
    keys = sorted(groups, key=lambda k: (order[k[0]], not k[1], not k[2]))
    return [AugmentationRow(s, fp, adm, float(np.mean(groups[(s, fp, adm)])),
                            len(groups[(s, fp, adm)]))
            for s, fp, adm in keys]


def augmentations_csv(rows: list[AugmentationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "fp", "adm", "mean_mse", "count"])
    for r in rows:
        writer.writerow([r.scenario.value, r.fp, r.adm, f"{r.mean_mse:.6g}", r.count])
    return buf.getvalue()


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pearson coefficients; NaN marks an undefined (zero-variance) entry."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = (self.labels.index(p) for p in pair)
        return float(self.values[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([""] + list(self.labels))
        for label, row in zip(self.labels, self.values):
            writer.writerow([label] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])
        return buf.getvalue()


def pivot_configs(table: ResultsTable) -> tuple[list[str], np.ndarray]:
    """One row per configuration holding n_params, fp, adm and each scenario's MSE.

    Configurations missing from any scenario are left out.
    """
    scenarios = table.scenarios()
    by_config: dict[tuple, dict] = defaultdict(dict)
    for r in table:
        cfg = (r.model, r.layers, r.fp, r.adm, r.seed)
        by_config[cfg]["n_params"] = r.n_params
        by_config[cfg][r.scenario] = r.mse
    labels = ["n_params", "fp", "adm"] + [s.value.lower() for s in scenarios]
    rows = []
    for (model, layers, fp, adm, seed), vals in sorted(by_config.items()):
        if all(s in vals for s in scenarios):
            rows.append([vals["n_params"], float(fp), float(adm)] + [vals[s] for s in scenarios])
    return labels, np.array(rows, dtype=float).reshape(len(rows), len(labels))


def pearson_matrix(data: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation with NaN wherever a column is constant."""
    n, k = data.shape
    out = np.full((k, k), np.nan)
    if n < 2:
        return out
    centred = data - data.mean(axis=0)
    norms = np.sqrt(np.sum(centred ** 2, axis=0))
    # relative threshold: a constant column can leave rounding-level residue
    scale = np.maximum(np.abs(data).max(axis=0), 1e-300)
    live = norms > 1e-12 * scale * np.sqrt(n)
    unit = centred[:, live] / norms[live]
    corr = np.clip(unit.T @ unit, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    idx = np.flatnonzero(live)
    out[np.ix_(idx, idx)] = (corr + corr.T) / 2
    return out


def correlation_matrix(table: ResultsTable) -> CorrelationMatrix:
    labels, data = pivot_configs(table)
    return CorrelationMatrix(tuple(labels), pearson_matrix(data))


def params_vs_mse(table: ResultsTable) -> str:
    """Scatter series of parameter count against MSE, one point per row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "model", "layers", "fp", "adm", "n_params", "mse"])
    for r in table:
        writer.writerow([r.scenario.value, r.model, r.layers, r.fp, r.adm,
                         r.n_params, f"{r.mse:.6g}"])
    return buf.getvalue()


def depth_means(table: ResultsTable) -> dict[tuple[ScenarioKind, int], float]:
    """Mean MSE over every configuration of a given depth, per scenario."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in table:
        groups[(r.scenario, r.layers)].append(r.mse)
    order = {k: i for i, k in enumerate(ScenarioKind)}
    return {k: float(np.mean(groups[k]))
            for k in sorted(groups, key=lambda k: (order[k[0]], k[1]))}


def depth_means_csv(means: dict[tuple[ScenarioKind, int], float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "layers", "mean_mse"])
    for (scenario, layers), m in means.items():
        writer.writerow([scenario.value, layers, f"{m:.6g}"])
    return buf.getvalue()


def best_rows(table: ResultsTable) -> list[BenchmarkResult]:
    """Lowest-MSE row of each scenario."""
    return [min(table.filter(scenario=s), key=lambda r: r.mse) for s in table.scenarios()]
