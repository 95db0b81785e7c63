"""Fill unobserved node features by heat diffusion with observed nodes held fixed."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .grid_model import ElectricalGraph
from .scenarios import ObservabilityMask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropagationConfig:
    tolerance: float = 1e-8
    max_iterations: int = 10_000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def diffusion_operator(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Row-normalised adjacency D^-1 A (rows of isolated nodes stay zero)."""
    adjacency = sp.csr_matrix(adjacency, dtype=float)
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return (sp.diags(inv) @ adjacency).tocsr()


def _observed(mask, n: int) -> np.ndarray:
    observed = mask.observed if isinstance(mask, ObservabilityMask) else np.asarray(mask, bool)
    if observed.shape != (n,):
        raise ValueError(f"mask of shape {observed.shape} for {n} nodes")
    return observed


def _unreachable(adjacency: sp.spmatrix, observed: np.ndarray) -> np.ndarray:
    _, labels = connected_components(adjacency, directed=False)
    anchored = np.zeros(labels.max() + 1, dtype=bool)
    anchored[labels[observed]] = True
    return ~anchored[labels]


def _adjacency_of(graph) -> sp.csr_matrix:
    return graph.adjacency() if isinstance(graph, ElectricalGraph) else sp.csr_matrix(graph)


def propagate_features(graph, features: np.ndarray, mask,
                       config: PropagationConfig = PropagationConfig()) -> np.ndarray:
    """Diffuse observed rows of ``features`` into the unobserved rows.

    ``graph`` is an :class:`ElectricalGraph` or a symmetric weighted adjacency
    matrix. Each sweep replaces every row by the weighted mean of its
    neighbours and then restores the observed rows, which converges to the
    harmonic extension of the observed values. Nodes with no path to an
    observed node get the mean of the observed rows.
    """
    adjacency = _adjacency_of(graph)
    x0 = np.asarray(features, dtype=float)
    n = adjacency.shape[0]
    if x0.shape[0] != n:
        raise ValueError(f"{x0.shape[0]} feature rows for {n} nodes")
    observed = _observed(mask, n)
    if not observed.any():
        return np.zeros_like(x0)
    if observed.all():
        return x0.copy()

    known = x0[observed]
    prop = diffusion_operator(adjacency)
    x = np.zeros_like(x0)
    x[observed] = known
    for _ in range(config.max_iterations):
        nxt = prop @ x
        nxt[observed] = known
        change = np.max(np.abs(nxt - x))
        x = nxt
        if change < config.tolerance:
            break
    else:
        warnings.warn(f"propagation stopped after {config.max_iterations} iterations "
                      f"with change {change:.1e}", RuntimeWarning, stacklevel=2)

    stray = _unreachable(adjacency, observed)
    if stray.any():
        warnings.warn(f"{int(stray.sum())} node(s) cannot reach an observed node; "
                      "filled with the observed mean", RuntimeWarning, stacklevel=2)
        x[stray] = known.mean(axis=0)
    return x


def dirichlet_solve_oracle(graph, features: np.ndarray, mask) -> np.ndarray:
    """Exact harmonic extension by a dense linear solve (test oracle).

    Solves (I - P_uu) X_u = P_uk X_k with P = D^-1 A, u the unobserved and k
    the observed nodes.
    """
    adjacency = _adjacency_of(graph)
    x0 = np.asarray(features, dtype=float)
    n = adjacency.shape[0]
    observed = _observed(mask, n)
    if observed.all():
        return x0.copy()
    if not observed.any():
        raise np.linalg.LinAlgError("no boundary nodes")
    p = diffusion_operator(adjacency).toarray()
    u, k = ~observed, observed
    lhs = np.eye(int(u.sum())) - p[np.ix_(u, u)]
    rhs = p[np.ix_(u, k)] @ x0[k]
    out = x0.copy()
    out[u] = np.linalg.solve(lhs, rhs)
    return out
