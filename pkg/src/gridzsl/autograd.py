"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Only what the GNN layers need: dense linear algebra, pointwise
nonlinearities, row gathers, segment reductions over edge lists and a
softmax over the incoming edges of each node. Graph operators that do not
depend on parameters enter through :func:`spmm` as constant sparse
matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` of every upstream tensor that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __sub__ = lambda self, other: add(self, mul(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch {matrix.shape} @ {x.shape}")
    mt = matrix.T.tocsr()
    return _result(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def gather(x, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; the adjoint scatters back with a segment sum."""
    x = as_tensor(x)
    index = np.asarray(index)
    n = x.shape[0]
    return _result(x.data[index], (x,), lambda g: (_segment_sum(g, index, n),))


def _scatter_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    flat = values.reshape(len(index), -1)
    out = np.asarray(_scatter_matrix(index, n) @ flat)
    return out.reshape((n,) + values.shape[1:])


def segment_sum(values, index: np.ndarray, num_segments: int) -> Tensor:
    values = as_tensor(values)
    index = np.asarray(index)
    if len(index) != values.shape[0]:
        raise ValueError("index length must match the leading dimension")
    return _result(_segment_sum(values.data, index, num_segments), (values,),
                   lambda g: (g[index],))


def segment_mean(values, index: np.ndarray, num_segments: int) -> Tensor:
    """Mean per segment; empty segments give zero."""
    index = np.asarray(index)
    counts = np.bincount(index, minlength=num_segments).astype(float)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    shape = (num_segments,) + (1,) * (as_tensor(values).data.ndim - 1)
    return mul(segment_sum(values, index, num_segments), inv.reshape(shape))


def neighbor_softmax(logits, index: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of edge logits over the edges that share a destination node."""
    logits = as_tensor(logits)
    index = np.asarray(index)
    data = logits.data
    peak = np.full((num_segments,) + data.shape[1:], -np.inf)
    np.maximum.at(peak, index, data)
    e = np.exp(data - peak[index])
    denom = _segment_sum(e, index, num_segments)
    alpha = e / denom[index]

    def backward(g):
        weighted = _segment_sum(alpha * g, index, num_segments)
        return (alpha * (g - weighted[index]),)

    return _result(alpha, (logits,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def mse_loss(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over the entries selected by ``mask``.

    ``mask`` broadcasts against ``pred``; a row mask of shape (n,) selects
    whole rows.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.shape}")
    if mask is None:
        weight = np.ones(pred.shape)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1 and pred.data.ndim == 2:
            mask = mask[:, None]
        weight = np.broadcast_to(mask, pred.shape).astype(float)
    count = weight.sum()
    if count == 0:
        raise ValueError("mse_loss mask selects no entries")
    diff = (pred.data - target) * weight
    return _result(np.array((diff**2).sum() / count), (pred,),
                   lambda g: (g * 2.0 * diff / count,))


class Module:
    """Anything holding named parameter tensors, possibly in child modules."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator, name: str | None = None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(*shape: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = glorot(in_dim, out_dim, rng)
        self.bias = zeros(out_dim) if bias else None

    def __call__(self, x) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


def count_parameters(model: Module) -> int:
    return sum(p.size for p in model.parameters())


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``.

    A missing gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def parameter_records(model: Module) -> list[dict]:
    """Named parameter tensors as JSON-ready rows; floats keep full precision."""
    return [{"name": name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
            for name, p in model.named_parameters()]


def load_parameter_records(model: Module, records: list[dict]) -> None:
    rows = {r["name"]: r for r in records}
    params = dict(model.named_parameters())
    if set(rows) != set(params):
        raise ValueError("checkpoint parameters do not match the model")
    for name, p in params.items():
        shape = tuple(rows[name]["shape"])
        if shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {shape} != {p.shape}")
        p.data = np.array(rows[name]["values"], dtype=np.float64).reshape(shape)


def save_checkpoint(model: Module, path: str | Path) -> None:
    Path(path).write_text(json.dumps(parameter_records(model)) + "\n")


def load_checkpoint(model: Module, path: str | Path) -> None:
    load_parameter_records(model, json.loads(Path(path).read_text()))
