"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a node on a define-by-run graph; ``Tensor.backward`` walks the
graph once in reverse topological order. Arrays may carry leading batch axes;
the matrix ops act on the last two axes.
"""
from __future__ import annotations

import contextlib
import json
import math
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

FORMAT_VERSION = 1

# per thread, so concurrent no_grad blocks (sweep workers) cannot clobber each other
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its preconditions."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / target-network passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ContractError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ContractError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * s)

    return _node(a.data * s, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return _node(a.data.reshape(shape), (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def backward(g):
        a._accumulate(g * on)

    return _node(np.where(on, a.data, 0.0), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return mul_scalar(sum_all(a), 1.0 / a.data.size)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return _node(a.data * a.data, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _node(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs at least 2 columns")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            )

    return _node(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into the rows."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ContractError(f"embedding index out of range [0, {rows})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(gt)

    return _node(table.data[idx], (table,), backward)


def gather_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the second-to-last axis of a (batch, n, d) tensor per batch row."""
    x = as_tensor(x)
    perm = np.asarray(perm, dtype=np.int64)
    out = np.take_along_axis(x.data, perm[..., None], axis=-2)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, perm[..., None], g, axis=-2)
        x._accumulate(gx)

    return _node(out, (x,), backward)


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select ``x[rows, cols]`` from a 2-D tensor (repeats allowed)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        x._accumulate(gx)

    return _node(x.data[rows, cols], (x,), backward)


# ---------------------------------------------------------------------------
# parameters, gradients, optimiser


class ParamStore(dict):
    """Named float64 arrays. Gradients use the same container keyed identically."""

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.items()}

    def check_finite(self) -> None:
        for k, v in self.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in parameter {k!r}")

    def to_json(self, extra: Mapping | None = None) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.items())},
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> tuple["ParamStore", dict]:
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter file version {doc.get('version')!r}")
        store = cls()
        for k, entry in doc["params"].items():
            store[k] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        extra = {k: v for k, v in doc.items() if k not in ("version", "params")}
        return store, extra

    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        from .taskmodel import atomic_write_text

        atomic_write_text(path, self.to_json(extra))

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParamStore", dict]:
        return cls.from_json(Path(path).read_text())


def collect_grads(leaves: Mapping[str, Tensor]) -> ParamStore:
    return ParamStore({k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                       for k, t in leaves.items()})


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        """In-place update of ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if p.shape != g.shape:
                raise ContractError(f"gradient shape mismatch for {k!r}")
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], opt: Adam) -> ParamStore:
    opt.step(params, grads)
    return params


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               h: float = 1e-5, max_coords: int | None = 400, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a dict of leaf tensors to a scalar tensor. When the parameter
    count exceeds ``max_coords`` a seeded random subset of coordinates is
    checked (never fewer than 200).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    f(leaves).backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in leaves.items()}

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    if max_coords is not None and len(coords) > max(max_coords, 200):
        rng = np.random.default_rng(seed)
        pick_idx = rng.choice(len(coords), size=max(max_coords, 200), replace=False)
        coords = [coords[i] for i in sorted(pick_idx)]

    def evaluate() -> float:
        with no_grad():
            return float(f({k: Tensor(v) for k, v in params.items()}).data)

    worst = 0.0
    for k, i in coords:
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        ana = analytic[k].reshape(-1)[i]
        err = abs(num - ana) / max(abs(num) + abs(ana), floor)
        worst = max(worst, err)
    return worst


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))
