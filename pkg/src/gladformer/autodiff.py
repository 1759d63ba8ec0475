"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`DTensor` that remembers its parents and
a closure computing the parents' adjoints. :func:`backward` orders the
recorded graph topologically into a :class:`Tape` and sweeps it once.

Broadcasting is deliberately narrow: an operand of ``add``/``mul`` may be a
scalar, a ``(1, k)`` row vector or an ``(m, 1)`` column vector against an
``(m, k)`` partner. Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

_DEBUG = False
_RECORD = True


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextmanager
def no_grad():
    """Evaluate without recording parents, e.g. for finite-difference probes."""
    global _RECORD
    prev, _RECORD = _RECORD, False
    try:
        yield
    finally:
        _RECORD = prev


class DTensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[DTensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"DTensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> "Tape":
        return backward(self)


def _wrap(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def constant(x) -> DTensor:
    return DTensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> DTensor:
    return DTensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: tuple[DTensor, ...], grad_fn) -> DTensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = DTensor(data)
    out.op = op
    if _RECORD and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _broadcast_kind(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) == 2 and len(b) == 2:
        small, big = (a, b) if a[0] * a[1] <= b[0] * b[1] else (b, a)
        if small == (1, big[1]) or small == (big[0], 1) or small == (1, 1):
            return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# core ops


def add(a, b) -> DTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> DTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: DTensor, c: float) -> DTensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> DTensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make(
        ad @ bd, "matmul", (a, b),
        lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None),
    )


def concat(tensors: Sequence[DTensor], axis: int = 1) -> DTensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, "concat", tuple(tensors), grad_fn)


def softmax_rows(a: DTensor) -> DTensor:
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _make(s, "softmax_rows", (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def relu(a: DTensor) -> DTensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: DTensor) -> DTensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def log(a: DTensor, floor: float | None = None) -> DTensor:
    x = a.data
    if floor is not None:
        live = x > floor
        xc = np.where(live, x, floor)
        return _make(np.log(xc), "log", (a,), lambda g: (np.where(live, g / xc, 0.0),))
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def mean(a: DTensor, axis: int | None = None) -> DTensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.full(shape, g / n),))
    n = shape[axis]
    return _make(
        a.data.mean(axis=axis, keepdims=True), "mean", (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def sum_all(a: DTensor) -> DTensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def layer_norm(a: DTensor, gain: DTensor, bias: DTensor, eps: float = 1e-5) -> DTensor:
    """Normalise each row over the last dimension, then apply gain and bias."""
    x = a.data
    if gain.shape != (1, x.shape[-1]) or bias.shape != (1, x.shape[-1]):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {a.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def grad_fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(xhat * gd + bias.data, "layer_norm", (a, gain, bias), grad_fn)


def gather_rows(a: DTensor, idx) -> DTensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], "gather_rows", (a,), grad_fn)


def pair_product(q: DTensor, k: DTensor) -> DTensor:
    """Rows ``q[i] * k[j]`` for every ordered pair, row-major: shape ``(n*n, w)``."""
    if q.shape != k.shape or q.data.ndim != 2:
        raise ShapeError(f"pair_product: incompatible shapes {q.shape} and {k.shape}")
    n, w = q.shape
    qd, kd = q.data, k.data
    out = (qd[:, None, :] * kd[None, :, :]).reshape(n * n, w)

    def grad_fn(g):
        g3 = g.reshape(n, n, w)
        return (g3 * kd[None, :, :]).sum(axis=1), (g3 * qd[:, None, :]).sum(axis=0)

    return _make(out, "pair_product", (q, k), grad_fn)


def pair_weighted_sum(weights: DTensor, pairs: DTensor) -> DTensor:
    """``out[i] = sum_j weights[i, j] * pairs[i*n + j]`` for ``(n, n)`` weights."""
    n = weights.shape[0]
    if weights.shape != (n, n) or pairs.data.ndim != 2 or pairs.shape[0] != n * n:
        raise ShapeError(f"pair_weighted_sum: incompatible shapes {weights.shape} and {pairs.shape}")
    w = pairs.shape[1]
    wd, pd = weights.data, pairs.data.reshape(n, n, w)
    out = np.einsum("ij,ijk->ik", wd, pd)

    def grad_fn(g):
        return np.einsum("ik,ijk->ij", g, pd), (wd[:, :, None] * g[:, None, :]).reshape(n * n, w)

    return _make(out, "pair_weighted_sum", (weights, pairs), grad_fn)


def reshape(a: DTensor, shape: tuple[int, ...]) -> DTensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(data, "reshape", (a,), lambda g: (g.reshape(old),))


def dropout(a: DTensor, rate: float, rng: np.random.Generator | None) -> DTensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# reverse sweep


@dataclass
class Tape:
    """Topologically ordered record of one forward computation."""

    nodes: list[DTensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: DTensor) -> "Tape":
        order: list[DTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DTensor, bool]] = [(root, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: DTensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that depends on no parameters")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# gradient oracle


def finite_diff_check(
    f: Callable[[], DTensor],
    params: Iterable[DTensor] | Mapping[str, DTensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` closes over ``params`` and rebuilds the scalar loss on each call.
    Relative error is ``|a - b| / max(|a|, |b|, 1e-8)`` per coordinate.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    first = f()
    second = f()
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("f returned different values for identical parameters")
    for p in plist:
        p.zero_grad()
    if first.requires_grad:
        backward(first)
    worst = 0.0
    for p in plist:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# checkpoints


def save_checkpoint(params: Mapping[str, DTensor], path: str | Path) -> None:
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "params": [
            {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        ],
    }
    Path(path).write_text(json.dumps(manifest))


def load_checkpoint(path: str | Path) -> dict[str, DTensor]:
    manifest = json.loads(Path(path).read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    out: dict[str, DTensor] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != math.prod(shape):
            raise ValueError(f"checkpoint entry {entry['name']}: {values.size} values for shape {shape}")
        out[entry["name"]] = parameter(values.reshape(shape), name=entry["name"])
    return out
