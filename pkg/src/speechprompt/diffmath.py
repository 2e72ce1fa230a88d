"""Reverse-mode autodiff over numpy arrays, restricted to a closed primitive set.

Forward passes build a graph of float64 tensors; ``backward`` walks it in
reverse topological order. The primitive set is deliberately small (matrix
multiply, elementwise arithmetic, logistic/tanh/exp/log, softmax, reductions,
concatenation, indexing, reshaping) so that every primitive can be verified
against the central finite-difference oracle in ``finite_diff_check``.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

EPS_FLOOR = 1e-8

_GRAD_ENABLED = True


class GraphError(ValueError):
    """Raised on malformed graphs: shape mismatches, non-finite losses."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    """Wrap an array/scalar as a non-differentiable tensor."""
    return _wrap(x)


def _result(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return (ga, gb)

    return _result(a.data * b.data, (a, b), back)


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return (ga, gb)

    return _result(a.data / b.data, (a, b), back)


def neg(a):
    a = _wrap(a)

    def back(g):
        return (-g,)

    return _result(-a.data, (a,), back)


def matmul(a, b):
    """Matrix product. Supports 2D@2D, ND@2D, and ND@ND with equal batch dims."""
    a, b = _wrap(a), _wrap(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise GraphError("matmul operands must have >= 2 dims")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise GraphError(f"matmul batch dims mismatch: {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise GraphError(f"matmul inner dims mismatch: {A.shape} @ {B.shape}")

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return (ga, gb)

    return _result(A @ B, (a, b), back)


def sigmoid(a):
    a = _wrap(a)
    # stable single-pass form: sigmoid(x) = (1 + tanh(x/2)) / 2
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def back(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), back)


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), back)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return _result(out, (a,), back)


def log(a):
    a = _wrap(a)

    def back(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), back)


def tabs(a):
    """|a| with subgradient 0 at 0."""
    a = _wrap(a)

    def back(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), back)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _result(out, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(a, axis=0):
    a = _wrap(a)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _result(np.cumsum(a.data, axis=axis), (a,), back)


def logsumexp(a, axis=0):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)

    def back(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _result(out, (a,), back)


def softmax(a, axis=-1):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    sh = a.data - m
    ls = sh - np.log(np.exp(sh).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _result(ls, (a,), back)


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def back(g):
        out, off = [], 0
        for t, s in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            out.append(g[tuple(sl)] if t.requires_grad else None)
            off += s
        return tuple(out)

    return _result(data, tuple(ts), back)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx):
    a = _wrap(a)
    data = a.data[idx]
    advanced = _is_advanced(idx)

    def back(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, idx, g)  # repeated indices must accumulate
        else:
            ga[idx] += g
        return (ga,)

    return _result(data, (a,), back)


def reshape(a, shape):
    a = _wrap(a)
    orig = a.data.shape

    def back(g):
        return (g.reshape(orig),)

    return _result(a.data.reshape(shape), (a,), back)


def swapaxes(a, ax1, ax2):
    a = _wrap(a)

    def back(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), back)


def backward(loss: Tensor):
    """Accumulate gradients of a finite scalar loss into ``.grad`` fields."""
    if loss.data.size != 1:
        raise GraphError("loss must be a scalar")
    if not np.isfinite(loss.data).all():
        raise GraphError("non-finite loss")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    adopted: set[int] = set()
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.data.shape:
                raise GraphError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if p.grad is None:
                # adopt buffer-owning arrays not already adopted elsewhere;
                # upstream grad buffers are consumed by this point, so in-place
                # accumulation into an adopted one cannot corrupt anything
                if g.base is None and id(g) not in adopted:
                    p.grad = g
                    adopted.add(id(g))
                else:
                    p.grad = g.copy()
            else:
                p.grad += g


@dataclass
class Param:
    name: str
    tensor: Tensor
    trainable: bool


class ParamSet:
    """Named parameter arrays with trainable/frozen flags, fixed at registration.

    Weight matrices initialise uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a
    single seeded generator in registration order; biases initialise to zeros.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Param] = {}

    def add(self, name: str, shape, init="weight", trainable=True, fan_in=None) -> Tensor:
        if name in self._params:
            raise GraphError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            arr = np.array(init, dtype=np.float64)
            if arr.shape != shape:
                raise GraphError(f"init shape {arr.shape} != {shape} for {name!r}")
        elif init == "weight":
            fi = int(fan_in) if fan_in is not None else shape[0]
            bound = 1.0 / np.sqrt(fi)
            arr = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        else:
            raise GraphError(f"unknown init {init!r}")
        t = Tensor(arr, requires_grad=bool(trainable))
        self._params[name] = Param(name, t, bool(trainable))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[Param]:
        return self._params.values()

    def trainable_items(self) -> list[Param]:
        return [p for p in self._params.values() if p.trainable]

    def n_scalars(self, trainable_only=True) -> int:
        ps = self.trainable_items() if trainable_only else list(self.items())
        return sum(p.tensor.data.size for p in ps)

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def get_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data.copy() for p in self._params.values()}

    def set_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            t = self._params[name].tensor
            if t.data.shape != arr.shape:
                raise GraphError(f"array shape mismatch for {name!r}")
            t.data = np.array(arr, dtype=np.float64)

    def checksum(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            p = self._params[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.tensor.data).tobytes())
        return h.hexdigest()


def backprop(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every trainable parameter (frozen ones absent)."""
    params.zero_grad()
    backward(loss)
    out = {}
    for p in params.trainable_items():
        g = p.tensor.grad
        out[p.name] = g.copy() if g is not None else np.zeros_like(p.tensor.data)
    return out


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    analytic_norm: float
    numeric_norm: float
    n_checked: int


@dataclass
class GradReport:
    entries: dict[str, ParamCheck]
    step: float

    @property
    def max_rel_err(self) -> float:
        if not self.entries:
            return 0.0
        return max(e.max_rel_err for e in self.entries.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def format(self) -> str:
        lines = [f"finite-difference check (step={self.step:g})"]
        for e in self.entries.values():
            lines.append(
                f"  {e.name}: rel={e.max_rel_err:.3e} abs={e.max_abs_err:.3e} "
                f"|g_a|={e.analytic_norm:.3e} |g_n|={e.numeric_norm:.3e} n={e.n_checked}"
            )
        lines.append(f"  max relative error: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def finite_diff_check(
    forward: Callable[[], Tensor],
    params: ParamSet,
    step: float = 1e-5,
    max_scalars: int = 200,
    seed: int = 0,
    order: int = 2,
) -> GradReport:
    """Compare backprop gradients against central finite differences.

    ``forward`` must be a deterministic closure over ``params``. Checks every
    trainable scalar, or a seeded random subsample of ``max_scalars`` (>= 200)
    for larger models. Frozen parameters never appear in the report.
    ``order=4`` uses the five-point central stencil, which resolves gradients
    near the roundoff floor of the two-point rule.
    """
    if order not in (2, 4):
        raise GraphError("finite-difference order must be 2 or 4")
    max_scalars = max(int(max_scalars), 200)
    analytic = backprop(forward(), params)

    trainable = params.trainable_items()
    sizes = [p.tensor.data.size for p in trainable]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if total <= max_scalars:
        chosen = np.arange(total)
    else:
        chosen = np.sort(rng.choice(total, size=max_scalars, replace=False))

    offsets = np.cumsum([0] + sizes)
    entries: dict[str, ParamCheck] = {}
    per_param: dict[str, list[tuple[float, float]]] = {p.name: [] for p in trainable}

    def eval_loss():
        val = forward().data
        if not np.isfinite(val).all():
            raise GraphError("non-finite loss during finite-difference perturbation")
        return float(val)

    for gi in chosen:
        pi = int(np.searchsorted(offsets, gi, side="right") - 1)
        p = trainable[pi]
        fi = int(gi - offsets[pi])
        flat = p.tensor.data.reshape(-1)
        orig = flat[fi]

        def at(delta):
            flat[fi] = orig + delta
            val = eval_loss()
            flat[fi] = orig
            return val

        if order == 2:
            numeric = (at(step) - at(-step)) / (2.0 * step)
        else:
            numeric = (at(-2 * step) - 8 * at(-step) + 8 * at(step) - at(2 * step)) / (12.0 * step)
        per_param[p.name].append((float(analytic[p.name].reshape(-1)[fi]), numeric))

    for p in trainable:
        pairs = per_param[p.name]
        if not pairs:
            continue
        ga = np.array([a for a, _ in pairs])
        gn = np.array([n for _, n in pairs])
        abs_err = np.abs(ga - gn)
        rel_err = abs_err / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), EPS_FLOOR)
        entries[p.name] = ParamCheck(
            name=p.name,
            max_rel_err=float(rel_err.max()),
            max_abs_err=float(abs_err.max()),
            analytic_norm=float(np.linalg.norm(ga)),
            numeric_norm=float(np.linalg.norm(gn)),
            n_checked=len(pairs),
        )
    return GradReport(entries=entries, step=step)


class Adam:
    """Adam with bias correction; state lives with the optimizer instance."""

    def __init__(self, params: ParamSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in params.trainable_items()}
        self.v = {p.name: np.zeros_like(p.tensor.data) for p in params.trainable_items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p in self.params.trainable_items():
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["adam.t"][0])
        for name in self.m:
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the pre-clip norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
