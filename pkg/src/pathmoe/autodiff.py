"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Implements a define-by-run tape: operations execute eagerly on numpy
arrays and, when a tape is active, record a backward closure that
computes vector-Jacobian products. The tape is rebuilt on every forward
pass; nothing is cached across passes.

Conventions:
  - all values are float64, C-contiguous,
  - a scalar is a 0-d array,
  - tensors are attached to at most one tape at a time; operations on
    untracked tensors skip recording entirely (cheap inference mode).
"""

from __future__ import annotations

import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "apply_dense",
    "segment_ops",
    "reductions",
    "backward",
    "grad_check",
    "derive_rng",
    "gumbel",
]


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array, optionally attached to the active tape."""

    __slots__ = ("array", "name", "_tape", "_node_id")

    def __init__(self, values, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.array = arr
        self.name = name
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ValueError(f"item() on tensor of size {self.array.size}")
        return float(self.array.reshape(-1)[0])

    def detached(self) -> np.ndarray:
        """The raw array, for bookkeeping that must not touch the tape."""
        return self.array

    def node_id(self) -> int | None:
        tape = _active_tape()
        if tape is not None and self._tape is tape:
            return self._node_id
        return None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # Operator sugar; everything routes through the recorded primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out_id", "input_ids", "vjp")

    def __init__(self, out_id, input_ids, vjp):
        self.out_id = out_id
        self.input_ids = input_ids
        self.vjp = vjp


class Tape:
    """Ordered record of operations for one forward pass.

    Usage:
        with Tape() as tape:
            tape.watch(params)
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._next_id = 0
        self._param_ids: dict[str, int] = {}
        self._shapes: dict[int, tuple[int, ...]] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _attach(self, t: Tensor) -> int:
        t._tape = self
        t._node_id = self._next_id
        self._shapes[self._next_id] = t.shape
        self._next_id += 1
        return t._node_id

    def watch(self, params: "ParamStore | Iterable[Tensor]") -> None:
        """Register trainable tensors so backward() can report their grads."""
        tensors = params.tensors() if isinstance(params, ParamStore) else params
        for t in tensors:
            if t.name is None:
                raise ValueError("watched tensors must be named")
            nid = self._attach(t)
            self._param_ids[t.name] = nid

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        input_ids = tuple(t.node_id() for t in inputs)
        if all(i is None for i in input_ids):
            return
        out_id = self._attach(out)
        self._nodes.append(_Node(out_id, input_ids, vjp))


class ParamStore:
    """Named trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(values, name=name)
        self._params[name] = t
        return t

    def add_uniform(self, name: str, shape: Sequence[int], rng: np.random.Generator) -> Tensor:
        """Uniform init in [-1/sqrt(fan), 1/sqrt(fan)] with fan = last dim."""
        fan = shape[-1] if len(shape) > 0 else 1
        bound = 1.0 / math.sqrt(max(fan, 1))
        return self.add(name, rng.uniform(-bound, bound, size=tuple(shape)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# dense primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.array + b.array)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.array - b.array)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.array, b.array
    out = Tensor(av * bv)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.array, b.array
    out = Tensor(av / bv)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / bv, a.shape),
        _unbroadcast(-g * av / (bv * bv), b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.array, b.array
    out = Tensor(av @ bv)
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.array.T))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    shapes = [p.shape for p in parts]
    lead = {s[:-1] for s in shapes}
    if len(lead) != 1:
        raise ValueError(f"concat-last-axis shape mismatch: {shapes}")
    widths = [s[-1] for s in shapes]
    out = Tensor(np.concatenate([p.array for p in parts], axis=-1))
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=-1))

    return _record(out, tuple(parts), vjp)


def relu(a: Tensor) -> Tensor:
    av = a.array
    out = Tensor(np.maximum(av, 0.0))
    return _record(out, (a,), lambda g: (g * (av > 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    av = a.array
    s = np.empty_like(av)
    pos = av >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    av = a.array
    out = Tensor(np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av))))
    # derivative is sigmoid(x)
    s = np.empty_like(av)
    pos = av >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    ev = np.exp(a.array)
    out = Tensor(ev)
    return _record(out, (a,), lambda g: (g * ev,))


def log(a: Tensor) -> Tensor:
    av = a.array
    out = Tensor(np.log(av))
    return _record(out, (a,), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    rv = np.sqrt(a.array)
    out = Tensor(rv)
    return _record(out, (a,), lambda g: (g / (2.0 * rv),))


def erf(a: Tensor) -> Tensor:
    av = a.array
    out = Tensor(_erf(av))
    c = 2.0 / math.sqrt(math.pi)
    return _record(out, (a,), lambda g: (g * c * np.exp(-av * av),))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.array * c)
    return _record(out, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.array.reshape(shape))
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    av = a.array
    out = Tensor(av.sum(axis=axis, keepdims=keepdims))
    src = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# segment primitives


def _check_indices(indices: np.ndarray, upper: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"{what}: indices must be 1-d")
    if idx.size:
        bad = (idx < 0) | (idx >= upper)
        if bad.any():
            off = int(idx[np.argmax(bad)])
            raise IndexError(f"{what}: index {off} out of range [0, {upper})")
    return idx


def gather_rows(data: Tensor, indices) -> Tensor:
    if data.array.ndim != 2:
        raise ValueError(f"gather-rows expects a matrix, got shape {data.shape}")
    idx = _check_indices(indices, data.shape[0], "gather-rows")
    out = Tensor(data.array[idx])
    n_rows = data.shape[0]

    def vjp(g):
        gd = np.zeros((n_rows, data.shape[1]))
        np.add.at(gd, idx, g)
        return (gd,)

    return _record(out, (data,), vjp)


def scatter_add_rows(data: Tensor, indices, out_size: int) -> Tensor:
    if data.array.ndim != 2:
        raise ValueError(f"scatter-add-rows expects a matrix, got shape {data.shape}")
    idx = _check_indices(indices, out_size, "scatter-add-rows")
    if idx.size != data.shape[0]:
        raise ValueError(
            f"scatter-add-rows: {idx.size} indices for {data.shape[0]} rows")
    acc = np.zeros((out_size, data.shape[1]))
    np.add.at(acc, idx, data.array)
    out = Tensor(acc)
    return _record(out, (data,), lambda g: (g[idx],))


def segment_max(data: Tensor, indices, out_size: int) -> Tensor:
    """Row-wise max per segment; empty segments are filled with -inf.

    Backward routes each output element's gradient to the first row
    attaining the max (deterministic tie-break).
    """
    if data.array.ndim != 2:
        raise ValueError(f"segment-max expects a matrix, got shape {data.shape}")
    idx = _check_indices(indices, out_size, "segment-max")
    if idx.size != data.shape[0]:
        raise ValueError(
            f"segment-max: {idx.size} indices for {data.shape[0]} rows")
    dv = data.array
    acc = np.full((out_size, dv.shape[1]), -np.inf)
    np.maximum.at(acc, idx, dv)
    out = Tensor(acc)

    def vjp(g):
        n = dv.shape[0]
        winner = np.full((out_size, dv.shape[1]), n, dtype=np.int64)
        hit = dv == acc[idx]
        rownum = np.where(hit, np.arange(n, dtype=np.int64)[:, None], n)
        np.minimum.at(winner, idx, rownum)
        gd = np.zeros_like(dv)
        seg, col = np.nonzero(winner < n)
        gd[winner[seg, col], col] += g[seg, col]
        return (gd,)

    return _record(out, (data,), vjp)


# ---------------------------------------------------------------------------
# reductions


def softmax(a: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = a.array / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((s * (g - inner)) / temperature,)

    return _record(out, (a,), vjp)


def logsumexp(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    av = a.array
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    se = e.sum(axis=axis, keepdims=True)
    res = np.log(se) + m
    if not keepdims and axis is not None:
        res = np.squeeze(res, axis=axis)
    elif not keepdims:
        res = res.reshape(())
    out = Tensor(res)
    soft = e / se

    def vjp(g):
        if axis is None:
            return (g.reshape(()) * soft if np.ndim(g) else g * soft,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _record(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    av = a.array
    n = av.size
    out = Tensor(np.asarray(av.mean()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, av.shape).copy(),))


def std(a: Tensor) -> Tensor:
    """Population standard deviation over all elements.

    Gradient at a constant input (sigma == 0) is defined as zero.
    """
    av = a.array
    n = av.size
    mu = av.mean()
    centered = av - mu
    sigma = math.sqrt(float((centered * centered).mean()))
    out = Tensor(np.asarray(sigma))

    def vjp(g):
        if sigma == 0.0:
            return (np.zeros_like(av),)
        return (np.asarray(g).reshape(()) * centered / (n * sigma),)

    return _record(out, (a,), vjp)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; errors on zero-norm input."""
    uv, vv = u.array.reshape(-1), v.array.reshape(-1)
    nu = math.sqrt(float(uv @ uv))
    nv = math.sqrt(float(vv @ vv))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine-similarity: zero-norm input vector")
    c = float(uv @ vv) / (nu * nv)
    out = Tensor(np.asarray(c))

    def vjp(g):
        gs = float(np.asarray(g).reshape(()))
        gu = gs * (vv / (nu * nv) - c * uv / (nu * nu))
        gv = gs * (uv / (nu * nv) - c * vv / (nv * nv))
        return (gu.reshape(u.shape), gv.reshape(v.shape))

    return _record(out, (u, v), vjp)


# ---------------------------------------------------------------------------
# spec-surface dispatchers

_DENSE_KINDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
}


def apply_dense(kind: str, *inputs) -> Tensor:
    """Dispatch a dense primitive by name (see _DENSE_KINDS for the list).

    `concat-last-axis` takes any number of inputs; `scale` takes a tensor
    and a python float.
    """
    ts = tuple(_as_tensor(x) for x in inputs if not isinstance(x, (int, float)))
    if kind == "concat-last-axis":
        return concat_last(ts)
    if kind == "scale":
        return scale(ts[0], inputs[-1])
    fn = _DENSE_KINDS.get(kind)
    if fn is None:
        raise ValueError(f"unknown dense op kind: {kind!r}")
    try:
        return fn(*ts)
    except ValueError as e:
        raise ValueError(f"{kind}: {e}") from None


def segment_ops(kind: str, data, indices, out_size: int | None = None) -> Tensor:
    data = _as_tensor(data)
    if kind == "gather-rows":
        return gather_rows(data, indices)
    if kind == "scatter-add-rows":
        return scatter_add_rows(data, indices, out_size)
    if kind == "segment-max":
        return segment_max(data, indices, out_size)
    raise ValueError(f"unknown segment op kind: {kind!r}")


def reductions(kind: str, x, temperature: float | None = None, other=None) -> Tensor:
    x = _as_tensor(x)
    if kind == "softmax-with-temperature":
        return softmax(x, temperature if temperature is not None else 1.0)
    if kind == "logsumexp":
        return logsumexp(x)
    if kind == "cosine-similarity":
        return cosine(x, _as_tensor(other))
    if kind == "mean":
        return mean(x)
    if kind == "std":
        return std(x)
    raise ValueError(f"unknown reduction kind: {kind!r}")


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Accumulate gradients of a scalar loss for every watched parameter.

    Parameters that did not contribute to the loss get a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.array).all():
        raise FloatingPointError("backward: loss is not finite")
    adjoint: dict[int, np.ndarray] = {}
    lid = loss.node_id()
    if lid is not None:
        adjoint[lid] = np.ones_like(loss.array)
    for node in reversed(tape._nodes):
        g_out = adjoint.pop(node.out_id, None)
        if g_out is None:
            continue
        grads = node.vjp(g_out)
        for iid, g in zip(node.input_ids, grads):
            if iid is None or g is None:
                continue
            if iid in adjoint:
                adjoint[iid] = adjoint[iid] + g
            else:
                adjoint[iid] = g
    out: dict[str, Tensor] = {}
    for name, nid in tape._param_ids.items():
        g = adjoint.get(nid)
        if g is None:
            g = np.zeros(tape._shapes[nid])
        out[name] = Tensor(g)
    return out


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    rel_floor: float = 1e-6,
) -> tuple[float, str]:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must be a deterministic function of the parameter values
    (freeze any noise draws via a fixed seed inside the closure). Returns
    the worst relative error and the parameter element it occurred at.
    Relative error uses an absolute floor so that near-zero pairs compare
    as equal.
    """
    if not (1e-7 < step < 1e-3):
        raise ValueError(f"grad_check step {step} outside (1e-7, 1e-3)")
    with Tape() as tape:
        tape.watch(params)
        loss = loss_fn(params)
    if not np.isfinite(loss.array).all():
        raise FloatingPointError("grad_check: non-finite loss")
    grads = backward(tape, loss)

    def eval_loss() -> float:
        val = loss_fn(params).item()
        if not math.isfinite(val):
            raise FloatingPointError("grad_check: non-finite loss during probing")
        return val

    worst, worst_at = 0.0, ""
    for name, t in params.items():
        flat = t.array.reshape(-1)
        g = grads[name].values
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = eval_loss()
            flat[i] = orig - step
            lm = eval_loss()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            denom = max(abs(fd), abs(g[i]), rel_floor)
            rel = abs(fd - g[i]) / denom
            if rel > worst:
                worst, worst_at = rel, f"{name}[{i}]"
    return worst, worst_at


# ---------------------------------------------------------------------------
# seeded randomness utilities


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent deterministic stream for a module, derived from one seed."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(label.encode())]))


def gumbel(rng: np.random.Generator, shape=()) -> np.ndarray:
    """Standard Gumbel(0, 1) draws: -log(-log(U))."""
    u = rng.uniform(low=np.nextafter(0.0, 1.0), high=1.0, size=shape)
    return -np.log(-np.log(u))
