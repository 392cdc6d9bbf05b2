"""Dense float64 tensors with reverse-mode gradient recording.

Every primitive validates operand shapes, checks its output for NaN/Inf, and,
when a Tape is active and any operand requires gradients, records a node whose
closure maps the output cotangent to per-input cotangents.  The tape is a flat
list in execution order, which is already a topological order, so the backward
pass is a single reversed sweep that visits each node exactly once.

Elementwise ops demand identical shapes.  The only implicit alignment anywhere
is scalar-times-tensor; everything else goes through named primitives with
explicit shape contracts (expand_to, matmul with equal leading batch dims).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "MaskError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "expand_to",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "sum_all",
    "mean_all",
    "backward",
    "grad_check",
]

_MASK_FILL = 1e30  # additive magnitude for blocked attention scores


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class MaskError(ValueError):
    """A softmax row has every key blocked."""


class Tensor:
    """A float64 array plus a requires_grad flag.

    Tensors hash and compare by identity so they can key gradient maps.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not a scalar")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common arithmetic; everything maps to primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "output", "inputs", "grad_fn")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], grad_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable primitives.

    Single-threaded per tape; the active tape is thread-local so independent
    tapes may run on separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape exited out of order")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> tuple[Tensor, ...]:
        return tuple(self._leaves.values())

    def _record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        self._produced.add(id(output))
        self.nodes.append(_Node(op, output, inputs, grad_fn))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: output contains NaN or Inf")


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(op, out, inputs, grad_fn)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product (..., m, k) @ (..., k, n).

    Leading batch dims must match exactly, except that the right operand may
    be a plain 2-D matrix shared across the batch (the weight case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims {a.shape} vs {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return (ga, gb)

    return _finish("matmul", out, (a, b), grad_fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(int(x) for x in np.argsort(axes))
    return _finish(
        "transpose",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _finish(
        "reshape",
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(old),),
    )


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no operands")
    nd = parts[0].ndim
    axis = axis % nd
    base = list(parts[0].shape)
    for p in parts:
        if p.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        other = list(p.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError(f"concat: shape {p.shape} incompatible along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), grad_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for length {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    full = a.shape

    def grad_fn(g):
        out = np.zeros(full, dtype=np.float64)
        out[idx] = g
        return (out,)

    return _finish("slice_axis", a.data[idx].copy(), (a,), grad_fn)


def expand_to(a, shape: Sequence[int]) -> Tensor:
    """Explicitly tile a tensor by prepending leading axes.

    The target shape must end with the operand's exact shape; the backward pass
    sums over the prepended axes.
    """
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if len(shape) < a.ndim or shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError(f"expand_to: {a.shape} is not a suffix of {shape}")
    extra = len(shape) - a.ndim
    if extra == 0:
        return _finish("expand_to", a.data.copy(), (a,), lambda g: (g,))

    def grad_fn(g):
        return (g.sum(axis=tuple(range(extra))),)

    return _finish("expand_to", np.broadcast_to(a.data, shape).copy(), (a,), grad_fn)


def masked_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional boolean keep-mask.

    Blocked positions receive an additive -1e30 before normalization and come
    out as exact 0.0 weights; a row with every position blocked is an error.
    """
    a = _as_tensor(a)
    d = a.data
    keep = None
    if mask is not None:
        keep = np.ascontiguousarray(mask, dtype=bool)
        if keep.shape != d.shape:
            raise ShapeError(f"masked_softmax: mask shape {keep.shape} != scores shape {d.shape}")
        if not keep.any(axis=-1).all():
            raise MaskError("masked_softmax: a row has every key blocked")
        d = np.where(keep, d, d - _MASK_FILL)
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    if keep is not None:
        e = np.where(keep, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _finish("masked_softmax", p, (a,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias.

    gain and bias are 1-D of the normalized width and are tiled over every
    leading axis; their cotangents sum back over those axes.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1] if x.ndim else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({width},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        dbias = g.sum(axis=lead) if lead else g
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return _finish("layer_norm", out, (x, gain, bias), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi_cdf + x * pdf),)

    return _finish("gelu", x * phi_cdf, (a,), grad_fn)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return _finish("sum_all", np.asarray(a.data.sum()), (a,), grad_fn)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size
    if n == 0:
        raise ShapeError("mean_all: empty tensor")

    def grad_fn(g):
        return (np.full(shape, float(g) / n, dtype=np.float64),)

    return _finish("mean_all", np.asarray(a.data.mean()), (a,), grad_fn)


def backward(tape: Tape, seed) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over a tape.

    The seed cotangent must match the final node's output shape.  Returns one
    gradient per requires_grad leaf; leaves the sweep never reaches get zeros.
    """
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    final = tape.nodes[-1].output
    seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed_arr.shape != final.shape:
        raise ShapeError(f"backward: seed shape {seed_arr.shape} != output shape {final.shape}")
    _check_finite("backward seed", seed_arr)

    pending: dict[int, np.ndarray] = {id(final): seed_arr}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads_in = node.grad_fn(g)
        if len(grads_in) != len(node.inputs):  # pragma: no cover - internal guard
            raise RuntimeError(f"{node.op}: backward arity mismatch")
        for inp, gin in zip(node.inputs, grads_in):
            if gin is None or not inp.requires_grad:
                continue
            gin = np.asarray(gin, dtype=np.float64)
            if gin.shape != inp.shape:  # pragma: no cover - internal guard
                raise RuntimeError(f"{node.op}: gradient shape {gin.shape} != input {inp.shape}")
            store = leaf_grads if id(inp) in tape._leaves else pending
            held = store.get(id(inp))
            store[id(inp)] = gin if held is None else held + gin

    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in tape._leaves.items():
        g = leaf_grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=np.float64)
        _check_finite("backward", g)
        out[leaf] = g
    return out


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[Tensor],
    eps: float = 1e-5,
    directions: int = 24,
    seed: int = 0,
) -> float:
    """Compare tape gradients of a scalar function with central differences.

    Probes random unit directions d and compares the tape's <grad, d> against
    (fn(x + eps d) - fn(x - eps d)) / (2 eps).  Directional probes keep both
    sides O(|grad|), so rounding noise on individual flat coordinates cannot
    dominate the relative error.  Returns the worst
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all probes.
    """
    point = list(point)
    with Tape() as tape:
        out = fn(*point)
    if out.size != 1:
        raise ShapeError(f"grad_check: fn returned shape {out.shape}, expected scalar")
    grads = backward(tape, np.ones(out.shape))

    live = [t for t in point if t.requires_grad]
    if not live:
        raise ValueError("grad_check: no requires_grad tensor in point")
    rng = np.random.default_rng(seed)

    def shifted(deltas: dict[int, np.ndarray], sign: float) -> float:
        moved = [
            Tensor(t.data + sign * deltas[id(t)]) if id(t) in deltas else Tensor(t.data)
            for t in point
        ]
        return fn(*moved).item()

    worst = 0.0
    for _ in range(directions):
        ds = {id(t): rng.standard_normal(t.shape) for t in live}
        norm = np.sqrt(sum(float((d * d).sum()) for d in ds.values()))
        ds = {k: d / norm for k, d in ds.items()}
        analytic = sum(float((grads[t] * ds[id(t)]).sum()) for t in live)
        numeric = (shifted(ds, eps) - shifted(ds, -eps)) / (2.0 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
