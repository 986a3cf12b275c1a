"""A small reverse-mode autodiff engine over numpy arrays.

Operations record onto the innermost active :class:`Tape`. Outside a tape
nothing is recorded, so inference runs without graph overhead::

    with Tape() as tape:
        loss = mse(matmul(x, w), y)
    (gw,) = backward(loss, tape, [w])

Broadcasting is one-sided: in ``add``/``sub``/``mul`` the result must have
the shape of one operand (bias-add, per-row scaling, masks). Anything else
is a :class:`ShapeError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, RangeError, ShapeError

_TAPES: list["Tape"] = []

FLOAT_DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in FLOAT_DTYPES:
        return np.dtype(FLOAT_DTYPES[dtype])
    return np.dtype(dtype)


class Tensor:
    """Dense array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, dtype=dtype, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records op nodes in execution order (which is a topological order)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        self.nodes.append(_Node(out, inputs, fn))


def recording() -> bool:
    return bool(_TAPES)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._leaf = False
    req = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out.requires_grad = req
    if req:
        _TAPES[-1].record(out, inputs, fn)
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None,
             grad_output: np.ndarray | None = None):
    """Propagate d(loss)/d(.) through ``tape``.

    Leaf tensors with ``requires_grad`` get their gradient accumulated into
    ``.grad``. Returns the gradients for ``params`` in order, zeros for any
    parameter the loss does not depend on. A non-scalar ``loss`` needs an
    explicit ``grad_output`` of the same shape (a vector-Jacobian product).
    """
    if grad_output is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad_output, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise ShapeError(f"grad_output {seed.shape} does not match output {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {}
    if loss._leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if inp._leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if params is None:
        return None
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else g)
    return out


# --------------------------------------------------------------------------
# elementwise / structural ops

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"{op}: two-sided broadcast {a.shape} x {b.shape} not supported")
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    q = ad / bd

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * q / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(q, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, n] @ b[..., n, p]`` with equal batch dims, or ``b`` 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), fn)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def fn(g):
        ga = np.zeros(shape, dtype=dtype)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.data[idx], (a,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _check_index(idx: np.ndarray, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"{op}: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RangeError(f"{op}: index out of range [0, {n})")
    return idx


def _scatter_rows(values: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` buckets given by ``idx`` (axis 0)."""
    flat = idx.reshape(-1)
    tail = values.shape[idx.ndim:]
    v2 = values.reshape(flat.size, -1)
    onehot = sp.csr_matrix(
        (np.ones(flat.size, dtype=values.dtype), (flat, np.arange(flat.size))),
        shape=(n_rows, flat.size),
    )
    return np.asarray(onehot @ v2).reshape((n_rows,) + tail)


def gather_rows(a: Tensor, indices) -> Tensor:
    """``a[indices]`` along axis 0; the adjoint is :func:`scatter_add`."""
    idx = _check_index(indices, a.shape[0], "gather_rows")
    n = a.shape[0]
    return _result(a.data[idx], (a,), lambda g: (_scatter_rows(g, idx, n),))


def scatter_add(a: Tensor, indices, n_rows: int) -> Tensor:
    """Rows of ``a`` summed into a zero array with ``n_rows`` rows."""
    idx = _check_index(indices, n_rows, "scatter_add")
    if a.shape[: idx.ndim] != idx.shape:
        raise ShapeError(f"scatter_add: indices {idx.shape} do not match values {a.shape}")
    return _result(_scatter_rows(a.data, idx, n_rows), (a,), lambda g: (g[idx],))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = half * x * (1 + t)

    def fn(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return _result(out, (a,), fn)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.dtype, copy=False)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    def fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), fn)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


def mse(a: Tensor, b, reduction: str = "mean") -> Tensor:
    """Squared error between ``a`` and ``b``, averaged (or summed) over all elements."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = a.data - b.data
    if reduction == "mean":
        k = a.dtype.type(1.0 / max(d.size, 1))
    elif reduction == "sum":
        k = a.dtype.type(1.0)
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    out = np.asarray((d * d).sum() * k, dtype=a.dtype)
    two = a.dtype.type(2.0)
    return _result(out, (a, b), lambda g: (two * k * g * d, -two * k * g * d))


# --------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheck:
    max_rel_err: float
    checked: int
    excluded: int

    def __float__(self):
        return self.max_rel_err


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 3e-4,
    kink_eps: float = 1e-6,
    kink_tol: float = 1e-2,
    atol_scale: float = 1e-7,
    max_elems: int | None = None,
    seed: int = 0,
) -> GradCheck:
    """Compare tape gradients of ``f()`` with a five-point finite-difference stencil.

    Relative error per element is ``|a - b| / max(|a|, |b|, atol)`` with
    ``atol = atol_scale * max(1, |f(x)|)``: entries far below the scale of
    the function are compared in absolute terms, since round-off in ``f``
    dominates any difference quotient there. Elements where the one-sided
    differences at step ``kink_eps`` disagree by more than
    ``kink_tol * max(1, |fd|)`` sit on a non-differentiable point (e.g. a
    ReLU input at exactly zero) and are excluded; so are elements whose
    stencil and small-step estimates disagree that much, which means a kink
    lies inside the stencil. ``max_elems`` caps the number of checked
    entries per parameter (a seeded random subset).
    """
    params = list(params)
    with Tape() as tape:
        f0_t = f()
    analytic = backward(f0_t, tape, params)
    f0 = float(f0_t.data)
    atol = atol_scale * max(1.0, abs(f0))

    def at(flat, i, x):
        flat[i] = x
        return float(f().data)

    rng = np.random.default_rng(seed)
    worst, checked, excluded = 0.0, 0, 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idxs = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        for i in idxs:
            orig = flat[i]
            try:
                kp, km = at(flat, i, orig + kink_eps), at(flat, i, orig - kink_eps)
                fp1, fm1 = at(flat, i, orig + eps), at(flat, i, orig - eps)
                fp2, fm2 = at(flat, i, orig + 2 * eps), at(flat, i, orig - 2 * eps)
            finally:
                flat[i] = orig
            fd = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * eps)
            d_plus, d_minus = (kp - f0) / kink_eps, (f0 - km) / kink_eps
            small = (kp - km) / (2 * kink_eps)
            tol = kink_tol * max(1.0, abs(fd))
            if abs(d_plus - d_minus) > tol or abs(small - fd) > tol:
                excluded += 1
                continue
            a = float(gflat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), atol)
            worst = max(worst, rel)
            checked += 1
    return GradCheck(worst, checked, excluded)
