"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every primitive applied while it is active; calling
:meth:`Tape.gradient` walks the records backwards once.  Outside an active tape
operations run in plain numpy without recording, which is what evaluation uses.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "parameter", "grad", "grad_check",
    "GradCheckResult", "add", "sub", "mul", "neg", "matmul", "sigmoid", "tanh",
    "relu", "sin", "square", "power", "concat", "getitem", "take", "where",
    "sum", "mean", "masked_max", "reshape", "transpose", "conv1d", "gru_cell",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")
    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` defer to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, name: str | None = None) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended at creation time, so the list is already topologically
    sorted.  Leaves flagged ``requires_grad`` that feed a recorded node are
    collected in :attr:`parameters`.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def gradient(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns a mapping parameter -> gradient array.  Parameters that do not
        influence ``loss`` map to zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = list(self.parameters.values()) if params is None else list(params)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # keys whose buffers may be updated in place
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            owned.discard(id(node))
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                if isinstance(pg, _SliceGrad):
                    if prev is None:
                        prev = np.zeros(parent.shape)
                    elif key not in owned:
                        prev = prev.copy()
                    prev[pg.index] += pg.value
                    grads[key] = prev
                    owned.add(key)
                elif prev is None:
                    grads[key] = pg
                elif key in owned and prev.shape == np.shape(pg):
                    prev += pg
                else:
                    grads[key] = prev + pg
                    owned.add(key)
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` under a fresh tape and return (loss, grads for params)."""
    with Tape() as tape:
        loss = fn()
    g = tape.gradient(loss, params)
    return loss.item(), [g[p] for p in params]


class _SliceGrad:
    """Gradient that is nonzero only on ``index`` of the parent."""
    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    out = Tensor(data)
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if p.requires_grad and p.backward_fn is None:
            tape.parameters.setdefault(id(p), p)
    out.requires_grad = True
    out.parents = parents
    out.backward_fn = backward
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _record(ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(709) is the largest finite power; below -709 the result is 0 either way
    return 1.0 / (1.0 + np.exp(-np.maximum(x, -709.0)))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


_kink_probe = threading.local()


def relu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    probe = getattr(_kink_probe, "log", None)
    if probe is not None:
        probe.append(x > 0)
    pos = x > 0  # subgradient at 0 is 0
    return _record(np.maximum(x, 0.0), (a,), lambda g: (g * pos,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = x ** p
    return _record(y, (a,), lambda g: (g * p * x ** (p - 1.0),))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``.  ``mask`` is a constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    _check_broadcast("where", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(np.where(m, g, 0.0), sa) if a.requires_grad else None,
                _unbroadcast(np.where(m, 0.0, g), sb) if b.requires_grad else None)
    return _record(np.where(m, a.data, b.data), (a, b), backward)


# ------------------------------------------------------------------ linear

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., K] (or [K]) and ``b`` of shape [K, N] (or [K])."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1:
        raise ShapeError(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = np.multiply.outer(g, bd)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ np.reshape(g, -1)
            return ga, gb
        if a.requires_grad:
            ga = g @ bd.T
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb
    return _record(out, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(np.argsort(axes)),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    s = a.shape
    return _record(y, (a,), lambda g: (g.reshape(s),))


# --------------------------------------------------------- structural ops

def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    if not items:
        raise ShapeError("concat: nothing to concatenate")
    try:
        y = np.concatenate([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in items]} differ off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _record(y, tuple(items), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, index) -> Tensor:
    """Basic slicing / integer indexing (no fancy indexing; see :func:`take`)."""
    a = _as_tensor(a)
    y = a.data[index]

    return _record(np.array(y, copy=True), (a,), lambda g: (_SliceGrad(index, g),))


def _distinct(idx: np.ndarray) -> bool:
    s = np.sort(idx)
    return not (s[1:] == s[:-1]).any()


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of size {n}")
    shape = a.shape
    if axis == 0 and idx.ndim == 1 and _distinct(idx % n):
        # distinct rows: the gradient is a sparse row update of the parent
        return _record(a.data[idx], (a,), lambda g: (_SliceGrad(idx, g),))

    def backward(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)
    return _record(np.take(a.data, idx, axis=axis), (a,), backward)


# ------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record(np.asarray(y), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_max(a, mask, axis: int) -> Tensor:
    """Max along ``axis`` over entries where ``mask`` is true (first argmax gets the gradient)."""
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not m.any(axis=axis).all():
        raise ShapeError("masked_max: some slice has no unmasked entry")
    filled = np.where(m, a.data, -np.inf)
    arg = np.expand_dims(filled.argmax(axis=axis), axis)
    y = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
        return (out,)
    return _record(y, (a,), backward)


# ------------------------------------------------------------ convolution

def conv_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x, w, b, stride: int = 1) -> Tensor:
    """Strided 1-D convolution with a flipped kernel.

    ``x``: [B, n, l], ``w``: [m, n, k], ``b``: [m]  ->  [B, m, (l - k) // stride + 1]

    ``out[:, j, t] = b[j] + sum_{i,q} w[j, i, q] * x[:, i, t*stride + k - 1 - q]``
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1:
        raise ShapeError(f"conv1d: expected x[B,n,l], w[m,n,k], b[m]; got {x.shape}, {w.shape}, {b.shape}")
    B, n, l = x.shape
    m, n_w, k = w.shape
    if n_w != n or b.shape[0] != m:
        raise ShapeError(f"conv1d: channel mismatch x{x.shape} w{w.shape} b{b.shape}")
    if stride < 1 or k < 1:
        raise ShapeError(f"conv1d: kernel {k} and stride {stride} must be >= 1")
    if l < k:
        raise ShapeError(f"conv1d: input length {l} shorter than kernel {k}; need at least {k}")
    L = conv_output_length(l, k, stride)
    # cols[b, t, i, q] = x[b, i, t*stride + k - 1 - q]
    pos = np.arange(L)[:, None] * stride + np.arange(k - 1, -1, -1)[None, :]
    cols = x.data.transpose(0, 2, 1)[:, pos].transpose(0, 1, 3, 2).reshape(B, L, n * k)
    wmat = w.data.reshape(m, n * k)
    y = (cols @ wmat.T).transpose(0, 2, 1) + b.data[None, :, None]

    def backward(g):
        gt = g.transpose(0, 2, 1)  # [B, L, m]
        gw = gb = gx = None
        if w.requires_grad:
            gw = (gt.reshape(-1, m).T @ cols.reshape(-1, n * k)).reshape(m, n, k)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(B, L, n, k)
            gx = np.zeros((B, n, l))
            for q in range(k):
                start = k - 1 - q
                gx[:, :, start:start + stride * (L - 1) + 1:stride] += gcols[:, :, :, q].transpose(0, 2, 1)
        return gx, gw, gb
    return _record(y, (x, w, b), backward)


# ------------------------------------------------------------- fused GRU

def gru_cell(gx, h, u_rz, u_n, mask: np.ndarray | None = None) -> Tensor:
    """One batched GRU update given precomputed input projections.

    ``gx`` [B, 3H] holds (W_r x, W_z x, W x), ``u_rz`` [H, 2H] = [U_r^T | U_z^T]
    and ``u_n`` [H, H] = U^T.  Rows where ``mask`` ([B, 1] bool) is false keep
    ``h`` unchanged.
    """
    gx, h, u_rz, u_n = (_as_tensor(t) for t in (gx, h, u_rz, u_n))
    hd = h.data
    H = hd.shape[-1]
    if gx.shape != hd.shape[:-1] + (3 * H,) or u_rz.shape != (H, 2 * H) or u_n.shape != (H, H):
        raise ShapeError(f"gru_cell: shapes gx{gx.shape} h{h.shape} u_rz{u_rz.shape} u_n{u_n.shape} do not conform")
    gxd = gx.data
    rz = _sigmoid(gxd[:, :2 * H] + hd @ u_rz.data)
    r, z = rz[:, :H], rz[:, H:]
    rh = r * hd
    c = np.tanh(gxd[:, 2 * H:] + rh @ u_n.data)
    out = c + z * (hd - c)
    if mask is not None:
        out = np.where(mask, out, hd)

    def backward(g):
        if mask is not None:
            g_keep = np.where(mask, 0.0, g)
            g = np.where(mask, g, 0.0)
        d_pre_n = g * (1.0 - z) * (1.0 - c * c)
        d_rh = d_pre_n @ u_n.data.T
        d_pre_rz = np.concatenate([d_rh * hd, g * (hd - c)], axis=1) * rz * (1.0 - rz)
        dh = g * z + d_rh * r + d_pre_rz @ u_rz.data.T
        if mask is not None:
            dh += g_keep
        return (np.concatenate([d_pre_rz, d_pre_n], axis=1), dh,
                hd.T @ d_pre_rz if u_rz.requires_grad else None,
                rh.T @ d_pre_n if u_n.requires_grad else None)
    return _record(out, (gx, h, u_rz, u_n), backward)


# ----------------------------------------------------------- grad checking

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, ...]] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _relu_signature(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    _kink_probe.log = []
    try:
        value = fn().item()
        return value, _kink_probe.log
    finally:
        _kink_probe.log = None


def _same_pattern(p: list[np.ndarray], q: list[np.ndarray]) -> bool:
    return len(p) == len(q) and all(np.array_equal(x, y) for x, y in zip(p, q))


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    Relative error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.  Entries whose
    perturbation changes any relu activation pattern (or that sit on a relu
    input exactly equal to 0) are reported in ``skipped`` and excluded.
    ``max_entries`` caps the number of entries checked per parameter (random subset).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, params)

    worst, max_err, checked, skipped = None, 0.0, 0, []
    for p_i, p in enumerate(params):
        name = p.name or f"param{p_i}"
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        a_grad = analytic[p]
        original = p.data
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            plus = original.copy()
            plus[idx] += eps
            p.data = plus
            f_plus, log_plus = _relu_signature(fn)
            minus = original.copy()
            minus[idx] -= eps
            p.data = minus
            f_minus, log_minus = _relu_signature(fn)
            p.data = original
            if not _same_pattern(log_plus, log_minus):
                skipped.append((name, tuple(int(i) for i in idx)))
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_grad[idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            checked += 1
            if err > max_err:
                max_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckResult(max_err, checked, skipped, worst)
