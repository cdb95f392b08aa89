"""Dense tensors with a small reverse-mode tape.

Only the primitives the MoE model needs are provided. Every primitive checks
shapes explicitly and never broadcasts beyond applying a length-``d`` vector to
each row of a ``T x d`` matrix.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = mean(square(y))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_current_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("spes_tape", default=None)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Immutable dense array plus a flag saying whether gradients are wanted."""

    __slots__ = ("data", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        # True for leaves that want grads and for any op output depending on one.
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    ``backward`` walks the record in exact reverse order. Leaves created with
    ``requires_grad=False`` are never recorded, so their gradient is reported
    as zeros.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> GradMap:
        if seed is None:
            if output.data.size != 1:
                raise ShapeError(f"backward needs a scalar output or an explicit seed, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.array(seed, dtype=output.dtype)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp.requires_grad:
                    leaves[key] = inp
        if output.requires_grad:
            leaves[id(output)] = output
        return GradMap({k: grads[k] for k in leaves if k in grads}, leaves)


class GradMap:
    """Gradients keyed by leaf tensor; untracked or unreached leaves read as zeros."""

    def __init__(self, by_id: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._by_id = by_id
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(t._tracked for t in inputs):
        tape = _current_tape.get()
        if tape is not None:
            out._tracked = True
            tape.nodes.append((out, tuple(inputs), backward))
    return out


def _out(data: np.ndarray) -> Tensor:
    return Tensor(data)


def _same_dtype(*ts: Tensor):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def _need(t: Tensor) -> bool:
    return t._tracked


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


# --- primitives -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _same_dtype(a, b)
    A, B = a.data, b.data
    out = _out(A @ B)

    def backward(g):
        return (g @ B.T if _need(a) else None, A.T @ g if _need(b) else None)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _record(_out(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _record(_out(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    A, B = a.data, b.data
    return _record(_out(A * B), (a, b), lambda g: (g * B if _need(a) else None, g * A if _need(b) else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(_out(a.data * c), (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    A = a.data
    return _record(_out(A * A), (a,), lambda g: (2 * A * g,))


def add_all(ts: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, recorded as a single node."""
    if not ts:
        raise ShapeError("add_all needs at least one tensor")
    shape = ts[0].shape
    for t in ts:
        if t.shape != shape:
            raise ShapeError(f"add_all shape mismatch: {shape} vs {t.shape}")
    _same_dtype(*ts)
    acc = ts[0].data.copy()
    for t in ts[1:]:
        acc += t.data
    return _record(_out(acc), tuple(ts), lambda g: tuple(g for _ in ts))


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _record(_out(np.asarray(a.data.sum(), dtype=dt)), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dt = a.shape, a.dtype
    inv = dt.type(1.0 / n)
    return _record(
        _out(np.asarray(a.data.sum() * inv, dtype=dt)), (a,), lambda g: (np.full(shape, g * inv, dtype=dt),)
    )


def col_mean(a: Tensor) -> Tensor:
    """Mean over rows of a T x M matrix -> length-M vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"col_mean expects a matrix, got {a.shape}")
    T = a.shape[0]
    dt = a.dtype
    inv = dt.type(1.0 / T)
    return _record(
        _out(a.data.sum(axis=0) * inv), (a,), lambda g: (np.broadcast_to(g * inv, a.shape).astype(dt),)
    )


def dot_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Scalar sum(a * c) with a constant (non-differentiable) weight array."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"dot_const shape mismatch: {a.shape} vs {c.shape}")
    return _record(_out(np.asarray((a.data * c).sum(), dtype=a.dtype)), (a,), lambda g: (g * c,))


def silu(a: Tensor) -> Tensor:
    A = a.data
    sig = 1.0 / (1.0 + np.exp(-A))
    out = A * sig

    def backward(g):
        return (g * (sig * (1.0 + A * (1.0 - sig))),)

    return _record(_out(out), (a,), backward)


def rmsnorm(x: Tensor, g: Tensor, eps: float = 1e-6) -> Tensor:
    if g.data.ndim != 1 or x.shape[-1] != g.shape[0]:
        raise ShapeError(f"rmsnorm: last dim of x {x.shape} must equal length of gain {g.shape}")
    _same_dtype(x, g)
    X, G = x.data, g.data
    d = X.shape[-1]
    ms = (X * X).mean(axis=-1, keepdims=True) + x.dtype.type(eps)
    inv = 1.0 / np.sqrt(ms)
    xhat = X * inv
    out = xhat * G

    def backward(gy):
        dg = (gy * xhat).reshape(-1, d).sum(axis=0) if _need(g) else None
        dx = None
        if _need(x):
            gx = gy * G
            # d/dx of x * (mean(x^2)+eps)^-1/2
            dx = inv * (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, dg)

    return _record(_out(out), (x, g), backward)


def swiglu_expert(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    d = x.shape[-1]
    if w_gate.shape != w_up.shape or w_gate.shape[0] != d or w_down.shape != (w_gate.shape[1], d):
        raise ShapeError(
            f"swiglu_expert shape mismatch: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    T = table.data

    def backward(g):
        out = np.zeros_like(T)
        np.add.at(out, ids, g)
        return (out,)

    return _record(_out(T[ids]), (table,), backward)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _record(_out(x.data[rows]), (x,), backward)


def scatter_rows(n_rows: int, parts: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Build an ``n_rows x d`` matrix by adding each part's rows at the given row indices."""
    if not parts:
        raise ShapeError("scatter_rows needs at least one part")
    ts = tuple(p for p, _ in parts)
    d = ts[0].shape[1]
    dt = _same_dtype(*ts)
    out = np.zeros((n_rows, d), dtype=dt)
    idxs = []
    for t, rows in parts:
        rows = np.asarray(rows, dtype=np.int64)
        if t.data.ndim != 2 or t.shape[1] != d or t.shape[0] != rows.size:
            raise ShapeError(f"scatter_rows part shape {t.shape} does not fit {rows.size} rows of width {d}")
        np.add.at(out, rows, t.data)
        idxs.append(rows)

    def backward(g):
        return tuple(g[r] for r in idxs)

    return _record(_out(out), ts, backward)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``t`` of a T x d matrix by the scalar ``w[t]``."""
    if x.data.ndim != 2 or w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows shape mismatch: {x.shape} vs {w.shape}")
    _same_dtype(x, w)
    X, W = x.data, w.data

    def backward(g):
        return (g * W[:, None] if _need(x) else None, (g * X).sum(axis=1) if _need(w) else None)

    return _record(_out(X * W[:, None]), (x, w), backward)


def scale_cols(x: Tensor, g: Tensor) -> Tensor:
    """Multiply column ``j`` of a T x d matrix by ``g[j]`` (per-row application of a vector)."""
    if x.data.ndim != 2 or g.data.ndim != 1 or g.shape[0] != x.shape[1]:
        raise ShapeError(f"scale_cols shape mismatch: {x.shape} vs {g.shape}")
    _same_dtype(x, g)
    X, G = x.data, g.data

    def backward(gy):
        return (gy * G if _need(x) else None, (gy * X).sum(axis=0) if _need(g) else None)

    return _record(_out(X * G), (x, g), backward)


def softmax(x: Tensor) -> Tensor:
    X = x.data
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(_out(p), (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a matrix, always with max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"logsumexp expects a matrix, got {x.shape}")
    X = x.data
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    p = e / s

    def backward(g):
        return (p * g[:, None],)

    return _record(_out(lse), (x,), backward)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[t, s] = x[t, idx[t, s]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_cols shape mismatch: {x.shape} vs index {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), g)
        return (out,)

    return _record(_out(x.data[rows, idx]), (x,), backward)


def take_entries(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Vector of x[rows[n], cols[n]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _record(_out(x.data[rows, cols]), (x,), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by its sum."""
    X = x.data
    s = X.sum(axis=1, keepdims=True)
    y = X / s

    def backward(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) / s,)

    return _record(_out(y), (x,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean next-token cross-entropy and the per-row log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy shape mismatch: logits {logits.shape}, targets {targets.shape}")
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")
    lse = logsumexp(logits)
    picked = take_entries(logits, np.arange(targets.size), targets)
    return mean(sub(lse, picked)), lse


# --- gradient checking -----------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-3,
    dtype=np.float32,
    floor: float = 1e-6,
    order: int = 2,
    return_grads: bool = False,
):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. The reverse-mode gradient
    is computed at ``dtype``; the central differences are always evaluated in
    float64, with the 3-point (``order=2``) or 5-point (``order=4``) stencil.
    Relative error is ``|a-b| / max(|a|, |b|, floor)``, so coordinates whose
    gradient is below ``floor`` are compared absolutely.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    if order == 2:
        stencil = ((1, 0.5), (-1, -0.5))
    elif order == 4:
        stencil = ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))
    else:
        raise ValueError("order must be 2 or 4")
    # both routes evaluate at the same point, representable in ``dtype``
    base = [np.asarray(p, dtype=dtype).astype(np.float64) for p in params]

    ts = [Tensor(p.astype(dtype), requires_grad=True) for p in base]
    with Tape() as tape:
        out = f(ts)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite output at the base point")
    grads = tape.backward(out)
    ad = [np.asarray(grads[t], dtype=np.float64) for t in ts]
    for i, g in enumerate(ad):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite reverse-mode gradient in parameter {i}")

    def evaluate(vals):
        return f([Tensor(p) for p in vals]).item()

    worst = 0.0
    fds = []
    for i, p in enumerate(base):
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            acc = 0.0
            for step, weight in stencil:
                flat[j] = orig + step * eps
                v = evaluate(base)
                if not np.isfinite(v):
                    flat[j] = orig
                    raise NonFiniteError(f"non-finite value perturbing parameter {i}, coordinate {j}")
                acc += weight * v
            flat[j] = orig
            fd.reshape(-1)[j] = acc / eps
        fds.append(fd)
        if fd.size:
            worst = max(worst, float(_rel_err(ad[i], fd, floor).max()))
    if return_grads:
        return worst, ad, fds
    return worst


def params_of(ts: Iterable[Tensor]) -> list[np.ndarray]:
    return [t.data for t in ts]
