"""Reverse-mode automatic differentiation over numpy float64 arrays.

A :class:`Tape` records every operation whose inputs carry a tape node.
Tensors without a node are constants.  Operations run eagerly, so a model
forward without a tape is plain numpy and costs nothing extra.

Shapes are never promoted implicitly: elementwise binary ops require equal
shapes, and :func:`broadcast` is the explicit way to expand a tensor.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def values(self) -> np.ndarray:
        return self.value.reshape(-1)

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    # small convenience layer; everything routes through the op functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


class _Node:
    __slots__ = ("kind", "inputs", "vjp", "shape")

    def __init__(self, kind, inputs, vjp, shape):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Append-only operation log.  Node ids are list positions, so they are
    topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        t = Tensor(value)
        self.nodes.append(_Node("leaf", (), None, t.shape))
        t.tape, t.node = self, len(self.nodes) - 1
        return t

    def _push(self, kind, inputs, vjp, out: np.ndarray) -> Tensor:
        self.nodes.append(_Node(kind, inputs, vjp, out.shape))
        return Tensor(out, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradient of the scalar ``root`` with respect to every reachable node."""
        if root.tape is not self or root.node is None:
            raise ValueError("root is not recorded on this tape")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self.consumed = True

        reachable = np.zeros(root.node + 1, dtype=bool)
        reachable[root.node] = True
        for i in range(root.node, -1, -1):
            if reachable[i]:
                for j in self.nodes[i].inputs:
                    if j is not None:
                        reachable[j] = True

        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape, dtype=DTYPE)}
        for i in range(root.node, -1, -1):
            if not reachable[i]:
                continue
            node = self.nodes[i]
            g = grads.get(i)
            if g is None:
                g = grads[i] = np.zeros(node.shape, dtype=DTYPE)
            if not node.inputs:
                continue
            parts = node.vjp(g)
            for j, gj in zip(node.inputs, parts):
                if j is None or gj is None:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
            node.vjp = None  # release saved forward values
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        if t.node is None:
            raise ValueError("constant tensors have no gradient")
        g = self.gradients.get(t.node)
        if g is None:
            return np.zeros(t.shape, dtype=DTYPE)
        return g


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(root)


def constant(value) -> Tensor:
    return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs are recorded on different tapes")
    return tape


def _emit(kind: str, ins: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    tape = _tape_of(*ins)
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node for t in ins)

    def masked_vjp(g):
        parts = vjp(g)
        return [p if t.node is not None else None for p, t in zip(parts, ins)]

    return tape._push(kind, ids, masked_vjp, out)


def _same_shape(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("div", (a, b), out, lambda g: (g / bv, -g * out / bv))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("shift", (a,), a.value + c, lambda g: (g,))


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)``, ``(..., n, k) @ (..., k, m)`` with identical
    leading dims, or ``(..., n, k) @ (k,)``."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2:
        raise ShapeError(f"matmul: left operand needs ndim >= 2, got {a.shape}")
    k = av.shape[-1]
    if bv.ndim == 1:
        if bv.shape[0] != k:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        out = av @ bv

        def vjp(g):
            return g[..., None] * bv, av.reshape(-1, k).T @ g.reshape(-1)

    elif bv.ndim == 2:
        if bv.shape[0] != k:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        out = av @ bv

        def vjp(g):
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, bv.shape[1])
            return ga, gb

    else:
        if bv.shape[:-2] != av.shape[:-2] or bv.shape[-2] != k:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        out = av @ bv

        def vjp(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _emit("matmul", (a, b), out, vjp)


# ------------------------------------------------------------ unary / pointwise

def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _emit("relu", (a,), np.where(pos, a.value, 0.0), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise ValueError("log of a non-positive value")
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _emit("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = softmax_array(a.value, axis)

    def vjp(g):
        # exact Jacobian-vector product: s * (g - <g, s>)
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _emit(
        "log_softmax", (a,), out,
        lambda g: (g - sm * g.sum(axis=axis, keepdims=True),),
    )


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.value.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)
    shape = a.shape
    return _emit("sum", (a,), out, lambda g: (np.array(_expand_back(g, shape, axes, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.value.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.value.mean(axis=axes, keepdims=keepdims)
    shape = a.shape
    return _emit("mean", (a,), out, lambda g: (_expand_back(g, shape, axes, keepdims) / n,))


def max(a, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal index."""
    a = as_tensor(a)
    axis = axis % a.value.ndim
    idx = np.argmax(a.value, axis=axis)  # argmax returns the first maximum
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)
    shape = a.shape

    def vjp(g):
        gi = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(idx, axis), gi, axis)
        return (full,)

    return _emit("max", (a,), out, vjp)


def max_over_time(a) -> Tensor:
    """Pool ``(B, T, D)`` to ``(B, D)``."""
    return max(a, axis=1)


# ------------------------------------------------------------- shape plumbing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.value, axes), lambda g: (np.transpose(g, inv),))


def broadcast(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot expand {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _emit("broadcast", (a,), np.array(out), vjp)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat of an empty list")
    ndim = ts[0].value.ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.value.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(ts))
        ]

    return _emit("concat", ts, out, vjp)


def take_slice(a, key) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices."""
    a = as_tensor(a)
    out = a.value[key]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _emit("slice", (a,), np.array(out), vjp)


def gather(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.value.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of {a.shape}")
    out = np.take(a.value, indices, axis=axis)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _emit("gather", (a,), out, vjp)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.value[ids], vjp)


def conv1d(x, w) -> Tensor:
    """Valid 1-d convolution: ``x`` is ``(B, T, Din)``, ``w`` is ``(K, Din, Dout)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.value.ndim != 3 or w.value.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} * {w.shape}")
    B, T, Din = x.shape
    K, _, Dout = w.shape
    if T < K:
        raise ShapeError(f"conv1d: sequence length {T} shorter than kernel width {K}")
    Tout = T - K + 1
    win = np.lib.stride_tricks.sliding_window_view(x.value, K, axis=1)  # B,Tout,Din,K
    win = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(B, Tout, K * Din)
    wm = w.value.reshape(K * Din, Dout)
    out = win @ wm

    def vjp(g):
        gw = (win.reshape(-1, K * Din).T @ g.reshape(-1, Dout)).reshape(K, Din, Dout)
        gwin = (g @ wm.T).reshape(B, Tout, K, Din)
        gx = np.zeros((B, T, Din), dtype=DTYPE)
        for k in range(K):
            gx[:, k:k + Tout] += gwin[:, :, k]
        return gx, gw

    return _emit("conv1d", (x, w), out, vjp)


# ---------------------------------------------------------------- registry

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "shift": shift,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "max": max,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take_slice,
    "gather": gather,
    "embedding": embedding,
    "conv1d": conv1d,
    "max_over_time": max_over_time,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast,
}


def record(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by operation name, e.g. ``record("softmax", x, axis=-1)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **attrs)


def finite_difference(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; a test oracle."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x.value if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis of ``x``; ``gamma``/``beta`` are ``(D,)``."""
    shape = x.shape
    mu = broadcast(mean(x, axis=-1, keepdims=True), shape)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    std = broadcast(sqrt(shift(var, eps)), shape)
    xn = div(xc, std)
    return add(mul(xn, broadcast(gamma, shape)), broadcast(beta, shape))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias broadcast explicitly over leading dims."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast(b, y.shape))
    return y
