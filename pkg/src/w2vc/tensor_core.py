"""Dense float64 tensors and a tape-based reverse-mode autodiff engine.

Every differentiable primitive is recorded on the active :class:`Graph` as a
:class:`Node` holding its backward rule *and* a pure forward function, so
that a failing gradient check can be localised to the offending op by a
per-node directional derivative test.

Ops executed with no graph active are plain numpy computations (inference).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class ShapeError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable
    forward: Callable
    saved: object = None
    # ops whose backward is deliberately not the Jacobian of the forward
    smooth: bool = True


class Graph:
    """Append-only tape of op records; backward runs in exact reverse order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def scan_nonfinite(self) -> str | None:
        """Name of the first op whose output holds NaN/Inf, else None."""
        for node in self.nodes:
            a = node.output.data
            # one reduction per op; the elementwise test only runs on a hit
            if not np.isfinite(a.sum()) and not np.isfinite(a).all():
                return node.op
        return None

    def check_finite(self) -> None:
        op = self.scan_nonfinite()
        if op is not None:
            raise NumericError(f"non-finite value produced by op '{op}'")


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def current_graph() -> Graph | None:
    s = _stack()
    return s[-1] if s else None


@contextlib.contextmanager
def no_grad():
    """Run ops without recording, even inside an enclosing graph."""
    s = _stack()
    saved = list(s)
    s.clear()
    try:
        yield
    finally:
        s.extend(saved)


def apply_op(name: str, forward: Callable, backward: Callable, *inputs, smooth: bool = True) -> Tensor:
    """Run ``forward`` on the input arrays and record a node if needed.

    ``forward(*arrays)`` returns the output array, or ``(output, saved)``.
    ``backward(node, g)`` returns one gradient (or None) per input.
    """
    ts = tuple(as_tensor(x) for x in inputs)
    res = forward(*(t.data for t in ts))
    saved = None
    if isinstance(res, tuple):
        res, saved = res
    out = Tensor(res)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in ts):
        out.requires_grad = True
        node = Node(name, ts, out, backward, forward, saved, smooth)
        out.node = node
        graph.nodes.append(node)
    return out


def backprop(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf.

    Returns the mapping leaf -> gradient produced by this pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(node, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"op '{node.op}' produced grad {gi.shape} for input {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.node is None:
                leaves[key] = t
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    out = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    return apply_op(
        "add", np.add,
        lambda n, g: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(g, n.inputs[1].shape)),
        a, b,
    )


def sub(a, b) -> Tensor:
    return apply_op(
        "sub", np.subtract,
        lambda n, g: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(-g, n.inputs[1].shape)),
        a, b,
    )


def mul(a, b) -> Tensor:
    def bwd(n, g):
        x, y = n.inputs
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)
    return apply_op("mul", np.multiply, bwd, a, b)


def div(a, b) -> Tensor:
    def bwd(n, g):
        x, y = n.inputs
        gx = g / y.data
        return _unbroadcast(gx, x.shape), _unbroadcast(-gx * n.output.data, y.shape)
    return apply_op("div", np.divide, bwd, a, b)


def neg(a) -> Tensor:
    return apply_op("neg", np.negative, lambda n, g: (-g,), a)


def square(a) -> Tensor:
    return apply_op("square", np.square, lambda n, g: (2.0 * g * n.inputs[0].data,), a)


def exp(a) -> Tensor:
    return apply_op("exp", np.exp, lambda n, g: (g * n.output.data,), a)


def log(a) -> Tensor:
    return apply_op("log", np.log, lambda n, g: (g / n.inputs[0].data,), a)


def sqrt(a) -> Tensor:
    return apply_op("sqrt", np.sqrt, lambda n, g: (0.5 * g / n.output.data,), a)


def tanh(a) -> Tensor:
    return apply_op("tanh", np.tanh, lambda n, g: (g * (1.0 - n.output.data ** 2),), a)


def _sigmoid(x):
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    def bwd(n, g):
        y = n.output.data
        return (g * y * (1.0 - y),)
    return apply_op("sigmoid", _sigmoid, bwd, a)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which gradient checks like)."""
    def fwd(x):
        t = x * x
        t *= 0.044715
        t += 1.0
        t *= x
        t *= _GELU_C
        np.tanh(t, out=t)
        y = t + 1.0
        y *= x
        y *= 0.5
        return y, t

    def bwd(n, g):
        x = n.inputs[0].data
        t = n.saved
        du = x * x
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        du *= x
        du *= 1.0 - t * t
        du += 1.0 + t
        du *= 0.5
        du *= g
        return (du,)
    return apply_op("gelu", fwd, bwd, a)


def clamp_min(a, lo: float) -> Tensor:
    def bwd(n, g):
        return (g * (n.inputs[0].data > lo),)
    return apply_op("clamp_min", lambda x: np.maximum(x, lo), bwd, a)


def gradient_scale(x, factor: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``factor``."""
    factor = float(factor)
    if not np.isfinite(factor):
        raise ValueError("gradient scale factor must be finite")
    x = as_tensor(x)
    rep = _active_replay()
    if rep is None or rep.recording:
        if rep is not None:
            rep.take(lambda: (1.0 - factor) * x.data)

        def fwd(a):
            return a.copy()
    else:
        # replayed as factor*x + const so its true derivative is the scaled one
        rest = rep.take(None)

        def fwd(a):
            return factor * a + rest
    return apply_op("gradient_scale", fwd, lambda n, g: (g * factor,), x, smooth=factor == 1.0)


# --- reductions / shape ----------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    def bwd(n, g):
        shape = n.inputs[0].shape
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return apply_op("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), bwd, a)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    return apply_op(
        "reshape", lambda x: x.reshape(shape),
        lambda n, g: (g.reshape(n.inputs[0].shape),), a,
    )


def transpose(a, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return apply_op(
        "transpose", lambda x: np.transpose(x, axes),
        lambda n, g: (np.transpose(g, inv),), a,
    )


def getitem(a, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)

    def bwd(n, g):
        gx = np.zeros_like(n.inputs[0].data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)
    return apply_op("getitem", lambda x: x[key], bwd, a)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    sizes = [as_tensor(t).shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(n, g):
        return tuple(np.split(g, cuts, axis=axis))
    return apply_op("concat", lambda *xs: np.concatenate(xs, axis=axis), bwd, *tensors)


def pad_stack(tensors: Sequence) -> Tensor:
    """Stack ``(T_i, D)`` tensors into a zero-padded ``(B, T_max, D)`` tensor."""
    lengths = [as_tensor(t).shape[0] for t in tensors]

    def fwd(*xs):
        out = np.zeros((len(xs), max(lengths), xs[0].shape[1]), dtype=DTYPE)
        for i, x in enumerate(xs):
            out[i, : len(x)] = x
        return out

    def bwd(n, g):
        return tuple(g[i, :L].copy() for i, L in enumerate(lengths))
    return apply_op("pad_stack", fwd, bwd, *tensors)


def replace_rows(x, mask: np.ndarray, row) -> Tensor:
    """Rows of ``x`` where ``mask`` is true are replaced by the vector ``row``."""
    mask = np.asarray(mask, dtype=bool)

    def fwd(a, r):
        out = a.copy()
        out[mask] = r
        return out

    def bwd(n, g):
        gx = g.copy()
        gx[mask] = 0.0
        return gx, g[mask].sum(axis=0)
    return apply_op("replace_rows", fwd, bwd, x, row)


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2] and b.ndim != 2:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bwd(n, g):
        x, y = n.inputs[0].data, n.inputs[1].data
        gx = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2 and x.ndim > 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.swapaxes(x, -1, -2) @ g
        return gx, gy
    return apply_op("matmul", np.matmul, bwd, a, b)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --- normalisation / probability -------------------------------------------

def _softmax(x, axis):
    if not np.isfinite(x).all():
        raise NumericError("softmax received non-finite input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    def bwd(n, g):
        y = n.output.data
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return apply_op("softmax", lambda x: _softmax(x, axis), bwd, a)


def log_softmax(a, axis: int = -1) -> Tensor:
    def fwd(x):
        if not np.isfinite(x).all():
            raise NumericError("log_softmax received non-finite input")
        z = x - x.max(axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(n, g):
        p = np.exp(n.output.data)
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return apply_op("log_softmax", fwd, bwd, a)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    def fwd(a, w, b):
        mu = a.mean(axis=-1, keepdims=True)
        xc = a - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * w + b, (xhat, inv)

    def bwd(n, g):
        xhat, inv = n.saved
        w = n.inputs[1].data
        gw = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        gh = g * w
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb
    return apply_op("layer_norm", fwd, bwd, x, gain, bias)


def l2_norm(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``; the backward is guarded so a zero
    vector has a zero (sub)gradient instead of NaN."""
    def bwd(n, g):
        x = n.inputs[0].data
        nrm = np.expand_dims(n.output.data, axis)
        return (np.expand_dims(g, axis) * x / np.maximum(nrm, eps),)
    return apply_op("l2_norm", lambda x: np.sqrt(np.sum(x * x, axis=axis)), bwd, a)


# --- recurrent -------------------------------------------------------------

def lstm(x, w_in, w_rec, bias) -> Tensor:
    """Unidirectional LSTM layer with zero initial state, fused with BPTT.

    ``x`` is ``(T, I)`` or ``(B, T, I)``; ``w_in`` is ``(I, 4H)``, ``w_rec``
    ``(H, 4H)``, ``bias`` ``(4H,)``. Gate column order is input, forget,
    output, cell-candidate. Returns hidden states of the same leading shape.
    """
    def fwd(xa, wi, wr, b):
        squeeze = xa.ndim == 2
        xs = xa[None] if squeeze else xa
        B, T, _ = xs.shape
        H = wr.shape[0]
        pre = xs @ wi + b
        acts = np.empty((B, T, 4 * H))
        cs = np.zeros((B, T + 1, H))
        hs = np.zeros((B, T + 1, H))
        tcs = np.empty((B, T, H))
        h = hs[:, 0]
        c = cs[:, 0]
        for t in range(T):
            a = pre[:, t] + h @ wr
            act = acts[:, t]
            act[:, : 3 * H] = 0.5 + 0.5 * np.tanh(0.5 * a[:, : 3 * H])
            act[:, 3 * H:] = np.tanh(a[:, 3 * H:])
            c = act[:, H: 2 * H] * c + act[:, :H] * act[:, 3 * H:]
            tc = np.tanh(c)
            h = act[:, 2 * H: 3 * H] * tc
            cs[:, t + 1] = c
            tcs[:, t] = tc
            hs[:, t + 1] = h
        out = hs[:, 1:].copy()
        return (out[0] if squeeze else out), (acts, cs, tcs, hs, squeeze)

    def bwd(n, g):
        acts, cs, tcs, hs, squeeze = n.saved
        xa, wi, wr = (t.data for t in n.inputs[:3])
        gs = g[None] if squeeze else g
        xs = xa[None] if squeeze else xa
        B, T, H = gs.shape
        da_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        wr_t = wr.T
        for t in range(T - 1, -1, -1):
            act = acts[:, t]
            i, f, o, gg = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
            tc = tcs[:, t]
            dh = gs[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = da_all[:, t]
            da[:, :H] = dc * gg * i * (1.0 - i)
            da[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            da[:, 3 * H:] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            dh_next = da @ wr_t
        flat = da_all.reshape(-1, 4 * H)
        gwi = xs.reshape(-1, xs.shape[-1]).T @ flat
        gwr = hs[:, :-1].reshape(-1, H).T @ flat
        gb = flat.sum(axis=0)
        gx = da_all @ wi.T
        return (gx[0] if squeeze else gx), gwi, gwr, gb
    return apply_op("lstm", fwd, bwd, x, w_in, w_rec, bias)


# --- non-differentiable routing --------------------------------------------

class _Replay:
    """Baseline values of stop-gradient / straight-through branches.

    While a replay is active the first evaluation records every frozen
    branch; subsequent evaluations (after :meth:`rewind`) substitute the
    recorded constants so that the evaluated function's true derivative is
    exactly the gradient the tape computes.
    """

    def __init__(self):
        self.values: list = []
        self.recording = True
        self.cursor = 0

    def rewind(self) -> None:
        self.recording = False
        self.cursor = 0

    def take(self, compute: Callable):
        if self.recording:
            v = compute()
            self.values.append(np.copy(v))
            return v
        if self.cursor >= len(self.values):
            raise DeterminismError("replay requested more frozen branches than were recorded")
        v = self.values[self.cursor]
        self.cursor += 1
        return np.copy(v)


def _active_replay() -> _Replay | None:
    return getattr(_local, "replay", None)


@contextlib.contextmanager
def frozen_branches():
    prev = _active_replay()
    rep = _Replay()
    _local.replay = rep
    try:
        yield rep
    finally:
        _local.replay = prev


def nondifferentiable(compute: Callable):
    """Evaluate a piecewise-constant quantity (argmin, argmax, ...), frozen
    to its baseline value under :func:`frozen_branches`."""
    rep = _active_replay()
    return compute() if rep is None else rep.take(compute)


def stop_gradient(x) -> Tensor:
    x = as_tensor(x)
    rep = _active_replay()
    data = x.data.copy() if rep is None else rep.take(lambda: x.data.copy())
    return Tensor(data)


def straight_through(src, value) -> Tensor:
    """Forward emits ``value``; backward copies the gradient to ``src`` only."""
    src, value = as_tensor(src), as_tensor(value)
    rep = _active_replay()
    if rep is None or rep.recording:
        if rep is not None:
            rep.take(lambda: value.data - src.data)

        def fwd(s, v):
            return v.copy()
    else:
        offset = rep.take(None)

        def fwd(s, v):
            return s + offset
    return apply_op("straight_through", fwd, lambda n, g: (g, None), src, value, smooth=False)


# --- verification ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple | None
    per_param: dict[str, float] = field(default_factory=dict)
    suspect_ops: list[str] = field(default_factory=list)
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def ridders(f1d: Callable[[float], float], h0: float = 0.1, con: float = 1.4, ntab: int = 10,
            safe: float = 2.0) -> tuple[float, float]:
    """Derivative at 0 of a scalar function by Richardson-extrapolated central
    differences with shrinking step (Ridders' method); returns (estimate, error)."""
    con2 = con * con
    a = np.zeros((ntab, ntab))
    h = h0
    a[0, 0] = (f1d(h) - f1d(-h)) / (2.0 * h)
    best, err = a[0, 0], np.inf
    for i in range(1, ntab):
        h /= con
        a[0, i] = (f1d(h) - f1d(-h)) / (2.0 * h)
        fac = con2
        for j in range(1, i + 1):
            a[j, i] = (a[j - 1, i] * fac - a[j - 1, i - 1]) / (fac - 1.0)
            fac *= con2
            errt = max(abs(a[j, i] - a[j - 1, i]), abs(a[j, i] - a[j - 1, i - 1]))
            if errt <= err:
                err, best = errt, a[j, i]
        if abs(a[i, i] - a[i - 1, i - 1]) >= safe * err:
            break
    return float(best), float(err)


def finite_diff_check(
    f: Callable,
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    skip_below: float = 1e-10,
    names: Iterable[str] | None = None,
    refine: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of ``f(params)`` with central differences.

    Frozen branches (stop-gradient, straight-through, argmin) are recorded on
    the first evaluation and replayed on the perturbed ones. Entries where
    both gradients are below ``skip_below`` in magnitude are not compared.

    With ``refine``, an entry whose plain central difference is not well
    inside ``tol`` (above ``tol/10``) is re-estimated with :func:`ridders`, whose larger initial step escapes
    the roundoff floor that dominates tiny gradients.
    On failure the report lists ops whose local backward rule disagrees with
    a directional derivative of their forward.
    """
    names = list(params) if names is None else list(names)
    for p in params.values():
        p.grad = None
    with frozen_branches() as rep:
        with Graph() as graph:
            loss = f(params)
        backprop(graph, loss)
        analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

        def evaluate() -> float:
            rep.rewind()
            with no_grad():
                return _scalar(f(params))

        base1, base2 = evaluate(), evaluate()
        if base1 != base2:
            raise DeterminismError(f"f is not deterministic: {base1!r} != {base2!r}")

        def rel_err(num, ana):
            scale = max(abs(num), abs(ana))
            return None if scale < skip_below else abs(num - ana) / scale

        report = GradCheckReport(0.0, None, None, tol=tol)
        for name in names:
            p = params[name]
            worst = 0.0
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]

                def at(delta):
                    flat[j] = orig + delta
                    v = evaluate()
                    flat[j] = orig
                    return v
                ana = analytic[name].reshape(-1)[j]
                err = rel_err((at(step) - at(-step)) / (2.0 * step), ana)
                if refine and err is not None and err > 0.1 * tol:
                    num, est = ridders(at)
                    if est > 0.1 * tol * max(abs(num), abs(ana)):
                        # 0.1 is too coarse for this entry's scale; restart small
                        num2, est2 = ridders(at, 1e-3)
                        if est2 < est:
                            num = num2
                    err = rel_err(num, ana)
                if err is None:
                    continue
                if err > worst:
                    worst = err
                if err > report.max_rel_err:
                    report.max_rel_err = err
                    report.worst_param = name
                    report.worst_index = np.unravel_index(j, p.shape)
            report.per_param[name] = worst
    if not report.passed:
        report.suspect_ops = localize(graph)
    return report


def localize(graph: Graph, step: float = 1e-6, tol: float = 1e-4, seed: int = 0) -> list[str]:
    """Ops whose recorded backward disagrees with their forward's directional derivative."""
    rng = np.random.default_rng(seed)
    bad: list[str] = []
    for node in graph.nodes:
        if not node.smooth:
            continue
        ins = [t.data for t in node.inputs]
        u = rng.standard_normal(node.output.shape)
        grads = node.backward(node, u)
        for k, t in enumerate(node.inputs):
            if not t.requires_grad or grads[k] is None:
                continue
            v = rng.standard_normal(t.shape)

            def at(sign):
                args = list(ins)
                args[k] = ins[k] + sign * step * v
                res = node.forward(*args)
                return res[0] if isinstance(res, tuple) else res
            num = float(np.sum(u * (at(1) - at(-1)))) / (2 * step)
            ana = float(np.sum(grads[k] * v))
            if abs(num - ana) > tol * max(1.0, abs(num), abs(ana)):
                if node.op not in bad:
                    bad.append(node.op)
                break
    return bad
