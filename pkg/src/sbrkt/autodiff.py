"""Minimal reverse-mode autodiff over float64 numpy arrays.

Provides exactly the operations the models in this package need (affine
layers, sigmoid/tanh, an LSTM cell, masked BCE), plus the Adam optimizer
and a finite-difference gradient checker. Values are always float64;
gradients accumulate into ``Node.grad`` until explicitly reset.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "DimensionError",
    "no_grad",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "affine",
    "sigmoid",
    "tanh_act",
    "gather_rows",
    "concat",
    "slice_cols",
    "rowsum",
    "reduce_sum",
    "scale",
    "add_const",
    "clamp_min",
    "divide",
    "bce_loss",
    "backward",
    "zero_grads",
    "AdamState",
    "Adam",
    "SGD",
    "clip_global_norm",
    "GradCheckReport",
    "grad_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape construction (thread-local)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Node:
    """A value in the computation graph with an accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents) if _grad_enabled() else ()
        self._backward = backward if _grad_enabled() else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


def constant(value) -> Node:
    return Node(value)


def parameter(value, name="") -> Node:
    return Node(value, name=name)


def _make(value, parents, backward) -> Node:
    if not _grad_enabled():
        return Node(value)
    return Node(value, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    out_val = a.value + b.value

    def bw(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    return _make(out_val, (a, b), bw)


def neg(a: Node) -> Node:
    def bw(g):
        a.grad -= g

    return _make(-a.value, (a,), bw)


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    out_val = av * bv

    def bw(g):
        a.grad += _unbroadcast(g * bv, av.shape)
        b.grad += _unbroadcast(g * av, bv.shape)

    return _make(out_val, (a, b), bw)


def scale(a: Node, k: float) -> Node:
    def bw(g):
        a.grad += k * g

    return _make(k * a.value, (a,), bw)


def add_const(a: Node, k) -> Node:
    def bw(g):
        a.grad += _unbroadcast(g, a.value.shape)

    return _make(a.value + k, (a,), bw)


def divide(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    out_val = av / bv

    def bw(g):
        a.grad += _unbroadcast(g / bv, av.shape)
        b.grad += _unbroadcast(-g * av / (bv * bv), bv.shape)

    return _make(out_val, (a, b), bw)


def clamp_min(a: Node, lo: float) -> Node:
    """Elementwise max(a, lo); gradient is zero where the clamp engages."""
    keep = a.value > lo

    def bw(g):
        a.grad += g * keep

    return _make(np.maximum(a.value, lo), (a,), bw)


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: {av.shape} @ {bv.shape}")
    out_val = av @ bv

    def bw(g):
        a.grad += g @ bv.T
        b.grad += av.T @ g

    return _make(out_val, (a, b), bw)


def linear(x: Node, w: Node) -> Node:
    """x @ w.T for x of shape [B, n] (or [n]) and w of shape [m, n]."""
    xv, wv = x.value, w.value
    squeeze = xv.ndim == 1
    x2 = xv[None, :] if squeeze else xv
    if x2.shape[1] != wv.shape[1]:
        raise DimensionError(f"linear: x {xv.shape} vs w {wv.shape}")
    out_val = x2 @ wv.T
    if squeeze:
        out_val = out_val[0]

    def bw(g):
        g2 = g[None, :] if squeeze else g
        w.grad += g2.T @ x2
        gx = g2 @ wv
        x.grad += gx[0] if squeeze else gx

    return _make(out_val, (x, w), bw)


def affine(w: Node, x: Node, b: Node) -> Node:
    """W x + b with W [m, n], b [m]; x may be [n] or batched [B, n]."""
    if w.value.ndim != 2 or b.value.ndim != 1 or w.value.shape[0] != b.value.shape[0]:
        raise DimensionError(f"affine: W {w.value.shape} vs b {b.value.shape}")
    return add(linear(x, w), b)


def sigmoid(x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-x.value))

    def bw(g):
        x.grad += g * s * (1.0 - s)

    return _make(s, (x,), bw)


def tanh_act(x: Node) -> Node:
    t = np.tanh(x.value)

    def bw(g):
        x.grad += g * (1.0 - t * t)

    return _make(t, (x,), bw)


def gather_rows(table: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    out_val = table.value[idx]

    def bw(g):
        np.add.at(table.grad, idx, g)

    return _make(out_val, (table,), bw)


def concat(nodes, axis=-1) -> Node:
    nodes = list(nodes)
    out_val = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            n.grad += g[tuple(sl)]

    return _make(out_val, tuple(nodes), bw)


def slice_cols(x: Node, lo: int, hi: int) -> Node:
    out_val = x.value[..., lo:hi]

    def bw(g):
        x.grad[..., lo:hi] += g

    return _make(out_val, (x,), bw)


def rowsum(x: Node) -> Node:
    """Sum over the last axis."""
    out_val = x.value.sum(axis=-1)

    def bw(g):
        x.grad += g[..., None]

    return _make(out_val, (x,), bw)


def reduce_sum(x: Node) -> Node:
    def bw(g):
        x.grad += g

    return _make(x.value.sum(), (x,), bw)


_P_EPS = 1e-7


def bce_loss(p: Node, y, mask) -> Node:
    """Masked-mean binary cross-entropy.

    `y` and `mask` are plain {0,1} arrays broadcastable to p's shape.
    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        raise ValueError("bce_loss: no valid steps (mask is all zero)")
    pc = np.clip(p.value, _P_EPS, 1.0 - _P_EPS)
    loss = -(mask * (y * np.log(pc) + (1.0 - y) * np.log1p(-pc))).sum() / total
    inside = (p.value > _P_EPS) & (p.value < 1.0 - _P_EPS)

    def bw(g):
        dp = mask * (pc - y) / (pc * (1.0 - pc)) / total
        p.grad += g * dp * inside

    return _make(loss, (p,), bw)


def _toposort(root: Node):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Accumulate gradients of `root` into every reachable node's grad.

    Each call propagates exactly one pass worth of gradient, so running
    backward twice without a reset doubles every accumulated grad.
    """
    if seed is None:
        seed = np.ones_like(root.value)
    order = _toposort(root)
    saved = [(node, node.grad) for node in order]
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.asarray(root.grad + seed)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node, prior in saved:
        node.grad = np.asarray(node.grad + prior)


def zero_grads(params) -> None:
    for p in _iter_params(params):
        p.grad[...] = 0.0


def _iter_params(params):
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


def _named_params(params):
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    """Adam with bias correction (defaults beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = _named_params(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState(
            first_moment=[np.zeros_like(p.value) for _, p in self.params],
            second_moment=[np.zeros_like(p.value) for _, p in self.params],
        )

    def step(self) -> None:
        self.state.step_count += 1
        t = self.state.step_count
        b1, b2 = self.beta1, self.beta2
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
            m = self.state.first_moment[i]
            v = self.state.second_moment[i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def zero_grad(self) -> None:
        zero_grads([p for _, p in self.params])


class SGD:
    """Plain stochastic gradient descent."""

    def __init__(self, params, lr):
        self.params = _named_params(params)
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
            p.value -= self.lr * p.grad

    def zero_grad(self) -> None:
        zero_grads([p for _, p in self.params])


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    plist = _iter_params(params)
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in plist))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in plist:
            p.grad *= factor
    return total


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    per_param: dict
    failures: list
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failures


def _rel_err(a: float, b: float) -> float:
    # absolute floor so near-zero gradients are judged by absolute error
    denom = max(abs(a), abs(b), 1e-6)
    return abs(a - b) / denom


def grad_check(loss_fn, params, h=1e-6, tol=1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of `loss_fn()` to central differences.

    `loss_fn` must re-read the current `.value` of every parameter on each
    call and return a scalar Node. Entries failing `tol` are listed in the
    report; nothing is raised.
    """
    named = _named_params(params)
    zero_grads([p for _, p in named])
    loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in named}

    per_param = {}
    failures = []
    max_err = 0.0
    for name, p in named:
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(loss_fn().value)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(loss_fn().value)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            err = _rel_err(analytic[name].reshape(-1)[i], fd)
            if err > worst:
                worst = err
            if err > tol:
                failures.append((name, i, analytic[name].reshape(-1)[i], fd, err))
        per_param[name] = worst
        max_err = max(max_err, worst)
    return GradCheckReport(max_rel_err=max_err, per_param=per_param, failures=failures, tol=tol)


@dataclass
class LSTMParams:
    """Weight bundle for one LSTM cell: gates ordered (i, f, g, o)."""

    w_x: Node  # [4H, D]
    w_h: Node  # [4H, H]
    b: Node  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_h.value.shape[1]

    def nodes(self):
        return [self.w_x, self.w_h, self.b]

    @staticmethod
    def init(d_in: int, hidden: int, rng: np.random.Generator) -> "LSTMParams":
        bound = 1.0 / np.sqrt(hidden)
        w_x = parameter(rng.uniform(-bound, bound, size=(4 * hidden, d_in)), "lstm.w_x")
        w_h = parameter(rng.uniform(-bound, bound, size=(4 * hidden, hidden)), "lstm.w_h")
        b_val = np.zeros(4 * hidden)
        b_val[hidden : 2 * hidden] = 1.0  # forget-gate bias
        b = parameter(b_val, "lstm.b")
        return LSTMParams(w_x=w_x, w_h=w_h, b=b)


def lstm_cell(x: Node, h_prev: Node, c_prev: Node, params: LSTMParams):
    """One LSTM step; x is [B, D] (or [D]), states are [B, H] (or [H])."""
    hidden = params.hidden
    if x.value.shape[-1] != params.w_x.value.shape[1]:
        raise DimensionError(
            f"lstm_cell: input {x.value.shape} vs w_x {params.w_x.value.shape}"
        )
    if h_prev.value.shape[-1] != hidden:
        raise DimensionError(f"lstm_cell: state {h_prev.value.shape} vs H={hidden}")
    z = add(add(linear(x, params.w_x), linear(h_prev, params.w_h)), params.b)
    i = sigmoid(slice_cols(z, 0, hidden))
    f = sigmoid(slice_cols(z, hidden, 2 * hidden))
    g = tanh_act(slice_cols(z, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_cols(z, 3 * hidden, 4 * hidden))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh_act(c))
    return h, c
