"""A small static-graph reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built once and can be re-evaluated with new leaf bindings::

    g = Graph()
    x = g.leaf("x", trainable=True)
    loss = g.sum_squares(x)
    g.forward({"x": np.arange(3.0)})
    g.backward(loss)["x"]  # -> array([0., 2., 4.])

Image-like tensors are laid out ``(batch, channel, row, col)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Parameters = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node: int, op: str):
        super().__init__(f"non-finite value produced at node {node} ({op})")
        self.node = node
        self.op = op


@dataclass
class Node:
    op: str
    parents: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    trainable: bool = False
    value: np.ndarray | None = None
    cache: object = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- op kernels: forward(node, *inputs) -> (value, cache); backward(node, g, cache, *inputs) -> grads

def _add_fwd(node, a, b):
    return a + b, None


def _add_bwd(node, g, cache, a, b):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


def _mul_fwd(node, a, b):
    return a * b, None


def _mul_bwd(node, g, cache, a, b):
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _scale_fwd(node, a):
    return node.attrs["c"] * a, None


def _scale_bwd(node, g, cache, a):
    return (node.attrs["c"] * g,)


def _concat_fwd(node, *xs):
    return np.concatenate(xs, axis=node.attrs["axis"]), None


def _concat_bwd(node, g, cache, *xs):
    bounds = np.cumsum([x.shape[node.attrs["axis"]] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=node.attrs["axis"]))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    B, C, H, W = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def _conv_fwd(node, x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with filter {w.shape}")
    B, C, H, W = x.shape
    cols = _im2col(x, w.shape[2])
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(B, H, W, -1).transpose(0, 3, 1, 2), cols


def _conv_bwd(node, g, cols, x, w):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (g2.T @ cols).reshape(w.shape)
    # the input gradient is a 'same' convolution of g with the spatially flipped, transposed filter
    w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
    dx = _im2col(g, k) @ w_rot.T
    return dx.reshape(B, H, W, C).transpose(0, 3, 1, 2), dw


def _cmax_fwd(node, x):
    idx = x.argmax(axis=1)[:, None]
    return np.take_along_axis(x, idx, axis=1), idx


def _cmax_bwd(node, g, idx, x):
    dx = np.zeros_like(x)
    np.put_along_axis(dx, idx, g, axis=1)
    return (dx,)


def _lse_fwd(node, x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return m + np.log(s), e / s


def _lse_bwd(node, g, soft, x):
    return (soft * g,)


def _xent_fwd(node, logits, target):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(target * logp).sum(axis=1), logp


def _xent_bwd(node, g, logp, logits, target):
    g = g[:, None]
    dlogits = (np.exp(logp) * target.sum(axis=1, keepdims=True) - target) * g
    return dlogits, -logp * g


def _mmean_fwd(node, x, mask):
    axes = tuple(range(1, x.ndim))
    counts = mask.sum(axis=axes)
    if np.any(counts == 0):
        raise ShapeError("masked_mean: an entry has an empty mask")
    per_entry = (x * mask).sum(axis=axes) / counts
    return np.asarray(per_entry.mean()), counts


def _mmean_bwd(node, g, counts, x, mask):
    shape = (-1,) + (1,) * (x.ndim - 1)
    return g * mask / counts.reshape(shape) / x.shape[0], None


def _sumsq_fwd(node, x):
    return np.asarray((x * x).sum()), None


def _sumsq_bwd(node, g, cache, x):
    return (2.0 * x * g,)


def _expect_fwd(node, probs, values):
    if probs.ndim != 5 or probs.shape[0] != values.shape[0] or probs.shape[2] != values.shape[1]:
        raise ShapeError(f"expect: probs {probs.shape} incompatible with values {values.shape}")
    return np.einsum("badhw,bdhw->bahw", probs, values), None


def _expect_bwd(node, g, cache, probs, values):
    return (np.einsum("bahw,bdhw->badhw", g, values),
            np.einsum("badhw,bahw->bdhw", probs, g))


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "channel_max": (_cmax_fwd, _cmax_bwd),
    "channel_logsumexp": (_lse_fwd, _lse_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
    "masked_mean": (_mmean_fwd, _mmean_bwd),
    "sum_squares": (_sumsq_fwd, _sumsq_bwd),
    "expect": (_expect_fwd, _expect_bwd),
}


class Graph:
    """Topologically ordered list of nodes; a node's parents always precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self._evaluated = False

    # --- construction

    def leaf(self, name: str, value=None, trainable: bool = False) -> int:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = Node("leaf", name=name, trainable=trainable,
                    value=None if value is None else np.asarray(value, dtype=float))
        self.nodes.append(node)
        self.leaves[name] = len(self.nodes) - 1
        return self.leaves[name]

    def _op(self, op: str, *parents: int, **attrs) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ValueError(f"unknown parent node {p}")
        self.nodes.append(Node(op, tuple(parents), attrs))
        return len(self.nodes) - 1

    def add(self, a, b):
        return self._op("add", a, b)

    def mul(self, a, b):
        return self._op("mul", a, b)

    def scale(self, a, c: float):
        return self._op("scale", a, c=float(c))

    def concat(self, *xs, axis: int = 1):
        return self._op("concat", *xs, axis=axis)

    def conv2d(self, x, w):
        """Zero-padded 'same' correlation, stride 1, odd square filters ``(out, in, k, k)``."""
        return self._op("conv2d", x, w)

    def channel_max(self, x):
        return self._op("channel_max", x)

    def channel_logsumexp(self, x):
        return self._op("channel_logsumexp", x)

    def softmax_xent(self, logits, target):
        """Per-position cross-entropy of ``softmax(logits)`` against ``target`` over axis 1."""
        return self._op("softmax_xent", logits, target)

    def masked_mean(self, x, mask):
        """Mean over masked positions within each batch entry, then over entries."""
        return self._op("masked_mean", x, mask)

    def sum_squares(self, x):
        return self._op("sum_squares", x)

    def expect(self, probs, values):
        """``out[b,a] = sum_d probs[b,a,d] * values[b,d]`` (per position)."""
        return self._op("expect", probs, values)

    # --- evaluation

    def forward(self, bindings: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        bindings = bindings or {}
        unknown = set(bindings) - set(self.leaves)
        if unknown:
            raise KeyError(f"no such leaves: {sorted(unknown)}")
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                if node.name in bindings:
                    node.value = np.asarray(bindings[node.name], dtype=float)
                elif node.value is None:
                    raise ValueError(f"leaf {node.name!r} is unbound")
                continue
            fwd, _ = OPS[node.op]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    node.value, node.cache = fwd(node, *(self.nodes[p].value for p in node.parents))
            except ValueError as exc:
                raise ShapeError(f"node {i} ({node.op}): {exc}") from exc
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(i, node.op)
        self._evaluated = True
        return [n.value for n in self.nodes]

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def backward(self, loss: int, wrt=None) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` node for each trainable leaf (or ``wrt`` names)."""
        if not self._evaluated:
            raise RuntimeError("forward has not been run")
        if np.size(self.nodes[loss].value) != 1:
            raise ValueError("loss node is not scalar")
        if wrt is None:
            targets = {i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.trainable}
        else:
            targets = {self.leaves[name] for name in wrt}
        needs = [False] * len(self.nodes)
        for i, node in enumerate(self.nodes[:loss + 1]):
            needs[i] = i in targets or any(needs[p] for p in node.parents)
        grads: dict[int, np.ndarray] = {loss: np.ones_like(self.nodes[loss].value)}
        for i in range(loss, -1, -1):
            node = self.nodes[i]
            g = grads.pop(i, None) if node.op != "leaf" else None
            if g is None or not needs[i]:
                continue
            _, bwd = OPS[node.op]
            parent_vals = [self.nodes[p].value for p in node.parents]
            for p, pg in zip(node.parents, bwd(node, g, node.cache, *parent_vals)):
                if pg is None or not needs[p]:
                    continue
                grads[p] = grads[p] + pg if p in grads else pg
        out = {}
        for i in sorted(targets):
            node = self.nodes[i]
            out[node.name] = grads.get(i, np.zeros_like(node.value))
        return out


def forward(graph: Graph, bindings: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
    return graph.forward(bindings)


def backward(graph: Graph, loss: int, wrt=None) -> dict[str, np.ndarray]:
    return graph.backward(loss, wrt)


def grad_check(graph: Graph, leaf: str, loss: int, epsilon: float = 1e-5,
               bindings: dict[str, np.ndarray] | None = None, max_coords: int = 1000,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of one leaf against central differences.

    Returns ``max_i |analytic_i - numeric_i| / max_i |numeric_i|``, i.e. the
    worst absolute error relative to the gradient's scale.  Leaves with more
    than ``max_coords`` entries are checked on a random subsample.
    """
    bindings = dict(bindings or {})
    base = np.array(bindings.get(leaf, graph.nodes[graph.leaves[leaf]].value), dtype=float)
    bindings[leaf] = base
    graph.forward(bindings)
    analytic = graph.backward(loss, wrt=[leaf])[leaf].ravel()
    coords = np.arange(base.size)
    if base.size > max_coords:
        coords = np.random.default_rng(seed).choice(base.size, max_coords, replace=False)
    numeric = np.zeros(len(coords))
    for n, i in enumerate(coords):
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe.ravel()[i] += sign * epsilon
            bindings[leaf] = probe
            vals.append(float(graph.forward(bindings)[loss]))
        numeric[n] = (vals[0] - vals[1]) / (2 * epsilon)
    bindings[leaf] = base
    graph.forward(bindings)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic[coords] - numeric).max() / scale)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: Parameters, grads: dict[str, np.ndarray],
              state: OptimState) -> tuple[Parameters, OptimState]:
    """One bias-corrected Adam update of the parameters named in ``grads``.

    Inputs are not modified.  Step counts are kept per parameter so that
    parameters updated on different schedules each get correct bias correction.
    """
    new_params = dict(params)
    m, v, t = dict(state.m), dict(state.v), dict(state.t)
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, expected {np.shape(p)}")
        step = t.get(name, 0) + 1
        m[name] = state.beta1 * m.get(name, 0.0) + (1 - state.beta1) * g
        v[name] = state.beta2 * v.get(name, 0.0) + (1 - state.beta2) * g * g
        m_hat = m[name] / (1 - state.beta1 ** step)
        v_hat = v[name] / (1 - state.beta2 ** step)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        t[name] = step
    return new_params, OptimState(state.lr, state.beta1, state.beta2, state.eps, m, v, t)


def save_parameters(params: Parameters, path: str | Path) -> None:
    payload = {k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=float).ravel().tolist()}
               for k, v in params.items()}
    Path(path).write_text(json.dumps(payload))


def load_parameters(path: str | Path) -> Parameters:
    payload = json.loads(Path(path).read_text())
    return {k: np.array(d["values"], dtype=float).reshape(d["shape"]) for k, d in payload.items()}
