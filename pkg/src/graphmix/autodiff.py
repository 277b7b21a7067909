"""Tape-based reverse-mode differentiation over numpy arrays.

The pipeline is a short static chain, so every operation records a forward
closure (for bit-exact replay) and a backward closure with its exact local
rule. The resolvent node caches the computed inverse and backpropagates with
two matrix multiplications, which the tape counts; the DAG scan node
backpropagates in reverse topological order without materializing the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg
from .errors import NoInverseNodeError, ShapeError, TapeEmptyError
from .graphs import DagPlan


class Var:
    """An array value on the tape."""

    __slots__ = ("data", "grad", "requires")

    def __init__(self, data, requires: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape


@dataclass
class _Node:
    out: Var
    inputs: tuple[Var, ...]
    forward: Callable[[], np.ndarray]
    backward: Callable[[np.ndarray], tuple]
    kind: str | None = None


@dataclass
class Tape:
    """Recorded forward pass plus a parameter registry."""

    _nodes: list[_Node] = field(default_factory=list)
    _params: dict[str, Var] = field(default_factory=dict)
    _watched: dict[str, Var] = field(default_factory=dict)
    resolvent_nodes: int = 0
    resolvent_backward_matmuls: int = 0

    def parameter(self, name: str, data: np.ndarray) -> Var:
        """Register (or re-fetch) a named parameter. Re-fetching returns the
        same Var so shared weights accumulate one gradient."""
        if name in self._params:
            return self._params[name]
        var = Var(data)
        self._params[name] = var
        return var

    def const(self, data) -> Var:
        return Var(data, requires=False)

    def watch(self, name: str, var: Var) -> Var:
        """Expose an intermediate (selectivities, adjacency weights, ...) in
        the gradient map."""
        self._watched[name] = var
        return var

    def record(self, out: Var, inputs: tuple[Var, ...], forward, backward,
               kind: str | None = None) -> Var:
        out.requires = any(v.requires for v in inputs)
        self._nodes.append(_Node(out, inputs, forward, backward, kind))
        if kind == "resolvent":
            self.resolvent_nodes += 1
        return out

    def backward(self, out: Var, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Accumulate gradients of `out` (seeded with dL/dout) into every
        registered parameter and watched intermediate."""
        if not self._nodes:
            raise TapeEmptyError("no operations recorded on the tape")
        for var in self._params.values():
            var.grad = None
        for var in self._watched.values():
            var.grad = None
        for node in self._nodes:
            node.out.grad = None
        self.resolvent_backward_matmuls = 0

        out.grad = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)
        if out.grad.shape != out.data.shape:
            raise ShapeError(f"seed shape {out.grad.shape} != output shape {out.data.shape}")

        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None or not node.out.requires:
                continue
            grads = node.backward(g)
            for var, gi in zip(node.inputs, grads):
                if gi is None or not var.requires:
                    continue
                var.grad = gi if var.grad is None else var.grad + gi

        result: dict[str, np.ndarray] = {}
        for name, var in self._params.items():
            result[name] = np.zeros_like(var.data) if var.grad is None else var.grad.copy()
        for name, var in self._watched.items():
            result[name] = np.zeros_like(var.data) if var.grad is None else var.grad.copy()
        return result

    def replay(self) -> bool:
        """Re-run every recorded forward closure and compare bit-for-bit."""
        if not self._nodes:
            raise TapeEmptyError("no operations recorded on the tape")
        return all(np.array_equal(node.forward(), node.out.data) for node in self._nodes)

    def backward_matmul_count(self) -> int:
        """T x T products spent in resolvent-node backward rules (2 per node)."""
        if self.resolvent_nodes == 0:
            raise NoInverseNodeError("tape holds no dense-resolvent node")
        return self.resolvent_backward_matmuls


def backward_matmul_count(tape: Tape) -> int:
    return tape.backward_matmul_count()


# ---------------------------------------------------------------- primitives


def _same_shape(a: Var, b: Var, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} shapes {a.data.shape} vs {b.data.shape}")


def add(tape: Tape, a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    out = Var(a.data + b.data)
    return tape.record(out, (a, b), lambda: a.data + b.data, lambda g: (g, g))


def sub(tape: Tape, a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    out = Var(a.data - b.data)
    return tape.record(out, (a, b), lambda: a.data - b.data, lambda g: (g, -g))


def mul(tape: Tape, a: Var, b: Var) -> Var:
    """Elementwise (Hadamard) product."""
    _same_shape(a, b, "mul")
    out = Var(a.data * b.data)
    return tape.record(out, (a, b), lambda: a.data * b.data,
                       lambda g: (g * b.data, g * a.data))


def cmul(tape: Tape, a: Var, c: float) -> Var:
    out = Var(a.data * c)
    return tape.record(out, (a,), lambda: a.data * c, lambda g: (g * c,))


def cadd(tape: Tape, a: Var, c: np.ndarray) -> Var:
    out = Var(a.data + c)
    return tape.record(out, (a,), lambda: a.data + c, lambda g: (g,))


def scale(tape: Tape, s: Var, a: Var) -> Var:
    """Scalar Var times tensor Var."""
    if s.data.shape != ():
        raise ShapeError(f"scale needs a scalar, got {s.data.shape}")
    out = Var(s.data * a.data)
    return tape.record(out, (s, a), lambda: s.data * a.data,
                       lambda g: (np.sum(g * a.data), g * float(s.data)))


def add_scalar(tape: Tape, a: Var, s: Var) -> Var:
    if s.data.shape != ():
        raise ShapeError(f"add_scalar needs a scalar, got {s.data.shape}")
    out = Var(a.data + s.data)
    return tape.record(out, (a, s), lambda: a.data + s.data,
                       lambda g: (g, np.sum(g)))


def add_rows(tape: Tape, a: Var, bias: Var) -> Var:
    """(T, D) + (D,) broadcast over rows."""
    if a.data.ndim != 2 or bias.data.shape != (a.data.shape[1],):
        raise ShapeError(f"add_rows shapes {a.data.shape} + {bias.data.shape}")
    out = Var(a.data + bias.data)
    return tape.record(out, (a, bias), lambda: a.data + bias.data,
                       lambda g: (g, g.sum(axis=0)))


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Var(a.data @ b.data)
    return tape.record(out, (a, b), lambda: a.data @ b.data,
                       lambda g: (g @ b.data.T, a.data.T @ g))


def matvec(tape: Tape, a: Var, w: Var) -> Var:
    if a.data.ndim != 2 or w.data.ndim != 1 or a.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"matvec shapes {a.data.shape} x {w.data.shape}")
    out = Var(a.data @ w.data)
    return tape.record(out, (a, w), lambda: a.data @ w.data,
                       lambda g: (np.outer(g, w.data), a.data.T @ g))


def transpose(tape: Tape, a: Var) -> Var:
    out = Var(a.data.T.copy())
    return tape.record(out, (a,), lambda: a.data.T.copy(), lambda g: (g.T,))


def exp(tape: Tape, a: Var) -> Var:
    val = np.exp(a.data)
    out = Var(val)
    return tape.record(out, (a,), lambda: np.exp(a.data), lambda g: (g * val,))


def neg(tape: Tape, a: Var) -> Var:
    out = Var(-a.data)
    return tape.record(out, (a,), lambda: -a.data, lambda g: (-g,))


def sqrt(tape: Tape, a: Var) -> Var:
    val = np.sqrt(a.data)
    out = Var(val)
    return tape.record(out, (a,), lambda: np.sqrt(a.data),
                       lambda g: (g * 0.5 / val,))


def reciprocal(tape: Tape, a: Var) -> Var:
    val = 1.0 / a.data
    out = Var(val)
    return tape.record(out, (a,), lambda: 1.0 / a.data,
                       lambda g: (-g * val * val,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(tape: Tape, a: Var) -> Var:
    val = _sigmoid(a.data)
    out = Var(val)
    return tape.record(out, (a,), lambda: _sigmoid(a.data),
                       lambda g: (g * val * (1.0 - val),))


def softplus(tape: Tape, a: Var) -> Var:
    """ln(1 + e^x), the positivity map for selectivities."""
    val = np.logaddexp(0.0, a.data)
    out = Var(val)
    return tape.record(out, (a,), lambda: np.logaddexp(0.0, a.data),
                       lambda g: (g * _sigmoid(a.data),))


def swish(tape: Tape, a: Var) -> Var:
    sig = _sigmoid(a.data)
    out = Var(a.data * sig)
    return tape.record(out, (a,), lambda: a.data * _sigmoid(a.data),
                       lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def sum_all(tape: Tape, a: Var) -> Var:
    out = Var(np.sum(a.data))
    return tape.record(out, (a,), lambda: np.sum(a.data),
                       lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def sum_axis(tape: Tape, a: Var, axis: int) -> Var:
    out = Var(a.data.sum(axis=axis))
    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis),)
    return tape.record(out, (a,), lambda: a.data.sum(axis=axis), backward)


def gather(tape: Tape, a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    out = Var(a.data[idx])
    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)
    return tape.record(out, (a,), lambda: a.data[idx], backward)


def scatter_add(tape: Tape, vals: Var, idx: np.ndarray, size: int) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    def forward():
        acc = np.zeros(size)
        np.add.at(acc, idx, vals.data)
        return acc
    out = Var(forward())
    return tape.record(out, (vals,), forward, lambda g: (g[idx],))


def scatter_matrix(tape: Tape, vals: Var, rows: np.ndarray, cols: np.ndarray, n: int) -> Var:
    """Dense (n, n) matrix with A[rows[k], cols[k]] = vals[k]; entries are
    unique (no multigraphs), so plain assignment is exact."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    def forward():
        a = np.zeros((n, n))
        a[rows, cols] = vals.data
        return a
    out = Var(forward())
    return tape.record(out, (vals,), forward, lambda g: (g[rows, cols],))


def row_scale(tape: Tape, a: Var, s: Var) -> Var:
    """Scale row i of a (T, D) matrix by s[i]."""
    if a.data.ndim != 2 or s.data.shape != (a.data.shape[0],):
        raise ShapeError(f"row_scale shapes {a.data.shape} by {s.data.shape}")
    out = Var(a.data * s.data[:, None])
    return tape.record(out, (a, s), lambda: a.data * s.data[:, None],
                       lambda g: (g * s.data[:, None], (g * a.data).sum(axis=1)))


def clamp_max(tape: Tape, a: Var, cap: float) -> Var:
    """min(a, cap); at the boundary the derivative is taken from the
    unclamped side."""
    mask = a.data <= cap
    out = Var(np.minimum(a.data, cap))
    return tape.record(out, (a,), lambda: np.minimum(a.data, cap),
                       lambda g: (g * mask,))


def clamp_min(tape: Tape, a: Var, floor: float) -> Var:
    mask = a.data >= floor
    out = Var(np.maximum(a.data, floor))
    return tape.record(out, (a,), lambda: np.maximum(a.data, floor),
                       lambda g: (g * mask,))


def slice_cols(tape: Tape, a: Var, lo: int, hi: int) -> Var:
    out = Var(a.data[:, lo:hi].copy())
    def backward(g):
        acc = np.zeros_like(a.data)
        acc[:, lo:hi] = g
        return (acc,)
    return tape.record(out, (a,), lambda: a.data[:, lo:hi].copy(), backward)


def concat_cols(tape: Tape, parts: list[Var]) -> Var:
    widths = [p.data.shape[1] for p in parts]
    out = Var(np.concatenate([p.data for p in parts], axis=1))
    def backward(g):
        grads = []
        lo = 0
        for w in widths:
            grads.append(g[:, lo:lo + w])
            lo += w
        return tuple(grads)
    return tape.record(out, tuple(parts),
                       lambda: np.concatenate([p.data for p in parts], axis=1),
                       backward)


def layernorm(tape: Tape, x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Row-wise mean/variance normalization with learned scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm expects (T, D), got {x.data.shape}")
    def stats(data):
        mu = data.mean(axis=1, keepdims=True)
        xc = data - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return xc, inv
    xc, inv = stats(x.data)
    xhat = xc * inv
    out = Var(xhat * gain.data + bias.data)

    def forward():
        c, i = stats(x.data)
        return c * i * gain.data + bias.data

    def backward(g):
        d = x.data.shape[1]
        gx = g * gain.data
        dot1 = gx.mean(axis=1, keepdims=True)
        dot2 = (gx * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gx - dot1 - xhat * dot2)
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return tape.record(out, (x, gain, bias), forward, backward)


def softmax_cross_entropy(tape: Tape, logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    def ce(data):
        shifted = data - data.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        return -logp[np.arange(len(labels)), labels].mean()
    out = Var(ce(logits.data))

    def backward(g):
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        return (float(g) * p / len(labels),)

    return tape.record(out, (logits,), lambda: ce(logits.data), backward)


# ------------------------------------------------------------ fused operators


def resolvent(tape: Tape, a: Var) -> Var:
    """L = (I - A)^(-1). The inverse is cached for the backward rule
    G_A = L^T G_L L^T, exactly two extra matrix products."""
    n = a.data.shape[0]
    lmat = linalg.inverse(np.eye(n) - a.data)
    out = Var(lmat)

    def backward(g):
        tape.resolvent_backward_matmuls += 2
        tmp = lmat.T @ g
        return (tmp @ lmat.T,)

    return tape.record(out, (a,),
                       lambda: linalg.inverse(np.eye(n) - a.data),
                       backward, kind="resolvent")


def scan_forward(plan: DagPlan, arc_w: np.ndarray, bbar: np.ndarray,
                 values: np.ndarray, cmat: np.ndarray):
    """One pass over the DAG in topological order.

    h_i = sum_{j in p(i)} w_ij h_j + bbar_i v_i^T, y_i = c_i^T h_i, with all
    channels of `values` carried simultaneously (state d x D per node).
    Cost O((V + E) d D).
    """
    t = plan.num_nodes
    d = bbar.shape[1]
    dim = values.shape[1]
    dtype = arc_w.dtype if arc_w.size else values.dtype
    h = np.empty((t, d, dim), dtype=dtype)
    y = np.empty((t, dim), dtype=dtype)
    arcs = plan.arcs
    # One upfront injection product plus in-place accumulation through a
    # scratch buffer keeps the per-node cost allocation-free.
    np.multiply(bbar[:, :, None], values[:, None, :], out=h)
    scratch = np.empty((d, dim), dtype=dtype)
    for i in plan.topo_order:
        acc = h[i]
        for arc in plan.in_arcs[i]:
            np.multiply(h[arcs[arc][0]], arc_w[arc], out=scratch)
            acc += scratch
        y[i] = cmat[i] @ acc
    return y, h


def dag_scan(tape: Tape, plan: DagPlan, arc_w: Var, bbar: Var, values: Var,
             cmat: Var) -> tuple[Var, np.ndarray]:
    """Taped DAG recurrence; returns (Y, hidden states). The backward pass
    walks the topological order in reverse and never materializes the mask."""
    y_data, h = scan_forward(plan, arc_w.data, bbar.data, values.data, cmat.data)
    out = Var(y_data)

    def forward():
        y2, _ = scan_forward(plan, arc_w.data, bbar.data, values.data, cmat.data)
        return y2

    def backward(gy):
        t = plan.num_nodes
        arcs = plan.arcs
        g_h = np.zeros_like(h)
        g_w = np.zeros_like(arc_w.data)
        g_b = np.zeros_like(bbar.data)
        g_v = np.zeros_like(values.data)
        g_c = np.zeros_like(cmat.data)
        for i in range(t):
            g_c[i] = h[i] @ gy[i]
            g_h[i] = np.outer(cmat.data[i], gy[i])
        for i in reversed(plan.topo_order):
            g = g_h[i]
            g_b[i] = g @ values.data[i]
            g_v[i] = bbar.data[i] @ g
            for arc in plan.in_arcs[i]:
                j = arcs[arc][0]
                g_w[arc] = float(np.sum(h[j] * g))
                g_h[j] += arc_w.data[arc] * g
        return (g_w, g_b, g_v, g_c)

    tape.record(out, (arc_w, bbar, values, cmat), forward, backward, kind="dag-scan")
    return out, h


# ------------------------------------------------------------------- oracles


def finite_difference_oracle(fn, params: dict[str, np.ndarray],
                             eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences (f(x+eps) - f(x-eps)) / 2eps per coordinate of a
    scalar loss. `fn` must re-read the arrays on every call."""
    grads: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + eps
            hi = fn(params)
            flat[k] = saved - eps
            lo = fn(params)
            flat[k] = saved
            gflat[k] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads
