"""Minimal dense numerics: float64 tensors, reverse-mode autodiff over a
dynamically recorded operation graph, parameter storage with Adam, and a
finite-difference gradient checker.

The graph is recorded eagerly: every operation appends an ``OpNode`` linking
input tensors to output tensors, and :func:`backward` walks the nodes in
reverse topological order. Recording is skipped inside :func:`no_grad` or
when no input requires gradients, so inference runs tape-free.

Besides the basic primitives (matmul, add, mul, tanh, sigmoid, relu,
softmax, concat, stack/unbind, mean, embedding lookup, cross-entropy,
squared error) there are two fused recurrent-network nodes, ``lstm_step``
and ``attend``, that collapse the per-timestep elementwise chains into one
node each; both are covered by the same finite-difference checks as the
basic primitives.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

__all__ = [
    "Tensor",
    "OpNode",
    "no_grad",
    "backward",
    "topo_nodes",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "mean",
    "concat",
    "stack",
    "unbind",
    "reshape",
    "embedding",
    "gather_rows",
    "lstm_step",
    "attend",
    "linear",
    "lstm_sequence",
    "attn_lstm_sequence",
    "transpose_01",
    "cross_entropy",
    "squared_error",
    "ParamStore",
    "init_params",
    "adam_step",
    "clip_global_norm",
    "grad_check",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("value", "requires_grad", "grad", "node", "out_index")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None  # creator, None for leaves
        self.out_index = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class OpNode:
    """One recorded primitive: inputs, outputs, and the backward rule."""

    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn):
        self.op = op
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        self.backward_fn = backward_fn  # list of output grads -> list of input grads
        for i, out in enumerate(self.outputs):
            out.node = self
            out.out_index = i


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _record(op: str, inputs: Sequence[Tensor], out_values, backward_fn) -> Tensor | tuple[Tensor, ...]:
    single = not isinstance(out_values, (tuple, list))
    values = (out_values,) if single else tuple(out_values)
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(v, requires_grad=track) for v in values)
    if track:
        OpNode(op, inputs, outs, backward_fn)
    return outs[0] if single else outs


def topo_nodes(loss: Tensor) -> list[OpNode]:
    """Operation nodes reachable from ``loss``, topologically ordered
    (every node's inputs are produced by earlier nodes)."""
    order: list[OpNode] = []
    seen: set[int] = set()
    if loss.node is None:
        return order
    stack: list[tuple[OpNode, int]] = [(loss.node, 0)]
    seen.add(id(loss.node))
    while stack:
        node, child_idx = stack[-1]
        advanced = False
        for i in range(child_idx, len(node.inputs)):
            child = node.inputs[i].node
            if child is not None and id(child) not in seen:
                seen.add(id(child))
                stack[-1] = (node, i + 1)
                stack.append((child, 0))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into ``.grad`` of every
    tensor that requires them."""
    if loss.value.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients (created under no_grad?)")
    loss.grad = np.ones((), dtype=DTYPE)
    owned: set[int] = set()
    for node in reversed(topo_nodes(loss)):
        out_grads = [o.grad for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        in_grads = node.backward_fn(out_grads)
        for tensor, g in zip(node.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = g
            elif id(tensor) in owned:
                tensor.grad += g
            else:
                # first accumulation: the stored grad may be a view returned
                # by some backward rule, so add out of place once
                tensor.grad = tensor.grad + g
                owned.add(id(tensor))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value

    def bw(gs):
        g = gs[0]
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value - b.value

    def bw(gs):
        g = gs[0]
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _record("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value * b.value

    def bw(gs):
        g = gs[0]
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _record("mul", (a, b), out, bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.value * s

    def bw(gs):
        return (gs[0] * s,)

    return _record("scale", (a,), out, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value @ b.value

    def bw(gs):
        g = gs[0]
        return (g @ b.value.T, a.value.T @ g)

    return _record("matmul", (a, b), out, bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def bw(gs):
        return (gs[0] * (1.0 - y * y),)

    return _record("tanh", (x,), y, bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)

    def bw(gs):
        return (gs[0] * y * (1.0 - y),)

    return _record("sigmoid", (x,), y, bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.value, 0.0)

    def bw(gs):
        return (gs[0] * (x.value > 0.0),)

    return _record("relu", (x,), y, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(v)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(gs):
        g = gs[0]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, bw)


def mean(x: Tensor, axis: int) -> Tensor:
    out = x.value.mean(axis=axis)
    n = x.value.shape[axis]

    def bw(gs):
        g = np.expand_dims(gs[0] / n, axis)
        return (np.broadcast_to(g, x.value.shape),)

    return _record("mean", (x,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bw(gs):
        g = gs[0]
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(values)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return _record("concat", tuple(tensors), out, bw)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([t.value for t in tensors], axis=axis)

    def bw(gs):
        g = np.moveaxis(gs[0], axis, 0)
        return [g[i] for i in range(len(tensors))]

    return _record("stack", tuple(tensors), out, bw)


def unbind(x: Tensor, axis: int = 1) -> tuple[Tensor, ...]:
    moved = np.moveaxis(x.value, axis, 0)
    outs = [np.ascontiguousarray(moved[i]) for i in range(moved.shape[0])]

    def bw(gs):
        parts = [
            g if g is not None else np.zeros(outs[i].shape, dtype=DTYPE)
            for i, g in enumerate(gs)
        ]
        return (np.moveaxis(np.stack(parts, axis=0), 0, axis),)

    return _record("unbind", (x,), outs, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.value.reshape(shape)

    def bw(gs):
        return (gs[0].reshape(x.value.shape),)

    return _record("reshape", (x,), out, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.value[ids]

    def bw(gs):
        g = np.zeros(table.value.shape, dtype=DTYPE)
        np.add.at(g, ids.ravel(), gs[0].reshape(-1, table.value.shape[1]))
        return (g,)

    return _record("embedding", (table,), out, bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    out = x.value[idx]

    def bw(gs):
        g = np.zeros(x.value.shape, dtype=DTYPE)
        np.add.at(g, idx, gs[0])
        return (g,)

    return _record("gather_rows", (x,), out, bw)


def lstm_step(gates: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM cell. ``gates`` is the (N, 4H) pre-activation, slices
    ordered [input, forget, candidate, output]; returns (h, c)."""
    g = gates.value
    hdim = g.shape[1] // 4
    i = _sigmoid(g[:, :hdim])
    f = _sigmoid(g[:, hdim : 2 * hdim])
    cand = np.tanh(g[:, 2 * hdim : 3 * hdim])
    o = _sigmoid(g[:, 3 * hdim :])
    c = f * c_prev.value + i * cand
    tc = np.tanh(c)
    h = o * tc

    def bw(gs):
        dh, dc_out = gs
        if dh is None:
            dh = np.zeros(h.shape, dtype=DTYPE)
        dc = dc_out if dc_out is not None else np.zeros(c.shape, dtype=DTYPE)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dgates = np.empty_like(g)
        di = dc * cand
        df = dc * c_prev.value
        dcand = dc * i
        dgates[:, :hdim] = di * i * (1.0 - i)
        dgates[:, hdim : 2 * hdim] = df * f * (1.0 - f)
        dgates[:, 2 * hdim : 3 * hdim] = dcand * (1.0 - cand * cand)
        dgates[:, 3 * hdim :] = do * o * (1.0 - o)
        return (dgates, dc * f)

    return _record("lstm_step", (gates, c_prev), (h, c), bw)


def attend(query: Tensor, memory: Tensor) -> Tensor:
    """Fused scaled dot-product attention: softmax(memory . query / sqrt(H))
    weighted sum over the memory axis. query (N, H), memory (N, T, H)."""
    q = query.value
    m = memory.value
    inv = 1.0 / np.sqrt(q.shape[1])
    scores = (m @ q[:, :, None])[:, :, 0] * inv
    s = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=1, keepdims=True)
    ctx = (a[:, None, :] @ m)[:, 0, :]

    def bw(gs):
        dctx = gs[0]
        da = (m @ dctx[:, :, None])[:, :, 0]
        ds = a * (da - (da * a).sum(axis=1, keepdims=True))
        dq = (ds[:, None, :] @ m)[:, 0, :] * inv
        dm = a[:, :, None] * dctx[:, None, :] + ds[:, :, None] * (q[:, None, :] * inv)
        return (dq, dm)

    return _record("attend", (query, memory), ctx, bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for 2-D x."""
    out = x.value @ w.value
    out += b.value

    def bw(gs):
        g = gs[0]
        return (g @ w.value.T, x.value.T @ g, g.sum(axis=0))

    return _record("linear", (x, w, b), out, bw)


# Gate layout used by the fused sequence ops: [input, forget, output | cell
# candidate], so one sigmoid covers the first three gate blocks and one tanh
# the last.


def _activate_gates(g: np.ndarray, hdim: int) -> None:
    sig = g[:, : 3 * hdim]
    np.negative(sig, out=sig)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    np.tanh(g[:, 3 * hdim :], out=g[:, 3 * hdim :])


def _lstm_forward_buffers(xm: np.ndarray, w_hh: np.ndarray, h0: np.ndarray):
    """Shared unrolled-LSTM forward: returns time-major buffers of activated
    gates, cell states, tanh(cell), and hidden states."""
    length, n, h4 = xm.shape
    hdim = h4 // 4
    gates = np.empty((length, n, h4))
    cells = np.empty((length, n, hdim))
    tcs = np.empty((length, n, hdim))
    hidden = np.empty((length, n, hdim))
    h = h0
    c = np.zeros((n, hdim))
    tmp = np.empty((n, hdim))
    with np.errstate(over="ignore"):
        for t in range(length):
            g = gates[t]
            np.dot(h, w_hh, out=g)
            g += xm[t]
            _activate_gates(g, hdim)
            np.multiply(g[:, hdim : 2 * hdim], c, out=cells[t])
            np.multiply(g[:, :hdim], g[:, 3 * hdim :], out=tmp)
            cells[t] += tmp
            c = cells[t]
            np.tanh(c, out=tcs[t])
            np.multiply(g[:, 2 * hdim : 3 * hdim], tcs[t], out=hidden[t])
            h = hidden[t]
    return gates, cells, tcs, hidden


def _lstm_backward_loop(
    dhidden_tm: np.ndarray,
    gates: np.ndarray,
    cells: np.ndarray,
    tcs: np.ndarray,
    hidden: np.ndarray,
    w_hh: np.ndarray,
    h0: np.ndarray,
):
    """Reverse pass of the unrolled LSTM given per-step hidden-state grads
    (time-major). Returns (dx/dgates (T, N, 4H), dw_hh, dh0)."""
    length, n, hdim = hidden.shape
    h4 = 4 * hdim
    dgates = np.empty((length, n, h4))
    w_hh_t = np.ascontiguousarray(w_hh.T)
    dh = np.empty((n, hdim))
    dc = np.zeros((n, hdim))
    dct = np.empty((n, hdim))
    s1 = np.empty((n, hdim))
    zeros = np.zeros((n, hdim))
    dh[...] = dhidden_tm[length - 1]
    for t in range(length - 1, -1, -1):
        g = gates[t]
        i = g[:, :hdim]
        f = g[:, hdim : 2 * hdim]
        o = g[:, 2 * hdim : 3 * hdim]
        cand = g[:, 3 * hdim :]
        tc = tcs[t]
        c_prev = cells[t - 1] if t > 0 else zeros
        dg = dgates[t]
        # dct = dc + dh*o*(1 - tc^2)
        np.multiply(tc, tc, out=dct)
        np.subtract(1.0, dct, out=dct)
        dct *= o
        dct *= dh
        dct += dc
        # output gate slice: dh*tc * o*(1-o)
        np.subtract(1.0, o, out=s1)
        s1 *= o
        s1 *= tc
        np.multiply(s1, dh, out=dg[:, 2 * hdim : 3 * hdim])
        # input gate slice: dct*cand * i*(1-i)
        np.subtract(1.0, i, out=s1)
        s1 *= i
        s1 *= cand
        np.multiply(s1, dct, out=dg[:, :hdim])
        # forget gate slice: dct*c_prev * f*(1-f)
        np.subtract(1.0, f, out=s1)
        s1 *= f
        s1 *= c_prev
        np.multiply(s1, dct, out=dg[:, hdim : 2 * hdim])
        # candidate slice: dct*i*(1-cand^2)
        np.multiply(cand, cand, out=s1)
        np.subtract(1.0, s1, out=s1)
        s1 *= i
        np.multiply(s1, dct, out=dg[:, 3 * hdim :])
        # carry to previous step
        np.multiply(dct, f, out=dc)
        if t > 0:
            np.dot(dg, w_hh_t, out=dh)
            dh += dhidden_tm[t - 1]
    dh0 = dgates[0] @ w_hh_t
    flat = length * n
    h_prev = np.concatenate([h0[None], hidden[:-1]], axis=0)
    dw_hh = h_prev.reshape(flat, hdim).T @ dgates.reshape(flat, h4)
    return dgates, dw_hh, dh0


def lstm_sequence(x_proj: Tensor, w_hh: Tensor, h0: Tensor) -> Tensor:
    """Unrolled single-layer LSTM over a time-major (T, N, 4H) pre-projected
    input (input projection and bias already applied); returns the (T, N, H)
    hidden states. One fused graph node covers the full unroll."""
    length, n, h4 = x_proj.value.shape
    gates, cells, tcs, hidden = _lstm_forward_buffers(x_proj.value, w_hh.value, h0.value)

    def bw(gs):
        return _lstm_backward_loop(gs[0], gates, cells, tcs, hidden, w_hh.value, h0.value)

    return _record("lstm_sequence", (x_proj, w_hh, h0), hidden, bw)


def attn_lstm_sequence(
    x_proj: Tensor, w_hh: Tensor, w_att: Tensor, memory: Tensor, h0: Tensor
) -> Tensor:
    """Unrolled decoder core: LSTM recurrence plus scaled dot-product
    attention of every hidden state over ``memory`` (N, Tm, H). Returns
    time-major (T, N, 2H) rows [h_t ; context_t]; output layers apply
    outside, batched over all positions. The context does not feed back into
    the recurrence, so attention is computed batched over all steps."""
    length, n, h4 = x_proj.value.shape
    hdim = h4 // 4
    mem = memory.value
    inv = 1.0 / np.sqrt(hdim)
    gates, cells, tcs, hidden = _lstm_forward_buffers(x_proj.value, w_hh.value, h0.value)
    flat = length * n
    queries = (hidden.reshape(flat, hdim) @ w_att.value).reshape(length, n, hdim)
    # (N, T, Tm) attention weights
    scores = np.matmul(queries.transpose(1, 0, 2), mem.transpose(0, 2, 1))
    scores *= inv
    scores -= scores.max(axis=2, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=2, keepdims=True)
    ctx = np.matmul(scores, mem)  # (N, T, H)
    out = np.empty((length, n, 2 * hdim))
    out[:, :, :hdim] = hidden
    out[:, :, hdim:] = ctx.transpose(1, 0, 2)

    def bw(gs):
        dout = gs[0]  # (T, N, 2H)
        dctx = np.ascontiguousarray(dout[:, :, hdim:].transpose(1, 0, 2))  # (N, T, H)
        da = np.matmul(dctx, mem.transpose(0, 2, 1))  # (N, T, Tm)
        ds = scores * (da - (da * scores).sum(axis=2, keepdims=True))
        ds *= inv
        dq = np.matmul(ds, mem)  # (N, T, H)
        dmem = np.matmul(scores.transpose(0, 2, 1), dctx)
        dmem += np.matmul(ds.transpose(0, 2, 1), queries.transpose(1, 0, 2))
        dq_tm = np.ascontiguousarray(dq.transpose(1, 0, 2))
        dw_att = hidden.reshape(flat, hdim).T @ dq_tm.reshape(flat, hdim)
        dhidden = dout[:, :, :hdim] + (dq_tm.reshape(flat, hdim) @ w_att.value.T).reshape(
            length, n, hdim
        )
        dx, dw_hh, dh0 = _lstm_backward_loop(
            dhidden, gates, cells, tcs, hidden, w_hh.value, h0.value
        )
        return (dx, dw_hh, dw_att, dmem, dh0)

    return _record("attn_lstm_sequence", (x_proj, w_hh, w_att, memory, h0), out, bw)


def transpose_01(x: Tensor) -> Tensor:
    """Swap the first two axes (time-major <-> batch-major), contiguous."""
    out = np.ascontiguousarray(x.value.transpose(1, 0, 2))

    def bw(gs):
        return (np.ascontiguousarray(gs[0].transpose(1, 0, 2)),)

    return _record("transpose_01", (x,), out, bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Token-level cross-entropy, summed over all positions. ``logits`` has
    shape (..., V), integer ``targets`` the matching leading shape. Entries
    masked to -inf get probability zero and zero gradient."""
    vocab = logits.value.shape[-1]
    flat = logits.value.reshape(-1, vocab)
    tgt = np.asarray(targets).reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    rows = np.arange(flat.shape[0])
    out = np.asarray((lse - flat[rows, tgt]).sum())

    def bw(gs):
        g = probs * gs[0]
        g[rows, tgt] -= gs[0]
        return (g.reshape(logits.value.shape),)

    return _record("cross_entropy", (logits,), out, bw)


def squared_error(pred: Tensor, target) -> Tensor:
    """Sum of squared differences; ``target`` may be a tensor or constant."""
    target = _as_tensor(target)
    diff = pred.value - target.value
    out = np.asarray((diff * diff).sum())

    def bw(gs):
        g = 2.0 * diff * gs[0]
        return (g, -g)

    return _record("squared_error", (pred, target), out, bw)


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named float64 parameters plus per-parameter Adam state."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def register(self, path: str, value: np.ndarray) -> None:
        if path in self.params:
            raise ValueError(f"parameter {path!r} already registered")
        value = np.asarray(value, dtype=DTYPE)
        self.params[path] = value
        self._m[path] = np.zeros_like(value)
        self._v[path] = np.zeros_like(value)
        self._step[path] = 0

    def paths(self) -> list[str]:
        return sorted(self.params)

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {p: Tensor(v, requires_grad=requires_grad) for p, v in self.params.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())

    def assert_finite(self) -> None:
        for path in self.paths():
            if not np.isfinite(self.params[path]).all():
                raise FloatingPointError(f"non-finite values in parameter {path!r}")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for path in self.paths():
            other.register(path, self.params[path].copy())
            other._m[path] = self._m[path].copy()
            other._v[path] = self._v[path].copy()
            other._step[path] = self._step[path]
        return other

    # -- checkpoint format: versioned JSON of {path: {shape, data}} with
    # float64 values serialized via repr round-trip (bit-exact).

    def save(self, path: str) -> None:
        payload = {
            "format_version": 1,
            "params": {
                p: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for p, v in sorted(self.params.items())
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != 1:
            raise ValueError(f"unsupported checkpoint format_version: {version!r}")
        store = cls()
        for p, entry in payload["params"].items():
            value = np.array(entry["data"], dtype=DTYPE).reshape(entry["shape"])
            store.register(p, value)
        return store


def init_params(seed: int, spec: Sequence[tuple[str, tuple[int, ...], object]]) -> ParamStore:
    """Build a ParamStore from (path, shape, scheme) entries. Schemes:
    "zeros", or ("uniform", fan_in) for uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    Draw order follows the given entry order, so layouts are reproducible."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for path, shape, scheme in spec:
        if scheme == "zeros":
            value = np.zeros(shape, dtype=DTYPE)
        elif isinstance(scheme, tuple) and scheme[0] == "uniform":
            bound = 1.0 / np.sqrt(scheme[1])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r} for {path!r}")
        store.register(path, value)
    return store


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    The norm is accumulated in sorted path order for bit-stability."""
    total = 0.0
    for path in sorted(grads):
        g = grads[path]
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        grads = {p: g * factor for p, g in grads.items()}
    return grads, norm


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_exempt: Optional[Callable[[str], bool]] = None,
) -> None:
    """One Adam update (bias-corrected) with decoupled weight decay applied
    as an additive lr*wd*param shrinkage. Only parameters present in
    ``grads`` are touched. Updates are per-parameter, so the result does not
    depend on iteration order."""
    b1, b2 = betas
    for path in sorted(grads):
        if path not in store.params:
            raise KeyError(f"gradient for unknown parameter {path!r}")
        p = store.params[path]
        g = grads[path]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {path!r}")
        store._step[path] += 1
        t = store._step[path]
        m = store._m[path]
        v = store._v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # bias-corrected update: lr * mhat / (sqrt(vhat) + eps)
        denom = np.sqrt(v * (1.0 / (1.0 - b2**t)))
        denom += eps
        delta = m * (lr / (1.0 - b1**t))
        delta /= denom
        if weight_decay != 0.0 and not (decay_exempt is not None and decay_exempt(path)):
            delta += (lr * weight_decay) * p
        p -= delta


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(
    closure: Callable[[dict[str, Tensor]], Tensor],
    store: ParamStore,
    eps: float = 1e-4,
    num_coords: int = 220,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``closure`` against central finite
    differences on a random subsample of parameter coordinates; returns the
    max relative error |ad - fd| / (|ad| + |fd| + 1e-4).

    The closure must be a deterministic function of the tensors it is given.
    """
    tensors = store.as_tensors(requires_grad=True)
    loss = closure(tensors)
    backward(loss)
    ad_grads = {
        p: (t.grad if t.grad is not None else np.zeros_like(t.value)) for p, t in tensors.items()
    }

    paths = store.paths()
    sizes = np.array([store.params[p].size for p in paths])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(num_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    def eval_loss() -> float:
        with no_grad():
            out = closure(store.as_tensors(requires_grad=False))
        return float(out.value)

    worst = 0.0
    for flat in sorted(int(x) for x in picks):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        path = paths[pi]
        arr = store.params[path].ravel()
        orig = arr[offset]
        arr[offset] = orig + eps
        up = eval_loss()
        arr[offset] = orig - eps
        down = eval_loss()
        arr[offset] = orig
        fd = (up - down) / (2.0 * eps)
        ad = float(ad_grads[path].ravel()[offset])
        rel = abs(ad - fd) / (abs(ad) + abs(fd) + 1e-4)
        worst = max(worst, rel)
    return worst
