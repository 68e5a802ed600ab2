"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor records the operation that produced it; ``backward`` replays
the record in reverse creation order (which is a reverse topological order
of the computation graph) and accumulates gradients into per-node slots on
a Tape. Recurrent cells, the optimizer, and the finite-difference checker
live here too, so higher-level modules only ever compose these ops.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "EmptyAggregationError",
    "tensor",
    "backward",
    "add",
    "mul",
    "scale",
    "matmul",
    "matvec",
    "dot",
    "concat",
    "stack_rows",
    "gather_rows",
    "broadcast_rows",
    "mean_rows",
    "reshape",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "dense_rows",
    "affine_vec",
    "softmax_cross_entropy",
    "softmax_cross_entropy_rows",
    "squared_error",
    "mean_squared_error_rows",
    "GruParams",
    "LstmParams",
    "BiLstmParams",
    "gru_sequence",
    "gru_gather_batch",
    "lstm_gather_batch",
    "bilstm_encode",
    "AdamState",
    "adam_step",
    "grad_check",
    "uniform_init",
]

_seq_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class EmptyAggregationError(ValueError):
    """Raised when a sequence aggregator receives an empty sequence."""


class Tensor:
    """A dense float64 array plus the record of how it was computed.

    Leaf tensors (parameters, constants) have no parents. Non-leaf tensors
    carry a backward closure mapping the upstream gradient to per-parent
    gradients. ``seq`` is a monotone creation stamp; sorting reachable
    nodes by it descending yields a reverse topological order.
    """

    __slots__ = ("value", "parents", "bwd", "seq")

    def __init__(self, value, parents=(), bwd=None):
        arr = np.asarray(value, dtype=np.float64)
        self.value = arr
        self.parents = parents
        self.bwd = bwd
        self.seq = next(_seq_counter)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={self.bwd is None})"


def tensor(value) -> Tensor:
    """Wrap raw data as a leaf tensor."""
    return Tensor(value)


class Tape:
    """Reverse-order replay of one forward pass with per-node gradient slots.

    Built by :func:`backward`. ``grads`` maps ``id(node)`` to the
    accumulated gradient array; leaves that the loss does not depend on
    have no slot and ``grad`` returns ``None`` for them.
    """

    def __init__(self, nodes, grads):
        self.nodes = nodes
        self.grads = grads

    def grad(self, t: Tensor):
        return self.grads.get(id(t))


def backward(loss: Tensor, visit_hook: Callable[[Tensor], None] | None = None) -> Tape:
    """Run reverse-mode differentiation from a scalar loss.

    Returns a Tape whose gradient slots hold d(loss)/d(node) for every
    node the loss depends on. ``visit_hook`` is a test instrument called
    once per replayed node.
    """
    if loss.value.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite loss; refusing to differentiate")

    # Collect nodes reachable from the loss (iterative DFS).
    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        stack.extend(node.parents)
    nodes = sorted(reachable.values(), key=lambda n: n.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in nodes:
        g = grads.get(id(node))
        if g is None or node.bwd is None:
            continue
        if visit_hook is not None:
            visit_hook(node)
        parent_grads = node.bwd(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            slot = grads.get(id(parent))
            # never accumulate in place: ops may alias the upstream array
            grads[id(parent)] = pg if slot is None else slot + pg
    return Tape(nodes, grads)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; grads a += g @ b.T, b += a.T @ g."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return Tensor(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def matvec(a: Tensor, x: Tensor) -> Tensor:
    av, xv = a.value, x.value
    if av.ndim != 2 or xv.ndim != 1 or av.shape[1] != xv.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {av.shape} and {xv.shape}")
    return Tensor(av @ xv, (a, x), lambda g: (np.outer(g, xv), av.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 1 or av.shape != bv.shape:
        raise ShapeError(f"dot: incompatible shapes {av.shape} and {bv.shape}")
    return Tensor(av @ bv, (a, b), lambda g: (g * bv, g * av))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; backward splits by the original extents."""
    if len(parts) == 0:
        raise ShapeError("concat of zero parts")
    vals = [p.value for p in parts]
    ndim = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {vals[0].shape} vs {v.shape}")
        for ax in range(ndim):
            if ax != axis and v.shape[ax] != vals[0].shape[ax]:
                raise ShapeError(f"concat: off-axis mismatch {vals[0].shape} vs {v.shape}")
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(vals))
        )

    return Tensor(np.concatenate(vals, axis=axis), tuple(parts), bwd)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    if len(parts) == 0:
        raise ShapeError("stack_rows of zero parts")
    k = parts[0].value.shape
    for p in parts:
        if p.value.shape != k:
            raise ShapeError(f"stack_rows: shapes {k} vs {p.value.shape}")
    return Tensor(
        np.stack([p.value for p in parts]),
        tuple(parts),
        lambda g: tuple(g[i] for i in range(len(parts))),
    )


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a matrix; repeated indices accumulate in the backward."""
    idx = np.asarray(idx, dtype=np.intp)
    xv = x.value

    def bwd(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(xv[idx], (x,), bwd)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a vector into n identical rows."""
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {v.value.shape}")
    return Tensor(np.tile(v.value, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over rows of a matrix."""
    xv = x.value
    if xv.ndim != 2 or xv.shape[0] == 0:
        raise ShapeError(f"mean_rows expects a non-empty matrix, got {xv.shape}")
    n = xv.shape[0]
    return Tensor(xv.mean(axis=0), (x,), lambda g: (np.tile(g / n, (n, 1)),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.value.shape
    return Tensor(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    xv = x.value
    return Tensor(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)
    return Tensor(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a vector; probabilities sum to 1."""
    xv = x.value
    if xv.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got {xv.shape}")
    z = xv - xv.max()
    e = np.exp(z)
    y = e / e.sum()
    return Tensor(y, (x,), lambda g: (y * (g - np.dot(g, y)),))


_ACTIVATIONS = {
    "relu": (lambda v: np.maximum(v, 0.0), lambda y: (y > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
    "identity": (lambda v: v, lambda y: 1.0),
}


def dense_rows(x: Tensor, w: Tensor, b: Tensor | None, act: str = "identity") -> Tensor:
    """Row-wise affine map with activation: act(x @ w.T + b).

    ``x`` is (n, in), ``w`` is (out, in), ``b`` is (out,) or None.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"dense_rows: incompatible shapes {xv.shape} and {wv.shape}")
    fwd, deriv = _ACTIVATIONS[act]
    pre = xv @ wv.T
    if b is not None:
        if b.value.shape != (wv.shape[0],):
            raise ShapeError(f"dense_rows: bias shape {b.value.shape} vs {wv.shape}")
        pre += b.value
    y = fwd(pre)

    def bwd(g):
        da = g * deriv(y)
        gb = da.sum(axis=0) if b is not None else None
        return (da @ wv, da.T @ xv, gb)

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return Tensor(y, parents, lambda g: bwd(g)[:2])
    return Tensor(y, parents, bwd)


def affine_vec(w: Tensor, x: Tensor, b: Tensor, act: str = "identity") -> Tensor:
    """Vector affine map with activation: act(w @ x + b)."""
    wv, xv = w.value, x.value
    if wv.ndim != 2 or xv.ndim != 1 or wv.shape[1] != xv.shape[0]:
        raise ShapeError(f"affine_vec: incompatible shapes {wv.shape} and {xv.shape}")
    if b.value.shape != (wv.shape[0],):
        raise ShapeError(f"affine_vec: bias shape {b.value.shape} vs {wv.shape}")
    fwd, deriv = _ACTIVATIONS[act]
    y = fwd(wv @ xv + b.value)

    def bwd(g):
        da = g * deriv(y)
        return (np.outer(da, xv), wv.T @ da, da)

    return Tensor(y, (w, x, b), bwd)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of the target class (max-shifted)."""
    zv = logits.value
    if zv.ndim != 1 or zv.shape[0] < 2:
        raise ShapeError(f"softmax_cross_entropy needs >=2 logits, got {zv.shape}")
    if not 0 <= target < zv.shape[0]:
        raise IndexError(f"target {target} out of range for {zv.shape[0]} classes")
    z = zv - zv.max()
    e = np.exp(z)
    p = e / e.sum()
    loss = np.log(e.sum()) - z[target]

    def bwd(g):
        gz = p.copy()
        gz[target] -= 1.0
        return (g * gz,)

    return Tensor(loss, (logits,), bwd)


def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over rows; targets is an int vector."""
    zv = logits.value
    targets = np.asarray(targets, dtype=np.intp)
    if zv.ndim != 2 or targets.shape != (zv.shape[0],):
        raise ShapeError(f"cross_entropy_rows: shapes {zv.shape} vs {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= zv.shape[1]:
        raise IndexError("target class out of range")
    n = zv.shape[0]
    z = zv - zv.max(axis=1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=1)
    p = e / sums[:, None]
    loss = (np.log(sums) - z[np.arange(n), targets]).mean()

    def bwd(g):
        gz = p.copy()
        gz[np.arange(n), targets] -= 1.0
        return (g * gz / n,)

    return Tensor(loss, (logits,), bwd)


def squared_error(pred: Tensor, target: float) -> Tensor:
    """(pred - target)^2 for a scalar prediction."""
    if pred.value.shape != ():
        raise ShapeError(f"squared_error expects a scalar, got {pred.value.shape}")
    d = pred.value - float(target)
    return Tensor(d * d, (pred,), lambda g: (g * 2.0 * d,))


def mean_squared_error_rows(preds: Tensor, targets) -> Tensor:
    """Mean of (pred - target)^2 over a vector of predictions."""
    pv = preds.value
    targets = np.asarray(targets, dtype=np.float64)
    if pv.ndim != 1 or pv.shape != targets.shape:
        raise ShapeError(f"mse_rows: shapes {pv.shape} vs {targets.shape}")
    d = pv - targets
    n = pv.shape[0]
    return Tensor((d * d).mean(), (preds,), lambda g: (g * 2.0 * d / n,))


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class GruParams:
    """Gated recurrent cell weights: update (z), reset (r), candidate (c).

    The reset gate multiplies the previous hidden state before the
    candidate's recurrent matmul. Hidden states start at zero.
    """

    w_z: Tensor
    w_r: Tensor
    w_c: Tensor
    u_z: Tensor
    u_r: Tensor
    u_c: Tensor
    b_z: Tensor
    b_r: Tensor
    b_c: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_z.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.value.shape[1]

    def tensors(self):
        return (
            self.w_z, self.w_r, self.w_c,
            self.u_z, self.u_r, self.u_c,
            self.b_z, self.b_r, self.b_c,
        )

    def validate(self):
        h, d = self.w_z.value.shape
        expect = {
            "w_z": (h, d), "w_r": (h, d), "w_c": (h, d),
            "u_z": (h, h), "u_r": (h, h), "u_c": (h, h),
            "b_z": (h,), "b_r": (h,), "b_c": (h,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).value.shape
            if got != shape:
                raise ShapeError(f"GruParams.{name}: expected {shape}, got {got}")


@dataclass
class LstmParams:
    """One-direction LSTM gate weights (input, forget, output, candidate)."""

    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_g: Tensor
    u_i: Tensor
    u_f: Tensor
    u_o: Tensor
    u_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_i.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.value.shape[1]

    def tensors(self):
        return (
            self.w_i, self.w_f, self.w_o, self.w_g,
            self.u_i, self.u_f, self.u_o, self.u_g,
            self.b_i, self.b_f, self.b_o, self.b_g,
        )


@dataclass
class BiLstmParams:
    """Forward and backward LSTM directions with identical sizes."""

    fwd: LstmParams
    bwd: LstmParams

    def __post_init__(self):
        if (self.fwd.hidden_size != self.bwd.hidden_size
                or self.fwd.input_size != self.bwd.input_size):
            raise ShapeError("BiLstmParams: direction sizes differ")

    def tensors(self):
        return self.fwd.tensors() + self.bwd.tensors()


def _as_row_matrix(inputs) -> Tensor:
    if isinstance(inputs, Tensor):
        if inputs.value.ndim != 2:
            raise ShapeError(f"sequence input must be (steps, dim), got {inputs.value.shape}")
        return inputs
    seq = list(inputs)
    if len(seq) == 0:
        raise EmptyAggregationError("empty input sequence")
    return stack_rows(seq)


def gru_sequence(inputs, params: GruParams) -> Tensor:
    """Run the GRU over one ordered sequence; returns the final hidden state.

    ``inputs`` is either a list of 1-D tensors or a (steps, dim) tensor,
    one timestep per row.
    """
    x = _as_row_matrix(inputs)
    if x.value.shape[0] == 0:
        raise EmptyAggregationError("empty input sequence")
    out = gru_gather_batch(x, [list(range(x.value.shape[0]))], params)
    return reshape(out, (params.hidden_size,))


def gru_gather_batch(source: Tensor, seqs: Sequence[Sequence[int]], params: GruParams) -> Tensor:
    """Run one GRU over many row-index sequences of ``source`` at once.

    Returns a (num_sequences, hidden) tensor of final hidden states.
    Sequences are processed in descending-length order internally; the
    backward pass is a hand-derived vectorized BPTT.
    """
    if len(seqs) == 0:
        raise EmptyAggregationError("no sequences to aggregate")
    for s in seqs:
        if len(s) == 0:
            raise EmptyAggregationError("empty input sequence")
    xv = source.value
    if xv.ndim != 2:
        raise ShapeError(f"gru source must be a matrix, got {xv.shape}")
    h_size = params.hidden_size
    if params.input_size != xv.shape[1]:
        raise ShapeError(
            f"gru input size {params.input_size} vs source width {xv.shape[1]}")

    order = sorted(range(len(seqs)), key=lambda i: (-len(seqs[i]), i))
    lengths = [len(seqs[order[i]]) for i in range(len(seqs))]
    max_len = lengths[0]
    # step t uses the first n_t sequences (those with length > t)
    n_at = [sum(1 for L in lengths if L > t) for t in range(max_len)]
    step_rows = [
        np.array([seqs[order[b]][t] for b in range(n_at[t])], dtype=np.intp)
        for t in range(max_len)
    ]

    wz, wr, wc = params.w_z.value, params.w_r.value, params.w_c.value
    uz, ur, uc = params.u_z.value, params.u_r.value, params.u_c.value
    bz, br, bc = params.b_z.value, params.b_r.value, params.b_c.value

    h = np.zeros((len(seqs), h_size))
    saved = []
    for t in range(max_len):
        n = n_at[t]
        xt = xv[step_rows[t]]
        hp = h[:n]
        z = _sigmoid(xt @ wz.T + bz + hp @ uz.T)
        r = _sigmoid(xt @ wr.T + br + hp @ ur.T)
        rh = r * hp
        c = np.tanh(xt @ wc.T + bc + rh @ uc.T)
        saved.append((xt, hp, z, r, rh, c))
        h = h.copy()
        h[:n] = (1.0 - z) * hp + z * c

    inv = np.empty(len(seqs), dtype=np.intp)
    inv[order] = np.arange(len(seqs))
    out = h[inv]

    def bwd(g):
        dh = g[order].copy()
        d_src = np.zeros_like(xv)
        dwz = np.zeros_like(wz); dwr = np.zeros_like(wr); dwc = np.zeros_like(wc)
        duz = np.zeros_like(uz); dur = np.zeros_like(ur); duc = np.zeros_like(uc)
        dbz = np.zeros_like(bz); dbr = np.zeros_like(br); dbc = np.zeros_like(bc)
        for t in range(max_len - 1, -1, -1):
            n = n_at[t]
            xt, hp, z, r, rh, c = saved[t]
            dh_n = dh[:n]
            dz = dh_n * (c - hp)
            dc = dh_n * z
            dhp = dh_n * (1.0 - z)
            dac = dc * (1.0 - c * c)
            dwc += dac.T @ xt
            dbc += dac.sum(axis=0)
            duc += dac.T @ rh
            drh = dac @ uc
            dr = drh * hp
            dhp = dhp + drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dwz += daz.T @ xt
            dbz += daz.sum(axis=0)
            duz += daz.T @ hp
            dhp = dhp + daz @ uz
            dwr += dar.T @ xt
            dbr += dar.sum(axis=0)
            dur += dar.T @ hp
            dhp = dhp + dar @ ur
            np.add.at(d_src, step_rows[t], daz @ wz + dar @ wr + dac @ wc)
            dh[:n] = dhp
        return (d_src, dwz, dwr, dwc, duz, dur, duc, dbz, dbr, dbc)

    return Tensor(out, (source,) + params.tensors(), bwd)


def lstm_gather_batch(source: Tensor, seqs: Sequence[Sequence[int]], params: LstmParams) -> Tensor:
    """LSTM analogue of :func:`gru_gather_batch`; returns final hidden states."""
    if len(seqs) == 0:
        raise EmptyAggregationError("no sequences to aggregate")
    for s in seqs:
        if len(s) == 0:
            raise EmptyAggregationError("empty input sequence")
    xv = source.value
    h_size = params.hidden_size
    if params.input_size != xv.shape[1]:
        raise ShapeError(
            f"lstm input size {params.input_size} vs source width {xv.shape[1]}")

    order = sorted(range(len(seqs)), key=lambda i: (-len(seqs[i]), i))
    lengths = [len(seqs[order[i]]) for i in range(len(seqs))]
    max_len = lengths[0]
    n_at = [sum(1 for L in lengths if L > t) for t in range(max_len)]
    step_rows = [
        np.array([seqs[order[b]][t] for b in range(n_at[t])], dtype=np.intp)
        for t in range(max_len)
    ]

    wi, wf, wo, wg = params.w_i.value, params.w_f.value, params.w_o.value, params.w_g.value
    ui, uf, uo, ug = params.u_i.value, params.u_f.value, params.u_o.value, params.u_g.value
    bi, bf, bo, bg = params.b_i.value, params.b_f.value, params.b_o.value, params.b_g.value

    h = np.zeros((len(seqs), h_size))
    cst = np.zeros((len(seqs), h_size))
    saved = []
    for t in range(max_len):
        n = n_at[t]
        xt = xv[step_rows[t]]
        hp, cp = h[:n], cst[:n]
        i = _sigmoid(xt @ wi.T + bi + hp @ ui.T)
        f = _sigmoid(xt @ wf.T + bf + hp @ uf.T)
        o = _sigmoid(xt @ wo.T + bo + hp @ uo.T)
        gt = np.tanh(xt @ wg.T + bg + hp @ ug.T)
        cn = f * cp + i * gt
        tc = np.tanh(cn)
        saved.append((xt, hp, cp, i, f, o, gt, tc))
        h = h.copy(); cst = cst.copy()
        cst[:n] = cn
        h[:n] = o * tc

    inv = np.empty(len(seqs), dtype=np.intp)
    inv[order] = np.arange(len(seqs))
    out = h[inv]

    def bwd(g):
        dh = g[order].copy()
        dc = np.zeros((len(seqs), h_size))
        d_src = np.zeros_like(xv)
        dws = [np.zeros_like(m) for m in (wi, wf, wo, wg)]
        dus = [np.zeros_like(m) for m in (ui, uf, uo, ug)]
        dbs = [np.zeros_like(v) for v in (bi, bf, bo, bg)]
        for t in range(max_len - 1, -1, -1):
            n = n_at[t]
            xt, hp, cp, i, f, o, gt, tc = saved[t]
            dh_n, dc_n = dh[:n], dc[:n]
            do = dh_n * tc
            dcn = dc_n + dh_n * o * (1.0 - tc * tc)
            di = dcn * gt
            df = dcn * cp
            dgt = dcn * i
            dcp = dcn * f
            da = (
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dgt * (1.0 - gt * gt),
            )
            dhp = np.zeros_like(hp)
            dx = np.zeros_like(xt)
            for k, (w, u) in enumerate(((wi, ui), (wf, uf), (wo, uo), (wg, ug))):
                dws[k] += da[k].T @ xt
                dus[k] += da[k].T @ hp
                dbs[k] += da[k].sum(axis=0)
                dhp += da[k] @ u
                dx += da[k] @ w
            np.add.at(d_src, step_rows[t], dx)
            dh[:n] = dhp
            dc[:n] = dcp
        return (d_src, *dws, *dus, *dbs)

    return Tensor(out, (source,) + params.tensors(), bwd)


def bilstm_encode(tokens, params: BiLstmParams) -> Tensor:
    """Encode a token sequence as concat(forward final state, backward final state)."""
    x = _as_row_matrix(tokens)
    n = x.value.shape[0]
    if n == 0:
        raise EmptyAggregationError("empty token sequence")
    fwd = lstm_gather_batch(x, [list(range(n))], params.fwd)
    bwd_dir = lstm_gather_batch(x, [list(range(n - 1, -1, -1))], params.bwd)
    h = params.fwd.hidden_size
    return concat([reshape(fwd, (h,)), reshape(bwd_dir, (h,))])


def bilstm_encode_batch(source: Tensor, seqs: Sequence[Sequence[int]], params: BiLstmParams) -> Tensor:
    """Batched BiLSTM over row-index sequences; rows are concat(fwd, bwd) states."""
    fwd = lstm_gather_batch(source, seqs, params.fwd)
    rev = [list(reversed(s)) for s in seqs]
    bwd_dir = lstm_gather_batch(source, rev, params.bwd)
    return concat([fwd, bwd_dir], axis=1)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected first/second moment accumulators, one pair per parameter."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One Adam update in place; parameters with no gradient stay untouched."""
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.value.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(closure: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-6, max_coords: int = 16,
               rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients against central finite differences.

    ``closure`` rebuilds the forward pass from the current parameter
    values. Coordinates are subsampled per tensor when it has more than
    ``max_coords`` entries. Returns the max relative error, where the
    relative error uses a unit floor: |a-b| / max(1, |a|, |b|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    loss = closure()
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite loss in grad_check")
    tape = backward(loss)
    worst = 0.0
    for p in params.values():
        g = tape.grad(p)
        if g is None:
            g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        n = flat.shape[0]
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = closure().value
            flat[i] = orig - eps
            down = closure().value
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            a, b = float(gflat[i]), float(fd)
            err = abs(a - b) / max(1.0, abs(a), abs(b))
            worst = max(worst, err)
    return worst


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)
