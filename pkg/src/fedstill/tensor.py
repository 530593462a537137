"""Dense float64 tensors with tape-based reverse-mode autodiff.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, a
``Tape`` records every differentiable op created while it is active, and
``backward`` replays the record in reverse to accumulate gradients for
the tracked leaves.  Ops executed with no active tape still compute
values but record nothing, which is the inference path.

All arithmetic is float64.  Every completed op checks its output for
NaN/Inf and raises ``NonFiniteValue``, so numerical blow-ups surface at
the op that caused them instead of three modules later.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import MissingGradient, NonFiniteValue, NotScalar, ShapeMismatch

_uid_counter = itertools.count()
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape():
    """The innermost Tape currently entered on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the differentiable ops for one training step.

    Creation order is a valid topological order (an op's inputs must
    exist before the op runs), so backward simply walks the record in
    reverse.  A tape and the tensors recorded on it belong to a single
    training job; parallel jobs each use their own tape (the active
    stack is thread-local).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")
        return False

    def _record(self, node: "Tensor") -> None:
        node.tape_index = len(self.nodes)
        self.nodes.append(node)

    def _note_leaf(self, t: "Tensor") -> None:
        if t.uid not in self._leaf_ids:
            self._leaf_ids.add(t.uid)
            self.leaves.append(t)


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "uid", "tape_index",
                 "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.uid = next(_uid_counter)
        self.tape_index = -1
        self._parents: tuple = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_flag})"

    # Small amount of operator sugar; losses combine via `+`.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def graph_node(value, parents: tuple, grad_fn, op: str = "") -> Tensor:
    """Create an op-output tensor, recording it on the active tape.

    This is the extension point composite differentiable ops (the loss
    functions) use to plug an analytic gradient into the same tape
    machinery as the primitives.  ``grad_fn`` receives the output
    gradient (ndarray) and must return one ndarray (or None) per parent.
    """
    out_data = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"op '{op or '?'}' produced non-finite values")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = True
        out.grad = None
        out.uid = next(_uid_counter)
        out.tape_index = -1
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        tape._record(out)
        for p in parents:
            if p.requires_grad and p._grad_fn is None:
                tape._note_leaf(p)
        return out
    # Constant path: no recording, gradient never flows here.
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.uid = next(_uid_counter)
    out.tape_index = -1
    out._parents = ()
    out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ------------------------------------------------------------------ primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return graph_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return graph_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return graph_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape),
                   _unbroadcast(g * a.data, b.shape)),
        op="mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return graph_node(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        op="matmul")


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-1 zero-padded 2-D convolution over a channel-first volume.

    ``x`` has shape (C_in, D, H, W) and ``kernel`` (C_out, C_in, kh, kw)
    with odd kh/kw; padding preserves H and W.  Depth slices are
    convolved independently with shared weights, i.e. depth acts as a
    batch axis.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatch(
            f"conv2d needs (C_in,D,H,W) and (C_out,C_in,kh,kw), "
            f"got {x.shape} and {kernel.shape}")
    c_in, d, h, w = x.shape
    c_out, c_in2, kh, kw = kernel.shape
    if c_in != c_in2:
        raise ShapeMismatch(f"conv2d: input has {c_in} channels, kernel expects {c_in2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (C_in, D, H, W, kh, kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(
        d * h * w, c_in * kh * kw)
    k2 = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ k2.T).reshape(d, h, w, c_out).transpose(3, 0, 1, 2)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(d * h * w, c_out)
        dk = (g2.T @ cols).reshape(kernel.shape)
        # dx is the same-padded correlation of g with the flipped kernel,
        # so it reuses the im2col+matmul path instead of a scatter loop.
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gcols = np.ascontiguousarray(gwin.transpose(1, 2, 3, 0, 4, 5)).reshape(
            d * h * w, c_out * kh * kw)
        kf = np.flip(kernel.data, axis=(2, 3)).transpose(0, 2, 3, 1).reshape(
            c_out * kh * kw, c_in)
        dx = (gcols @ kf).reshape(d, h, w, c_in).transpose(3, 0, 1, 2)
        return dx, dk

    return graph_node(np.ascontiguousarray(out), (x, kernel), grad_fn, op="conv2d")


def relu(x: Tensor) -> Tensor:
    return graph_node(
        np.maximum(x.data, 0.0), (x,),
        lambda g: (g * (x.data > 0.0),),
        op="relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return graph_node(s, (x,), grad_fn, op="sigmoid")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return graph_node(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn,
                      op="sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).copy(),)

    return graph_node(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn,
                      op="mean")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeMismatch("concat: rank mismatch")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeMismatch(
                f"concat: shapes {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return graph_node(np.concatenate([t.data for t in tensors], axis=axis),
                      tuple(tensors), grad_fn, op="concat")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size and -1 not in shape:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    return graph_node(
        x.data.reshape(shape), (x,),
        lambda g: (g.reshape(x.shape),),
        op="reshape")


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (K, F) table; gradient scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embed_lookup table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("embed_lookup ids must be a 1-D index list")
    k = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeMismatch(f"embed_lookup index out of range for table of {k} rows")

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return graph_node(table.data[idx], (table,), grad_fn, op="embed_lookup")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ShapeMismatch(f"clamp: need lo < hi, got [{lo}, {hi}]")
    inside = (x.data > lo) & (x.data < hi)
    return graph_node(
        np.clip(x.data, lo, hi), (x,),
        lambda g: (g * inside,),
        op="clamp")


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "sum": tsum,
    "mean": tmean,
    "concat": concat,
    "reshape": reshape,
    "embed_lookup": embed_lookup,
    "clamp": clamp,
}


def apply(op_kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; mainly a uniform hook for tests."""
    fn = _OPS.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown op kind '{op_kind}'")
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# -------------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(leaf) for every tracked leaf.

    Returns a map from tensor uid to gradient Tensor and also stores the
    gradient on each leaf's ``.grad``.  When ``tape`` is given, tracked
    leaves that loss does not reach get explicit zero gradients, so an
    optimizer never sees a missing entry for an unused parameter.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")

    # Collect the recorded nodes reachable from loss; creation order
    # (tape_index) gives a deterministic reverse-topological sweep.
    reachable: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.uid in seen:
            continue
        seen.add(t.uid)
        if t._grad_fn is not None:
            reachable.append(t)
            stack.extend(t._parents)
    reachable.sort(key=lambda t: t.tape_index, reverse=True)

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    touched_leaves: dict[int, Tensor] = {}

    for node in reachable:
        g = grads.pop(node.uid, None)
        if g is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + pg
            else:
                grads[parent.uid] = pg
            if parent._grad_fn is None:
                touched_leaves.setdefault(parent.uid, parent)

    leaf_grads: dict[int, Tensor] = {}

    def finish(t: Tensor, g: np.ndarray) -> None:
        gt = Tensor(np.asarray(g, dtype=np.float64))
        t.grad = gt
        leaf_grads[t.uid] = gt

    if loss._grad_fn is None and loss.requires_grad:
        finish(loss, np.ones_like(loss.data))
    for uid, t in touched_leaves.items():
        finish(t, grads[uid])
    if tape is not None:
        for t in tape.leaves:
            if t.uid not in leaf_grads:
                finish(t, np.zeros_like(t.data))
    return leaf_grads


# -------------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """AdamW state: decoupled weight decay, bias-corrected moments.

    ``warmup_frac`` controls the linear learning-rate ramp at the start
    of training; 0 disables the ramp so the base rate applies from the
    first step.
    """
    base_lr: float = 4e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_frac: float = 0.1
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def schedule_lr(step: int, total_steps: int, base_lr: float,
                warmup_frac: float = 0.1) -> float:
    """Linear warm-up to ``base_lr`` over the first fraction of steps, then flat."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_end = int(round(warmup_frac * total_steps))
    if warmup_end <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_end)


def adamw_step(params, grads: dict[int, Tensor], state: OptimizerState,
               step_total: int):
    """One AdamW update over an ordered name->Tensor parameter mapping.

    ``params`` may be a plain dict or anything exposing ``.tensors``.
    The learning rate is taken from ``schedule_lr`` at the incremented
    step count, so the first update already moves (warm-up starts at the
    rate for step 1, not the zero rate at step 0).
    """
    tensors = getattr(params, "tensors", params)
    t = state.step + 1
    lr = schedule_lr(min(t, step_total), step_total, state.base_lr,
                     state.warmup_frac)
    b1, b2 = state.beta1, state.beta2
    for name, p in tensors.items():
        g = grads.get(p.uid)
        if g is None:
            raise MissingGradient(f"no gradient for parameter '{name}'")
        gd = g.data
        if gd.shape != p.data.shape:
            raise ShapeMismatch(
                f"gradient shape {gd.shape} != parameter shape {p.data.shape} "
                f"for '{name}'")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * gd
        v = b2 * v + (1.0 - b2) * gd * gd
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data
        p.data = p.data - lr * update
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteValue(f"parameter '{name}' became non-finite")
    state.step = t
    return params
