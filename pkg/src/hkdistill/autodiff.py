"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run tape. Every backward rule is itself written in terms of the
primitive ops, so gradients produced with ``create_graph=True`` stay on the
tape and can be differentiated again (double backward). That is what the
one-step pseudo-update in the meta training loop needs.

Broadcasting is restricted to scalar-vs-tensor; everything else must match
shapes exactly, which keeps the gradient rules easy to audit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Input shapes do not conform to the op."""


class NumericalError(AutodiffError):
    """An op produced NaN or Inf."""


class GraphError(AutodiffError):
    """Contract violation against the tape (wrong tape, non-scalar grad, ...)."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_tape_stack: list["Tape"] = []
_grad_enabled: bool = True


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside record nodes here. Tapes
    are cheap and meant to be rebuilt every training step.
    """

    _generation_counter = 0

    def __init__(self) -> None:
        Tape._generation_counter += 1
        self.generation = Tape._generation_counter
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack.pop()
        return False


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops just compute values."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward", "index", "tape")

    def __init__(self, op: str, inputs: tuple, backward, tape: Tape) -> None:
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)


class Tensor:
    """Dense float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Node | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f" node={self.node.index}"
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar used throughout the models/losses modules.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data) -> Tensor:
    """Create a tracked tensor on the active tape (a differentiation root)."""
    tape = active_tape()
    if tape is None:
        raise GraphError("leaf: no active tape")
    t = Tensor(data)
    t.node = Node("leaf", (), None, tape)
    return t


def _make(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op}: output contains non-finite values")
    t = Tensor(out)
    tape = active_tape()
    if _grad_enabled and tape is not None and any(i.node is not None for i in inputs):
        for i in inputs:
            if i.node is not None and i.node.tape is not tape:
                raise GraphError(f"{op}: input belongs to a different tape")
        t.node = Node(op, inputs, backward, tape)
    return t


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return reduce_sum(g)  # only scalar broadcasting exists


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)

    return _make("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make("mul", (a, b), a.data * b.data, backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (scale(g, c),)

    return _make("scale", (a,), a.data * c, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make("matmul", (a, b), a.data @ b.data, backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

    def backward(g):
        return (transpose(g),)

    return _make("transpose", (a,), a.data.T.copy(), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def backward(g):
        return (mul(g, mask),)

    return _make("relu", (a,), np.maximum(a.data, 0.0), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    box: list[Tensor] = []

    def backward(g):
        out = box[0]
        return (mul(mul(g, out), sub(Tensor(1.0), out)),)

    t = _make("sigmoid", (a,), y, backward)
    box.append(t)
    return t


def _softmax2d(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    box: list[Tensor] = []

    def backward(g):
        out = box[0]
        n, c = out.shape
        gy = mul(g, out)
        # rowwise sum broadcast back over columns, via constant ones matrices
        s = matmul(gy, Tensor(np.ones((c, 1))))
        sb = matmul(s, Tensor(np.ones((1, c))))
        return (mul(out, sub(g, sb)),)

    t = _make("softmax", (a,), y, backward)
    box.append(t)
    return t


def softmax(a) -> Tensor:
    """Rowwise softmax with max-subtraction; 1-D input treated as one row."""
    a = as_tensor(a)
    if a.ndim == 1:
        n = a.shape[0]
        return reshape(_softmax2d(reshape(a, (1, n))), (n,))
    if a.ndim == 2:
        return _softmax2d(a)
    raise ShapeError(f"softmax: expected 1-D or 2-D, got {a.shape}")


def reciprocal(a) -> Tensor:
    """1 / max(a, LOG_FLOOR); gradient is zero below the floor."""
    a = as_tensor(a)
    mask = Tensor((a.data > LOG_FLOOR).astype(np.float64))
    box: list[Tensor] = []

    def backward(g):
        out = box[0]
        return (mul(scale(mul(g, mul(out, out)), -1.0), mask),)

    t = _make("reciprocal", (a,), 1.0 / np.maximum(a.data, LOG_FLOOR), backward)
    box.append(t)
    return t


def log(a) -> Tensor:
    """Natural log of max(a, LOG_FLOOR); gradient is zero below the floor."""
    a = as_tensor(a)
    mask = Tensor((a.data > LOG_FLOOR).astype(np.float64))

    def backward(g):
        return (mul(mul(g, reciprocal(a)), mask),)

    return _make("log", (a,), np.log(np.maximum(a.data, LOG_FLOOR)), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    box: list[Tensor] = []

    def backward(g):
        return (mul(g, box[0]),)

    # overflow produces inf, which _make rejects; no need for the warning too
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    t = _make("exp", (a,), value, backward)
    box.append(t)
    return t


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        return (mul(g, Tensor(np.ones(shape))),)

    return _make("sum", (a,), np.asarray(a.data.sum()), backward)


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size

    def backward(g):
        return (scale(mul(g, Tensor(np.ones(shape))), 1.0 / n),)

    return _make("mean", (a,), np.asarray(a.data.mean()), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (scale(mul(g, a), 2.0),)

    return _make("square", (a,), a.data * a.data, backward)


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather-rows: expected 2-D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather-rows: index out of range for {n} rows")

    def backward(g):
        return (scatter_rows(g, idx, n),)

    return _make("gather-rows", (a,), a.data[idx], backward)


def scatter_rows(b, indices, num_rows: int) -> Tensor:
    b = as_tensor(b)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((num_rows,) + b.shape[1:])
    np.add.at(out, idx, b.data)

    def backward(g):
        return (gather_rows(g, idx),)

    return _make("scatter-rows", (b,), out, backward)


def concat(a, b, axis: int = 0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or any(
        a.shape[i] != b.shape[i] for i in range(a.ndim) if i != axis
    ):
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} do not conform on axis {axis}")
    na = a.shape[axis]

    def backward(g):
        return (
            slice_axis(g, axis, 0, na),
            slice_axis(g, axis, na, na + b.shape[axis]),
        )

    return _make("concat", (a, b), np.concatenate([a.data, b.data], axis=axis), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for {a.shape} axis {axis}")
    total = a.shape[axis]
    sl = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.ndim))

    def backward(g):
        return (pad_axis(g, axis, start, total - stop),)

    return _make("slice", (a,), a.data[sl].copy(), backward)


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = as_tensor(a)
    pads = [(0, 0)] * a.ndim
    pads[axis] = (before, after)
    n = a.shape[axis]

    def backward(g):
        return (slice_axis(g, axis, before, before + n),)

    return _make("pad", (a,), np.pad(a.data, pads), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def backward(g):
        return (reshape(g, old),)

    return _make("reshape", (a,), a.data.reshape(shape).copy(), backward)


def add_bias(a, b) -> Tensor:
    """(n, d) + (d,) row-broadcast add; the one non-scalar broadcast we allow."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add-bias: shapes {a.shape} and {b.shape} do not conform")
    n, d = a.shape

    def backward(g):
        gb = reshape(matmul(Tensor(np.ones((1, n))), g), (d,))
        return g, gb

    return _make("add-bias", (a, b), a.data + b.data[None, :], backward)


def im2col(a, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Extract conv patches from (n, h, w, c) into (n*oh*ow, kh*kw*c).

    Pure indexing, so the backward rule is the scatter-add adjoint and the op
    is linear (second order exact).
    """
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"im2col: expected 4-D NHWC, got {a.shape}")
    n, h, w, c = a.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"im2col: kernel ({kh},{kw}) larger than input ({h},{w})")

    # flat index map from output columns back into the input
    ii = stride * np.arange(oh)[:, None, None, None] + np.arange(kh)[None, :, None, None]
    jj = stride * np.arange(ow)[None, None, :, None] + np.arange(kw)[None, None, None, :]
    ii = np.broadcast_to(ii, (oh, kh, ow, kw)).transpose(0, 2, 1, 3)
    jj = np.broadcast_to(jj, (oh, kh, ow, kw)).transpose(0, 2, 1, 3)
    flat = (ii * w + jj).reshape(oh * ow, kh * kw)
    flat = (flat[:, :, None] * c + np.arange(c)[None, None, :]).reshape(oh * ow, kh * kw * c)

    return _gather_patches(a, flat)


def _gather_patches(a: Tensor, flat: np.ndarray) -> Tensor:
    n = a.shape[0]
    rows, width = flat.shape
    cols = a.data.reshape(n, -1)[:, flat].reshape(n * rows, width)
    in_shape = a.shape

    def backward(g):
        return (_col2im(g, flat, in_shape),)

    return _make("im2col", (a,), cols, backward)


def _col2im(g: Tensor, flat: np.ndarray, in_shape: tuple) -> Tensor:
    n, h, w, c = in_shape
    rows, width = flat.shape
    out = np.zeros((n, h * w * c))
    cols = g.data.reshape(n, rows, width)
    for i in range(n):
        np.add.at(out[i], flat.reshape(-1), cols[i].reshape(-1))

    def backward(gg):  # adjoint of scatter-add is the same patch gather
        return (_gather_patches(gg, flat),)

    return _make("col2im", (g,), out.reshape(n, h, w, c), backward)


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "square": square,
    "scale-by-scalar": scale,
    "gather-rows": gather_rows,
    "concat": concat,
    "transpose": transpose,
    "reciprocal": reciprocal,
    "reshape": reshape,
    "add-bias": add_bias,
    "im2col": im2col,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name. Functional entry point mirroring the op table."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar output w.r.t. each tensor in wrt.

    With ``create_graph`` the returned gradients are tape-recorded and can be
    differentiated again.
    """
    if output.size != 1:
        raise GraphError(f"grad: output must be scalar, got shape {output.shape}")
    if output.node is None:
        raise GraphError("grad: output is not on a tape")
    tape = output.node.tape
    wrt = list(wrt)
    for w in wrt:
        if w.node is None or w.node.tape is not tape:
            raise GraphError("grad: wrt tensor does not participate in the output's tape")

    grads: dict[int, Tensor] = {output.node.index: Tensor(np.ones(output.shape))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for idx in range(output.node.index, -1, -1):
            node = tape.nodes[idx]
            g = grads.get(idx)
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or inp.node is None:
                    continue
                j = inp.node.index
                grads[j] = gi if j not in grads else add(grads[j], gi)

        out: list[Tensor] = []
        for w in wrt:
            gw = grads.get(w.node.index)
            if gw is None:
                gw = Tensor(np.zeros(w.shape))
            out.append(gw)
    return out


def finite_diff_check(f, params: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors (one per entry of params) to a scalar Tensor
    and must be deterministic. Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    with Tape():
        leaves = [leaf(p) for p in params]
        analytic = [g.data for g in grad(f(leaves), leaves)]

    def value_at(arrays) -> float:
        # fresh tape per probe: f may differentiate internally
        with Tape():
            return float(f([leaf(a) for a in arrays]).data)

    worst = 0.0
    for k in range(len(params)):
        flat = params[k].reshape(-1)
        a_flat = analytic[k].reshape(-1)
        for i in range(flat.size):
            probe = [p.copy() for p in params]
            pf = probe[k].reshape(-1)
            pf[i] = flat[i] + step
            up = value_at(probe)
            pf[i] = flat[i] - step
            down = value_at(probe)
            numeric = (up - down) / (2.0 * step)
            rel = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
