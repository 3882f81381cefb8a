"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every operation of one forward pass (define-by-run);
``backward`` walks the record in reverse and accumulates gradients for the
registered parameters.  Tensors hold plain numpy float64 buffers.  A tape and
its tensors belong to one thread; independent tapes may run concurrently.

Broadcasting in elementwise ops is limited to leading-dimension expansion
(the smaller shape must be a suffix of the larger one).  Any other shape
coercion goes through the explicit ``broadcast`` / ``reshape`` ops.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class TapeError(RuntimeError):
    """Raised on tape misuse (frozen tape, detached tensor, non-scalar loss)."""


class Tensor:
    """A dense float64 array recorded on a tape.

    ``node_id`` is the tensor's position in the tape's node list; it is
    present iff the tensor was produced on (or registered with) a tape.
    """

    __slots__ = ("data", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape, node_id, requires_grad):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node_id={self.node_id})"

    # -- operator sugar; scalars become constants on the same tape ----------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return mul(self, self.tape.constant(np.float64(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "input_ids", "backward_fn")

    def __init__(self, kind, input_ids, backward_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation record.  Node inputs always reference earlier
    nodes, so the list is topologically ordered by construction."""

    def __init__(self):
        self.nodes = []
        self.frozen = False

    def _record(self, kind, data, input_ids, backward_fn, requires_grad):
        if self.frozen:
            raise TapeError("tape is frozen; reset() before recording new ops")
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, input_ids, backward_fn))
        return Tensor(data, self, node_id, requires_grad)

    def constant(self, data):
        """Register a non-differentiable leaf."""
        arr = np.asarray(data, dtype=np.float64)
        return self._record("leaf", arr, (), None, False)

    def parameter(self, data):
        """Register a differentiable leaf (gradients are produced for it)."""
        arr = np.asarray(data, dtype=np.float64)
        return self._record("param", arr, (), None, True)

    def reset(self):
        self.nodes = []
        self.frozen = False


def _check_same_tape(op_kind, tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise TapeError(f"{op_kind}: operands live on different tapes")
    return tape


def _suffix_broadcast(op_kind, a, b):
    """Return (out_shape, a_expands, b_expands) for leading-dim broadcasting."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and (len(sb) == 0 or sa[len(sa) - len(sb):] == sb):
        return sa
    if len(sb) > len(sa) and (len(sa) == 0 or sb[len(sb) - len(sa):] == sa):
        return sb
    raise ShapeError(
        f"{op_kind}: shapes {sa} and {sb} incompatible "
        f"(only leading-dimension broadcasting is supported)"
    )


def _unbroadcast(grad, shape):
    """Sum a gradient over the leading axes added by suffix broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _elementwise_binary(kind, a, b, fwd, da, db):
    tape = _check_same_tape(kind, (a, b))
    _suffix_broadcast(kind, a, b)
    out_data = fwd(a.data, b.data)
    requires = a.requires_grad or b.requires_grad

    def backward_fn(grad, grads):
        if a.requires_grad:
            grads[a.node_id] = grads.get(a.node_id, 0.0) + _unbroadcast(
                da(grad, a.data, b.data, out_data), a.shape)
        if b.requires_grad:
            grads[b.node_id] = grads.get(b.node_id, 0.0) + _unbroadcast(
                db(grad, a.data, b.data, out_data), b.shape)

    return tape._record(kind, out_data, (a.node_id, b.node_id), backward_fn, requires)


def _elementwise_unary(kind, a, fwd, dgrad):
    out_data = fwd(a.data)

    def backward_fn(grad, grads):
        if a.requires_grad:
            grads[a.node_id] = grads.get(a.node_id, 0.0) + dgrad(grad, a.data, out_data)

    return a.tape._record(kind, out_data, (a.node_id,), backward_fn, a.requires_grad)


# -- arithmetic --------------------------------------------------------------

def add(a, b):
    return _elementwise_binary(
        "add", a, b, lambda x, y: x + y,
        lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _elementwise_binary(
        "sub", a, b, lambda x, y: x - y,
        lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _elementwise_binary(
        "mul", a, b, lambda x, y: x * y,
        lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _elementwise_binary(
        "div", a, b, lambda x, y: x / y,
        lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def matmul(a, b):
    tape = _check_same_tape("matmul", (a, b))
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} invalid (need (n,k)@(k,m))")
    out_data = a.data @ b.data

    def backward_fn(grad, grads):
        if a.requires_grad:
            grads[a.node_id] = grads.get(a.node_id, 0.0) + grad @ b.data.T
        if b.requires_grad:
            grads[b.node_id] = grads.get(b.node_id, 0.0) + a.data.T @ grad

    return tape._record("matmul", out_data, (a.node_id, b.node_id),
                        backward_fn, a.requires_grad or b.requires_grad)


# -- elementwise nonlinearities ----------------------------------------------

def exp(a):
    return _elementwise_unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _elementwise_unary("log", a, np.log, lambda g, x, o: g / x)


def relu(a):
    return _elementwise_unary(
        "relu", a, lambda x: np.maximum(x, 0.0),
        lambda g, x, o: g * (x > 0.0))


def elu(a):
    # alpha = 1
    def fwd(x):
        return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))

    return _elementwise_unary(
        "elu", a, fwd, lambda g, x, o: g * np.where(x > 0.0, 1.0, o + 1.0))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _elementwise_unary(
        "sigmoid", a, lambda x: _sigmoid(np.atleast_1d(x)).reshape(x.shape),
        lambda g, x, o: g * o * (1.0 - o))


def softplus(a):
    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    return _elementwise_unary(
        "softplus", a, fwd,
        lambda g, x, o: g * _sigmoid(np.atleast_1d(x)).reshape(x.shape))


# -- reductions --------------------------------------------------------------

def sum_(a, axis=None):
    out_data = a.data.sum(axis=axis)

    def backward_fn(grad, grads):
        if not a.requires_grad:
            return
        if axis is None:
            g = np.broadcast_to(grad, a.shape)
        else:
            g = np.broadcast_to(np.expand_dims(grad, axis), a.shape)
        grads[a.node_id] = grads.get(a.node_id, 0.0) + g

    return a.tape._record("sum", out_data, (a.node_id,), backward_fn, a.requires_grad)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def backward_fn(grad, grads):
        if not a.requires_grad:
            return
        if axis is None:
            g = np.broadcast_to(grad / n, a.shape)
        else:
            g = np.broadcast_to(np.expand_dims(grad / n, axis), a.shape)
        grads[a.node_id] = grads.get(a.node_id, 0.0) + g

    return a.tape._record("mean", out_data, (a.node_id,), backward_fn, a.requires_grad)


def logsumexp(a, axis=-1):
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = (np.log(total) + m).squeeze(axis=axis)
    softmax = shifted / total

    def backward_fn(grad, grads):
        if a.requires_grad:
            g = np.expand_dims(grad, axis) * softmax
            grads[a.node_id] = grads.get(a.node_id, 0.0) + g

    return a.tape._record("logsumexp", out_data, (a.node_id,), backward_fn,
                          a.requires_grad)


# -- shape ops ---------------------------------------------------------------

def concat(tensors, axis=-1):
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    tape = _check_same_tape("concat", tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out_data.ndim + axis
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(grad, grads):
        pieces = np.split(grad, splits, axis=ax)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                grads[t.node_id] = grads.get(t.node_id, 0.0) + piece

    return tape._record("concat", out_data, tuple(t.node_id for t in tensors),
                        backward_fn, any(t.requires_grad for t in tensors))


def slice_(a, start, stop, axis=-1):
    ax = axis if axis >= 0 else a.data.ndim + axis
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"slice: range [{start}:{stop}] invalid for shape {a.shape} axis {ax}")
    index = tuple(slice(None) if d != ax else slice(start, stop)
                  for d in range(a.data.ndim))
    out_data = a.data[index].copy()

    def backward_fn(grad, grads):
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[index] = grad
            grads[a.node_id] = grads.get(a.node_id, 0.0) + full

    return a.tape._record("slice", out_data, (a.node_id,), backward_fn, a.requires_grad)


def broadcast(a, shape):
    """Explicitly expand ``a`` to ``shape`` (numpy broadcast rules)."""
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {tuple(shape)}") from None

    def backward_fn(grad, grads):
        if not a.requires_grad:
            return
        extra = grad.ndim - a.data.ndim
        if extra > 0:
            grad = grad.sum(axis=tuple(range(extra)))
        ones = tuple(i for i, d in enumerate(a.shape) if d == 1 and grad.shape[i] != 1)
        if ones:
            grad = grad.sum(axis=ones, keepdims=True)
        grads[a.node_id] = grads.get(a.node_id, 0.0) + grad

    return a.tape._record("broadcast", out_data, (a.node_id,), backward_fn,
                          a.requires_grad)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward_fn(grad, grads):
        if a.requires_grad:
            grads[a.node_id] = grads.get(a.node_id, 0.0) + grad.reshape(a.shape)

    return a.tape._record("reshape", out_data, (a.node_id,), backward_fn,
                          a.requires_grad)


# -- linear-algebra helpers for full-covariance Gaussians ---------------------

def trisolve_lower(L, r):
    """Solve L y = r rows for lower-triangular L; r is (D,) or (B, D)."""
    tape = _check_same_tape("trisolve_lower", (L, r))
    D = L.shape[0]
    if L.data.ndim != 2 or L.shape[1] != D or r.shape[-1] != D:
        raise ShapeError(f"trisolve_lower: shapes {L.shape} and {r.shape} invalid")
    rhs = r.data.reshape(-1, D).T
    y = solve_triangular(L.data, rhs, lower=True).T.reshape(r.shape)

    def backward_fn(grad, grads):
        g2 = grad.reshape(-1, D)
        y2 = y.reshape(-1, D)
        w = solve_triangular(L.data, g2.T, lower=True, trans="T").T  # L^{-T} g rows
        if r.requires_grad:
            grads[r.node_id] = grads.get(r.node_id, 0.0) + w.reshape(r.shape)
        if L.requires_grad:
            gL = -(w.T @ y2)
            gL = np.tril(gL)  # upper triangle never enters the forward solve
            grads[L.node_id] = grads.get(L.node_id, 0.0) + gL

    return tape._record("trisolve_lower", y, (L.node_id, r.node_id), backward_fn,
                        L.requires_grad or r.requires_grad)


def chol_from_raw(raw, diag_floor=1e-4):
    """Build a valid Cholesky factor from an unconstrained (D, D) matrix.

    Strictly-lower entries pass through; the diagonal goes through
    softplus plus a positive floor, so the factor is SPD by construction.
    """
    x = raw.data
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"chol_from_raw: need a square matrix, got {raw.shape}")
    d = np.diagonal(x)
    sp = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    out_data = np.tril(x, k=-1) + np.diag(sp + diag_floor)

    def backward_fn(grad, grads):
        if raw.requires_grad:
            g = np.tril(grad, k=-1)
            g = g + np.diag(np.diagonal(grad) * _sigmoid(d))
            grads[raw.node_id] = grads.get(raw.node_id, 0.0) + g

    return raw.tape._record("chol_from_raw", out_data, (raw.node_id,), backward_fn,
                            raw.requires_grad)


# -- composite helpers (built from primitives) --------------------------------

def clamp(a, lo, hi):
    """clamp(x) = lo + relu(x-lo) - relu(x-hi); gradient 1 inside (lo, hi)."""
    return relu(a - lo) - relu(a - hi) + lo


def log_softmax(a, axis=-1):
    lse = logsumexp(a, axis=axis)
    ax = axis if axis >= 0 else a.data.ndim + axis
    return a - broadcast(reshape(lse, lse.data.shape[:ax] + (1,) + lse.data.shape[ax:]),
                         a.shape)


# -- generic apply -----------------------------------------------------------

_UNARY = {"exp": exp, "log": log, "relu": relu, "elu": elu,
          "sigmoid": sigmoid, "softplus": softplus}
_BINARY = {"matmul": matmul, "add": add, "mul": mul, "sub": sub, "div": div}
_REDUCE = {"sum": sum_, "mean": mean, "logsumexp": logsumexp}


def apply(op_kind, inputs, **kwargs):
    """Apply an operation by name to a list of tensors.

    Supported kinds: matmul, add, mul, sub, div, exp, log, relu, elu,
    sigmoid, softplus, sum, mean, logsumexp, concat, slice, broadcast,
    plus the structural extensions reshape, trisolve_lower, chol_from_raw.
    """
    if op_kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{op_kind}: expected 2 inputs, got {len(inputs)}")
        return _BINARY[op_kind](inputs[0], inputs[1])
    if op_kind in _UNARY:
        if len(inputs) != 1:
            raise ShapeError(f"{op_kind}: expected 1 input, got {len(inputs)}")
        return _UNARY[op_kind](inputs[0])
    if op_kind in _REDUCE:
        return _REDUCE[op_kind](inputs[0], **kwargs)
    if op_kind == "concat":
        return concat(inputs, **kwargs)
    if op_kind == "slice":
        return slice_(inputs[0], **kwargs)
    if op_kind == "broadcast":
        return broadcast(inputs[0], **kwargs)
    if op_kind == "reshape":
        return reshape(inputs[0], **kwargs)
    if op_kind == "trisolve_lower":
        return trisolve_lower(inputs[0], inputs[1])
    if op_kind == "chol_from_raw":
        return chol_from_raw(inputs[0], **kwargs)
    raise ValueError(f"unknown op_kind {op_kind!r}")


# -- backward pass -----------------------------------------------------------

def backward(loss):
    """Gradients of a scalar loss w.r.t. every parameter on its tape.

    Returns a dict node_id -> ndarray for the registered parameter leaves.
    The tape is frozen afterwards until reset().
    """
    if loss.node_id is None or loss.tape is None:
        raise TapeError("backward: tensor is detached from any tape")
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    nodes = tape.nodes

    grads = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        node = nodes[node_id]
        if node.backward_fn is None:
            continue
        grad = grads.get(node_id)
        if grad is None:
            continue
        node.backward_fn(grad, grads)

    tape.frozen = True
    result = {}
    for node_id, node in enumerate(nodes):
        if node.kind == "param" and node_id in grads:
            result[node_id] = np.asarray(grads[node_id])
    return result


def check_gradients(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; it is called on fresh tapes.
    Error metric per coordinate: |analytic - fd| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)

    tape = Tape()
    xt = tape.parameter(x)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("check_gradients: f(x) is not finite")
    analytic = backward(out).get(xt.node_id)
    if analytic is None:
        analytic = np.zeros_like(x)

    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tape().constant(x)).data.item()
        flat[i] = orig - eps
        lo = f(Tape().constant(x)).data.item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom)) if x.size else 0.0
