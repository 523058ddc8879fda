"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

A dynamic tape is rebuilt on every forward pass: each op returns a Tensor
that remembers its parent tensors and a closure computing their gradient
contributions. ``backward`` walks the graph in reverse topological order,
accumulates gradients (so reuse of a tensor is handled naturally), then
consumes the tape so a graph cannot be backpropagated twice.

Conventions fixed here and relied on by tests:
  * relu subgradient at 0 is 0,
  * reduce_max routes gradient to the first maximal index on ties,
  * everything is float64; file formats downcast at their own boundary.

Setting ``PCDISTILL_CHECK_FINITE=1`` makes every op assert its output is
finite (debug aid; off by default).
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, OptimizerError, OracleError, ParameterError

_CHECK_FINITE = os.environ.get("PCDISTILL_CHECK_FINITE", "0") == "1"

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _finite_check(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        from .errors import NumericError

        raise NumericError(f"non-finite values produced by {op}")


def _result(data, parents, backward_fn, op=""):
    """Build an op result, recording the tape edge when gradients are live."""
    _finite_check(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def op_result(data, parents, backward_fn, op=""):
    """Build a tape node for a fused op defined outside this module."""
    return _result(data, parents, backward_fn, op)


def _accum(tensor, grad, fresh=False):
    """Accumulate into tensor.grad.

    ``fresh`` marks arrays the caller just allocated and will not reuse;
    anything else (e.g. out.grad or views of it) is copied on first use so
    grad buffers never alias each other.
    """
    if tensor.grad is None:
        tensor.grad = grad if fresh else np.array(grad)
    else:
        tensor.grad += grad


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} vs {b.data.shape}")

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes {a.data.shape} vs {b.data.shape}")

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g, fresh=True)

    return _result(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} vs {b.data.shape}")

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g * b.data, fresh=True)
        if b.requires_grad:
            _accum(b, g * a.data, fresh=True)

    return _result(a.data * b.data, (a, b), bwd, "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * s, fresh=True)

    return _result(a.data * s, (a,), bwd, "scalar_mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, fresh=True)

    return _result(a.data @ b.data, (a, b), bwd, "matmul")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * (a.data > 0.0), fresh=True)

    return _result(out_data, (a,), bwd, "relu")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * out_data, fresh=True)

    return _result(out_data, (a,), bwd, "exp")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input list")
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(out):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(sl)])

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    return _result(data, tensors, bwd, "concat")


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def bwd(out):
        if a.requires_grad:
            from . import kernels

            g = np.zeros_like(a.data)
            kernels.scatter_add_rows(g, idx, np.ascontiguousarray(out.grad))
            _accum(a, g, fresh=True)

    return _result(a.data[idx], (a,), bwd, "gather_rows")


def reduce_max(a: Tensor, axis: int) -> Tensor:
    arg = np.argmax(a.data, axis=axis)  # first maximal index on ties
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.put_along_axis(
                g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis), axis=axis
            )
            _accum(a, g, fresh=True)

    return _result(out_data, (a,), bwd, "reduce_max")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(out):
        if a.requires_grad:
            if axis is None:
                g = np.full_like(a.data, out.grad / n)
            else:
                g = np.broadcast_to(np.expand_dims(out.grad / n, axis), a.data.shape).copy()
            _accum(a, g, fresh=True)

    return _result(a.data.mean(axis=axis), (a,), bwd, "reduce_mean")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    def bwd(out):
        if a.requires_grad:
            if axis is None:
                g = np.full_like(a.data, out.grad)
            else:
                g = np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape).copy()
            _accum(a, g, fresh=True)

    return _result(a.data.sum(axis=axis), (a,), bwd, "reduce_sum")


def add_bias(a: Tensor, v: Tensor) -> Tensor:
    """Broadcast-add a vector over the rows of a 2-d tensor."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise DimensionError(f"add_bias: shapes {a.data.shape} vs {v.data.shape}")

    def bwd(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g)
        if v.requires_grad:
            _accum(v, g.sum(axis=0), fresh=True)

    return _result(a.data + v.data, (a, v), bwd, "add_bias")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bwd, "reshape")


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap); subgradient 1 where a <= cap, else 0."""
    cap = float(cap)
    mask = a.data <= cap

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * mask, fresh=True)

    return _result(np.minimum(a.data, cap), (a,), bwd, "clamp_max")


def log_softmax_temperature(a: Tensor, temperature: float) -> Tensor:
    """Row-wise log(softmax(a / T)) over the last axis, max-shift stabilized."""
    t = float(temperature)
    if t <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {t}")
    if a.data.shape[-1] < 2:
        raise ParameterError("log_softmax_temperature needs at least 2 classes")
    z = a.data / t
    z = z - z.max(axis=-1, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(out):
        if a.requires_grad:
            soft = np.exp(out_data)
            g = out.grad
            _accum(a, (g - soft * g.sum(axis=-1, keepdims=True)) / t, fresh=True)

    return _result(out_data, (a,), bwd, "log_softmax_temperature")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Backpropagate from a scalar loss; sets .grad on requires_grad tensors.

    The tape is consumed: parent links are cleared, and intermediate
    gradients are dropped so only leaf tensors keep their .grad.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad (tape empty or consumed)")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node._backward_fn(node)
    # consume the tape; free intermediate grads
    for node in topo:
        if node._backward_fn is not None:
            node._backward_fn = None
            node._parents = ()
            node.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state: AdamState, lr: float, names=None):
    """One in-place Adam update with bias correction over parallel lists."""
    if lr <= 0.0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    state.ensure(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"param[{i}]"
            raise OptimizerError(f"non-finite gradient for {name}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = fn(probe)
    if loss.data.size != 1:
        raise OracleError("grad_check: fn must be scalar-valued")
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = orig - eps
            lo = fn(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleError(f"grad_check: fn non-finite near input (coord {i})")
            numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.ravel()
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max()) if err.size else 0.0
