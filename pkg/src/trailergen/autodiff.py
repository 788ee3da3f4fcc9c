"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations applied to it.
Calling :meth:`Tensor.backward` on a scalar result walks the recorded
graph in reverse topological order and accumulates gradients into every
tensor that has ``requires_grad`` set.  Each primitive stores a closure
that maps the output gradient to input gradients, so the graph itself is
nothing more than parent pointers plus those closures.

Conventions used throughout the package:

* float32 is the working precision for training; verification code runs
  under ``precision("float64")``.
* Every primitive checks its output for NaN/Inf and raises
  ``NonFiniteError`` immediately, so numerical blowups surface at the op
  that produced them rather than three modules later.
* Attention masks are boolean arrays (True = attend).  Masking happens
  inside the ``softmax`` primitive, which gives masked positions exactly
  zero weight without ever materialising -inf in a tensor.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "ShapeError",
    "ConfigurationError",
    "DomainError",
    "NonFiniteError",
    "as_tensor",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "power",
    "exp",
    "log",
    "matmul",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "sigmoid",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "causal_mask",
    "padding_mask",
    "multi_head_attention",
    "grad_check",
    "GradCheckEntry",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigurationError(ValueError):
    """A configuration value is structurally invalid (e.g. heads not dividing d)."""


class DomainError(ValueError):
    """An input is outside an operation's mathematical domain."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


# --------------------------------------------------------------------------
# global numeric state: default dtype, grad recording, finite checking
# --------------------------------------------------------------------------

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_finite_checks = True


def default_dtype() -> np.dtype:
    """Return the dtype new leaf tensors are created with."""
    return _default_dtype


def set_default_dtype(dtype) -> np.dtype:
    """Set the default dtype; returns the previous one."""
    global _default_dtype
    old = _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt
    return old


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. ``with precision('float64'): ...``."""
    old = set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _finite_checks
    old = _finite_checks
    _finite_checks = bool(enabled)
    return old


_kink_watch: list | None = None


@contextlib.contextmanager
def watch_kinks():
    """Collect, for every relu evaluated in the block, the distance of its
    nearest input to the kink at 0.

    Finite-difference gradient checks are only meaningful where the function
    is differentiable; callers use this to redraw inputs that land too close
    to the kink (where a central difference measures a subgradient average).
    """
    global _kink_watch
    old = _kink_watch
    _kink_watch = gaps = []
    try:
        yield gaps
    finally:
        _kink_watch = old


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of the original operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple = ()
        self._backward_fn = None

    # -- array-ish accessors ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- gradient machinery ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor through the recorded graph.

        Without an explicit ``grad`` the tensor must be scalar.  The graph is
        walked iteratively (no recursion limit issues on long autoregressive
        chains) and freed afterwards.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        # iterative post-order DFS
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        # free the graph; drop intermediate grads but keep leaf grads
        for node in order:
            if node._backward_fn is not None:
                node._backward_fn = None
                node._parents = ()
                node.grad = None if node is not self else node.grad

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise TypeError("tensor division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor; ``name`` is filled in by ``Module.named_parameters``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.requires_grad = True  # parameters stay trainable even under no_grad
        self.name = name


class Module:
    """Minimal container: walks attributes to find parameters and submodules."""

    def named_parameters(self, prefix: str = ""):
        """Yield ``(path, Parameter)`` pairs in deterministic attribute order."""
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def as_tensor(value) -> Tensor:
    """Wrap a value as a constant Tensor (pass-through if already a Tensor)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _pair(a, b) -> tuple:
    """Coerce a binary op's operands; plain scalars/arrays adopt the tensor
    operand's dtype so float64 graphs are never polluted by float32 constants."""
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and not b_is:
        return a, Tensor(b, dtype=a.dtype)
    if b_is and not a_is:
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    """Build an op result, recording the graph only when a parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


# --------------------------------------------------------------------------
# primitive operations
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward, "neg")


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a fixed scalar exponent."""
    a = as_tensor(a)
    e = float(exponent)
    data = a.data ** e

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * e * a.data ** (e - 1.0))

    return _make(data, (a,), backward, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward, "log")


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_sum_to_shape(gb, b.shape))

    return _make(data, (a, b), backward, "matmul")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=False))

    return _make(data, (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward, "stack")


def _getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _make(data, (a,), backward, "getitem")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to stay stable for large |x|
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    if _kink_watch is not None and a.data.size:
        _kink_watch.append(float(np.abs(a.data).min()))
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward, "relu")


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; masked entries (mask False) get exactly zero weight.

    The mask is applied before normalisation, so unmasked entries renormalise
    over the visible set - identical to adding -inf to masked logits, but no
    non-finite value ever appears in tensor data.
    """
    a = as_tensor(a)
    z = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=axis).all():
            raise ShapeError("softmax mask leaves at least one row fully masked")
        hi = np.where(m, z, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(m, np.exp(z - hi), 0.0)
    else:
        hi = z.max(axis=axis, keepdims=True)
        e = np.exp(z - hi)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data
    hi = z.max(axis=axis, keepdims=True)
    shifted = z - hi
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale/shift must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = gamma.data * normed + beta.data

    def backward(g):
        if a.requires_grad:
            gy = g * gamma.data
            term = gy.mean(axis=-1, keepdims=True)
            proj = (gy * normed).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gy - term - normed * proj))
        if gamma.requires_grad:
            gamma._accumulate(_sum_to_shape(g * normed, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_sum_to_shape(g, beta.shape))

    return _make(data, (a, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------------
# attention and masks
# --------------------------------------------------------------------------


def causal_mask(length: int) -> np.ndarray:
    """Boolean [L, L] mask, True at (i, j) iff j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean [B, max_len] key-validity mask from per-sequence lengths."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths > max_len) or np.any(lengths < 0):
        raise ShapeError(f"lengths {lengths} out of range for max_len={max_len}")
    return np.arange(max_len)[None, :] < lengths[:, None]


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, L, d = x.shape
    dk = d // num_heads
    if x.ndim == 2:
        return transpose(reshape(x, (L, num_heads, dk)), (1, 0, 2))
    if x.ndim == 3:
        b = lead[0]
        return transpose(reshape(x, (b, L, num_heads, dk)), (0, 2, 1, 3))
    raise ShapeError(f"attention input must be 2-D or 3-D, got {x.shape}")


def _merge_heads(x: Tensor) -> Tensor:
    if x.ndim == 3:  # [H, L, dk]
        h, L, dk = x.shape
        return reshape(transpose(x, (1, 0, 2)), (L, h * dk))
    b, h, L, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, L, h * dk))


def multi_head_attention(q, k, v, num_heads: int, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention with head splitting.

    ``q`` is [L_q, d] or [B, L_q, d]; ``k``/``v`` share a key length.  ``mask``
    must broadcast against the score shape ([..., H, L_q, L_k]); True means
    the query may attend to the key.  Projections live in the calling layer;
    this routine is purely the attention core.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d % num_heads != 0:
        raise ConfigurationError(f"model width {d} not divisible by {num_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention operand shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    dk = d // num_heads
    qh, kh, vh = _split_heads(q, num_heads), _split_heads(k, num_heads), _split_heads(v, num_heads)
    kt = transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1, mask=mask)
    out = _merge_heads(matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    """Per-tensor result of a finite-difference comparison."""

    name: str
    max_rel_error: float
    num_checked: int
    num_failed: int


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e.num_failed == 0 for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [
            f"{'PASS' if e.num_failed == 0 else 'FAIL'} {e.name}: "
            f"max_rel_err={e.max_rel_error:.3e} ({e.num_checked} entries)"
            for e in self.entries
        ]
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'} "
                     f"(max_rel_err={self.max_rel_error:.3e}, tol={self.tolerance:.1e})")
        return "\n".join(lines)


def grad_check(f, tensors, h: float = 1e-5, tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its forward pass on every call (it is re-evaluated with
    perturbed inputs).  All checked tensors must be float64; relative error is
    ``|analytic - numeric| / max(1, |analytic|)`` per entry.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ConfigurationError(f"step size h={h} outside [1e-6, 1e-4]")
    tensors = list(tensors)
    if names is None:
        names = [getattr(t, "name", "") or f"tensor{i}" for i, t in enumerate(tensors)]
    for t in tensors:
        if t.dtype != np.float64:
            raise ConfigurationError("grad_check requires float64 tensors; "
                                     "build the model under precision('float64')")
        if not t.requires_grad:
            raise ValueError("grad_check received a tensor with requires_grad=False")

    for t in tensors:
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check objective must be scalar")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective is non-finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    report = GradCheckReport(tolerance=tol)
    with no_grad():
        for t, a, name in zip(tensors, analytic, names):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            worst = 0.0
            failed = 0
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = f().data.item()
                flat[i] = keep - h
                down = f().data.item()
                flat[i] = keep
                numeric = (up - down) / (2.0 * h)
                ref = a.reshape(-1)[i]
                rel = abs(ref - numeric) / max(1.0, abs(ref))
                worst = max(worst, rel)
                failed += rel > tol
            report.entries.append(GradCheckEntry(name, worst, flat.size, failed))
    return report
