"""Minimal reverse-mode autodiff kernel with the layer primitives the
spectral transformer needs.

Everything runs on plain numpy (float64 by default, switchable to float32).
The graph is implicit: each Tensor remembers its parents and a backward
closure; `backward()` does a reverse topological sweep. Attention is a fused
primitive so the seq x seq weight matrices are the only large intermediates
kept alive.
"""

from __future__ import annotations

import ctypes
import ctypes.util

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, DomainError, InternalError, ShapeError


def _keep_large_allocations_on_heap():
    """Raise glibc's mmap threshold so big attention buffers are recycled.

    By default glibc serves multi-hundred-MB allocations with mmap and returns
    them to the kernel on free, so every training chunk re-faults gigabytes of
    zero pages. Keeping them on the heap lets numpy reuse warm memory.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError, TypeError):
        pass  # non-glibc platform; purely a performance tweak


_keep_large_allocations_on_heap()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)

# Numeric precision for all Tensor data. float64 keeps the finite-difference
# gradient checks tight; float32 roughly halves training wall time because the
# seq x seq attention passes are memory-bandwidth bound.
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _softmax_rows_inplace(a):
    # stable row softmax, written with out= so no extra row-sized copies appear
    m = a.max(axis=-1, keepdims=True)
    np.subtract(a, m, out=a)
    np.exp(a, out=a)
    s = a.sum(axis=-1, keepdims=True)
    np.divide(a, s, out=a)


def _softmax_grad_rows_inplace(d, a, scale):
    # d <- scale * a * (d - sum_j d_j a_j), the softmax Jacobian product
    s = np.einsum("ij,ij->i", d, a)[:, None]
    np.subtract(d, s, out=d)
    np.multiply(d, a, out=d)
    if scale != 1.0:
        d *= np.asarray(scale, dtype=d.dtype)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph; wraps a float ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn):
        out = Tensor(data)
        parents = tuple(p for p in parents if p.requires_grad)
        if parents:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        backward(self)

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * Tensor._lift(other) ** -1.0

    def __rtruediv__(self, other):
        return Tensor._lift(other) * self**-1.0

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ConfigError("tensor exponents are not supported")
        a, p = self, float(exponent)
        out_data = a.data**p

        def bwd(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._result(out_data, (a,), bwd)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other
        try:
            data = np.matmul(a.data, b.data)
        except ValueError as e:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}: {e}") from None

        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._result(data, (a, b), bwd)

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._result(out_data, (a,), lambda g: a._accumulate(g * out_data))

    def log(self):
        a = self
        return Tensor._result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def erf(self):
        a = self

        def bwd(g):
            a._accumulate(g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data * a.data))

        return Tensor._result(_erf(a.data), (a,), bwd)

    def sqrt(self):
        return self**0.5

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(out_data, (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._result(
            a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape))
        )

    def transpose(self, axes):
        a = self
        inv = tuple(np.argsort(axes))
        return Tensor._result(
            a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv))
        )


def backward(loss: Tensor):
    """Accumulate gradients of a scalar `loss` into every requires_grad leaf."""
    if loss.data.size != 1:
        raise DomainError("backward expects a scalar loss")
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            if node.grad is None:
                raise InternalError("graph node visited without gradient")
            node._backward(node.grad)
            if node._parents:
                # interior activations are never inspected; free eagerly
                node.grad = None


# ---------------------------------------------------------------------------
# Layer primitives


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension with the population-variance convention."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xn = xc * (var + eps) ** -0.5
    return xn * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    return x * 0.5 * ((x * _INV_SQRT2).erf() + 1.0)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x - x.data.max(axis=-1, keepdims=True)  # constant shift, no grad
    e = shifted.exp()
    return e / e.sum(axis=-1, keepdims=True)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity at inference or for p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, weights_out: list | None = None) -> Tensor:
    """Fused softmax(q k^T / sqrt(d_head)) v over [..., seq, d_head] inputs.

    Fusing keeps exactly one seq x seq array per head alive for backward.
    `weights_out`, when given, receives the attention weight ndarray.
    """
    d_head = q.shape[-1]
    seq = q.shape[-2]
    scale = 1.0 / np.sqrt(d_head)
    attn = np.matmul(q.data * scale, np.swapaxes(k.data, -1, -2))
    _softmax_rows_inplace(attn.reshape(-1, seq))
    if weights_out is not None:
        weights_out.append(attn)
    out_data = np.matmul(attn, v.data)

    def bwd(g):
        if v.requires_grad:
            v._accumulate(np.matmul(np.swapaxes(attn, -1, -2), g))
        if q.requires_grad or k.requires_grad:
            d_attn = np.matmul(g, np.swapaxes(v.data, -1, -2))
            _softmax_grad_rows_inplace(
                d_attn.reshape(-1, seq), attn.reshape(-1, seq), scale
            )  # d_attn is now d_logits, scale folded in
            if q.requires_grad:
                q._accumulate(np.matmul(d_attn, k.data))
            if k.requires_grad:
                k._accumulate(np.matmul(np.swapaxes(d_attn, -1, -2), q.data))

    return Tensor._result(out_data, (q, k, v), bwd)


def multi_head_attention(x: Tensor, params, n_heads: int, weights_out: list | None = None) -> Tensor:
    """Standard self-attention over [batch, seq, d]; heads split the model dim."""
    batch, seq, d = x.shape
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    d_head = d // n_heads

    def split(t):
        return t.reshape(batch, seq, n_heads, d_head).transpose((0, 2, 1, 3))

    q = split(linear(x, params.wq, params.bq))
    k = split(linear(x, params.wk, params.bk))
    v = split(linear(x, params.wv, params.bv))
    ctx = scaled_dot_attention(q, k, v, weights_out)
    ctx = ctx.transpose((0, 2, 1, 3)).reshape(batch, seq, d)
    return linear(ctx, params.wo, params.bo)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch, via stable log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError("label index outside [0, n_classes)")
    m = logits.data.max(axis=-1, keepdims=True)  # constant shift
    shifted = logits - m
    lse = shifted.exp().sum(axis=-1, keepdims=True).log()
    onehot = np.zeros((batch, n_classes), dtype=_DEFAULT_DTYPE)
    onehot[np.arange(batch), labels] = 1.0
    picked = (shifted * Tensor(onehot)).sum(axis=-1, keepdims=True)
    return (lse - picked).mean()
