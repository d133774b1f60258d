"""Reverse-mode automatic differentiation over dense float32 numpy arrays.

The graph lives on the tensors themselves: every differentiable op returns a
Tensor holding its parents and a closure that maps the output gradient to the
parent gradients. Calling ``backward()`` on a scalar walks the graph once in
reverse topological order and accumulates into ``.grad`` (a float32 ndarray,
or None for tensors the loss never touched).

All forward values and gradients are float32. There is no implicit
broadcasting: the op set is exactly what the models in this package need, and
each op validates shapes up front so mistakes fail loudly at the call site.
"""

from __future__ import annotations

import contextlib
import math
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateMaskError, NonFiniteError, ShapeError

_grad_enabled = True
_finite_checks = True

_MASK_FILL = -1e9  # softmax(exp(-1e9)) underflows to exactly 0.0


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """A float32 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, "new_tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

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
        """A view of the same data cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward on a tensor with no graph attached")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float32)
                if g.shape != parent.data.shape:
                    raise ContractError(
                        f"op '{node._op}' produced gradient of shape {g.shape} "
                        f"for parent of shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    # Own the buffer: backward closures may hand the same
                    # array to several parents (add returns (g, g)).
                    parent.grad = np.array(g, dtype=np.float32)
                else:
                    parent.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    # Minimal operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    """Wrap an op output, attaching the graph only when gradients can flow."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (g * b.data, g * a.data))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _result(a.data * np.float32(s), (a,), "scale",
                   lambda g: (g * np.float32(s),))


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data + np.float32(c), (a,), "add_const", lambda g: (g,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient passes only where the input was inside."""
    a = _as_tensor(a)
    if not lo < hi:
        raise ContractError(f"clamp: lo={lo} must be < hi={hi}")
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float32)
    return _result(out, (a,), "clamp", lambda g: (g * inside,))


def gelu(a) -> Tensor:
    """Exact-erf gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * np.float32(1.0 / math.sqrt(2.0))))
    cdf = cdf.astype(np.float32)
    out = x * cdf
    inv_sqrt_2pi = np.float32(1.0 / math.sqrt(2.0 * math.pi))

    def backward(g):
        pdf = inv_sqrt_2pi * np.exp(np.float32(-0.5) * x * x)
        return (g * (cdf + x * pdf),)

    return _result(out, (a,), "gelu", backward)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    return _result(a.data.reshape(shape), (a,), "reshape",
                   lambda g: (g.reshape(a.data.shape),))


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects 2-D, got {a.data.shape}")
    return _result(np.ascontiguousarray(a.data.T), (a,), "transpose2d",
                   lambda g: (g.T,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError("concat: rank mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), "concat", backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise IndexError(f"narrow: [{start}, {start + length}) outside axis of size {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), "narrow", backward)


def chw_to_rows(a) -> Tensor:
    """(c, h, w) -> (h*w, c) with rows in raster order."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"chw_to_rows expects (c, h, w), got {a.data.shape}")
    c, h, w = a.data.shape
    out = np.ascontiguousarray(a.data.reshape(c, h * w).T)
    return _result(out, (a,), "chw_to_rows",
                   lambda g: (np.ascontiguousarray(g.T).reshape(c, h, w),))


def rows_to_chw(a, h: int, w: int) -> Tensor:
    """(h*w, c) -> (c, h, w); inverse of chw_to_rows."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.data.shape[0] != h * w:
        raise ShapeError(f"rows_to_chw: got {a.data.shape}, expected ({h * w}, c)")
    c = a.data.shape[1]
    out = np.ascontiguousarray(a.data.T).reshape(c, h, w)
    return _result(out, (a,), "rows_to_chw",
                   lambda g: (np.ascontiguousarray(g.reshape(c, h * w).T),))


def split_heads(a, n_heads: int) -> Tensor:
    """(n, h*dh) -> (h, n, dh) for multi-head attention."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.data.shape[1] % n_heads:
        raise ShapeError(f"split_heads: {a.data.shape} not divisible into {n_heads} heads")
    n, d = a.data.shape
    dh = d // n_heads
    out = np.ascontiguousarray(a.data.reshape(n, n_heads, dh).transpose(1, 0, 2))
    return _result(out, (a,), "split_heads",
                   lambda g: (np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(n, d),))


def merge_heads(a) -> Tensor:
    """(h, n, dh) -> (n, h*dh); inverse of split_heads."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"merge_heads expects (h, n, dh), got {a.data.shape}")
    nh, n, dh = a.data.shape
    out = np.ascontiguousarray(a.data.transpose(1, 0, 2)).reshape(n, nh * dh)
    return _result(out, (a,), "merge_heads",
                   lambda g: (np.ascontiguousarray(g.reshape(n, nh, dh).transpose(1, 0, 2)),))


def batch_split_heads(a, batch: int, n_heads: int) -> Tensor:
    """(batch*n, h*dh) stacked rows -> (batch*h, n, dh) attention operands."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.data.shape[0] % batch or a.data.shape[1] % n_heads:
        raise ShapeError(
            f"batch_split_heads: {a.data.shape} with batch={batch}, heads={n_heads}"
        )
    bn, d = a.data.shape
    n = bn // batch
    dh = d // n_heads
    out = np.ascontiguousarray(
        a.data.reshape(batch, n, n_heads, dh).transpose(0, 2, 1, 3)
    ).reshape(batch * n_heads, n, dh)

    def backward(g):
        back = g.reshape(batch, n_heads, n, dh).transpose(0, 2, 1, 3)
        return (np.ascontiguousarray(back).reshape(bn, d),)

    return _result(out, (a,), "batch_split_heads", backward)


def batch_merge_heads(a, batch: int) -> Tensor:
    """(batch*h, n, dh) -> (batch*n, h*dh); inverse of batch_split_heads."""
    a = _as_tensor(a)
    if a.ndim != 3 or a.data.shape[0] % batch:
        raise ShapeError(f"batch_merge_heads: {a.data.shape} with batch={batch}")
    bh, n, dh = a.data.shape
    n_heads = bh // batch
    out = np.ascontiguousarray(
        a.data.reshape(batch, n_heads, n, dh).transpose(0, 2, 1, 3)
    ).reshape(batch * n, n_heads * dh)

    def backward(g):
        back = g.reshape(batch, n, n_heads, dh).transpose(0, 2, 1, 3)
        return (np.ascontiguousarray(back).reshape(bh, n, dh),)

    return _result(out, (a,), "batch_merge_heads", backward)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=np.float32)
    return _result(out, (a,), "sum_all",
                   lambda g: (np.full_like(a.data, np.float32(g)),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    inv = np.float32(1.0 / a.data.size)
    out = np.asarray(a.data.mean(), dtype=np.float32)
    return _result(out, (a,), "mean_all",
                   lambda g: (np.full_like(a.data, np.float32(g) * inv),))


def mse(a, b) -> Tensor:
    """Mean squared error between two same-shape tensors (scalar)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    out = np.asarray(np.mean(diff * diff), dtype=np.float32)
    coeff = np.float32(2.0 / a.data.size)

    def backward(g):
        gd = np.float32(g) * coeff * diff
        return (gd, -gd)

    return _result(out, (a, b), "mse", backward)


def cross_entropy_logits(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (n, v), got {logits.data.shape}")
    idx = np.asarray(targets)
    if idx.ndim != 1 or idx.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy_logits: {idx.shape} targets for {logits.data.shape} logits"
        )
    n, v = logits.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError("cross_entropy_logits: target outside [0, vocab)")
    idx = idx.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    lse = np.log(denom[:, 0]) + zmax[:, 0]
    nll = lse - z[np.arange(n), idx]
    out = np.asarray(nll.mean(), dtype=np.float32)

    def backward(g):
        gp = probs.copy()
        gp[np.arange(n), idx] -= 1.0
        return (gp * (np.float32(g) / np.float32(n)),)

    return _result(out, (logits,), "cross_entropy_logits", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _result(out, (a, b), "matmul", backward)


def add_row_bias(a, bias) -> Tensor:
    """(n, d) + (d,) broadcast over rows."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.ndim != 2 or bias.ndim != 1 or a.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(f"add_row_bias: {a.data.shape} + {bias.data.shape}")
    return _result(a.data + bias.data, (a, bias), "add_row_bias",
                   lambda g: (g, g.sum(axis=0)))


def add_channel_bias(a, bias) -> Tensor:
    """(c, h, w) + (c,) broadcast over the spatial grid."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.ndim != 3 or bias.ndim != 1 or a.data.shape[0] != bias.data.shape[0]:
        raise ShapeError(f"add_channel_bias: {a.data.shape} + {bias.data.shape}")
    return _result(a.data + bias.data[:, None, None], (a, bias), "add_channel_bias",
                   lambda g: (g, g.sum(axis=(1, 2))))


def embed(table, indices) -> Tensor:
    """Row gather from a (v, d) table; backward scatter-adds."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embed expects a 2-D table, got {table.data.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"embed expects 1-D indices, got {idx.shape}")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embed: index outside [0, {v})")
    idx = idx.astype(np.int64)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx].copy(), (table,), "embed", backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta {gamma.data.shape}/{beta.data.shape} vs last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), "layer_norm", backward)


def attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention.

    Accepts (n, d) operands or (b, n, d) batches sharing one boolean mask of
    shape (n_q, n_k) where True marks a visible key. Blocked positions receive
    a -1e9 score, which underflows to an exactly-zero probability, so masked
    and truncated computations agree. A query row with no visible key would
    silently become a uniform average, so it raises instead.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(
            f"attention: ranks {q.ndim}/{k.ndim}/{v.ndim} (want all 2 or all 3)"
        )
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape[:-1] != v.data.shape[:-1]:
        raise ShapeError(
            f"attention: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    if q.ndim == 3 and q.data.shape[0] != k.data.shape[0]:
        raise ShapeError("attention: batch sizes differ")

    d = q.data.shape[-1]
    s = np.float32(1.0 / math.sqrt(d))
    if q.ndim == 2:
        scores = (q.data @ k.data.T) * s
    else:
        scores = np.einsum("bid,bjd->bij", q.data, k.data) * s

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.data.shape[-2], k.data.shape[-2]):
            raise ShapeError(
                f"attention: mask {mask.shape} vs scores "
                f"({q.data.shape[-2]}, {k.data.shape[-2]})"
            )
        if not mask.any(axis=1).all():
            raise DegenerateMaskError("attention: a query row has no visible key")
        scores = np.where(mask, scores, np.float32(_MASK_FILL))

    smax = scores.max(axis=-1, keepdims=True)
    p = np.exp(scores - smax)
    p /= p.sum(axis=-1, keepdims=True)

    if q.ndim == 2:
        out = p @ v.data
    else:
        out = np.einsum("bij,bjd->bid", p, v.data)

    def backward(g):
        if q.ndim == 2:
            dv = p.T @ g
            dp = g @ v.data.T
        else:
            dv = np.einsum("bij,bid->bjd", p, g)
            dp = np.einsum("bid,bjd->bij", g, v.data)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        if q.ndim == 2:
            dq = (ds @ k.data) * s
            dk = (ds.T @ q.data) * s
        else:
            dq = np.einsum("bij,bjd->bid", ds, k.data) * s
            dk = np.einsum("bij,bid->bjd", ds, q.data) * s
        return (dq, dk, dv)

    return _result(out.astype(np.float32, copy=False), (q, k, v), "attention", backward)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv3x3(x, weight, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on a (cin, h, w) map."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv3x3 expects (cin, h, w), got {x.data.shape}")
    cin, h, w = x.data.shape
    if weight.ndim != 4 or weight.data.shape[1:] != (cin, 3, 3):
        raise ShapeError(f"conv3x3: weight {weight.data.shape} vs input cin={cin}")
    cout = weight.data.shape[0]
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv3x3: bias {bias.data.shape} vs cout={cout}")

    cols = _im2col3(x.data)  # (cin*9, h*w)
    w2 = weight.data.reshape(cout, cin * 9)
    out = (w2 @ cols + bias.data[:, None]).reshape(cout, h, w)

    def backward(g):
        g2 = g.reshape(cout, h * w)
        gb = g2.sum(axis=1)
        gw = (g2 @ cols.T).reshape(weight.data.shape)
        gx = _col2im3(w2.T @ g2, cin, h, w)
        return (gx, gw, gb)

    return _result(out, (x, weight, bias), "conv3x3", backward)


def _im2col3(x: np.ndarray) -> np.ndarray:
    cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 9, h, w), dtype=np.float32)
    n = 0
    for di in range(3):
        for dj in range(3):
            cols[:, n] = xp[:, di:di + h, dj:dj + w]
            n += 1
    return cols.reshape(cin * 9, h * w)


def _col2im3(cols: np.ndarray, cin: int, h: int, w: int) -> np.ndarray:
    gxp = np.zeros((cin, h + 2, w + 2), dtype=np.float32)
    gc = cols.reshape(cin, 9, h, w)
    n = 0
    for di in range(3):
        for dj in range(3):
            gxp[:, di:di + h, dj:dj + w] += gc[:, n]
            n += 1
    return np.ascontiguousarray(gxp[:, 1:h + 1, 1:w + 1])


@lru_cache(maxsize=None)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights, align-corners-false, edge-clamped.

    Exact identity when sizes match; a single full-weight tap when n_in == 1.
    """
    m = np.zeros((n_out, n_in), dtype=np.float32)
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), float(n_in - 1))
        lo = int(math.floor(src))
        frac = src - lo
        if lo + 1 <= n_in - 1 and frac > 0.0:
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
        else:
            m[i, lo] = 1.0
    return m


@lru_cache(maxsize=None)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) exact mean-pooling weights over fractional cell overlap."""
    if n_out > n_in:
        raise ShapeError(f"area resize cannot enlarge ({n_in} -> {n_out})")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        lo = i * ratio
        hi = (i + 1) * ratio
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / ratio
    return m.astype(np.float32)


def _resize(x: Tensor, out_hw, matrix_fn, op: str) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"{op} expects (c, h, w), got {x.data.shape}")
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ShapeError(f"{op}: target size ({oh}, {ow})")
    _, h, w = x.data.shape
    wh = matrix_fn(h, oh)
    ww = matrix_fn(w, ow)
    out = np.einsum("oj,cjk,pk->cop", wh, x.data, ww, optimize=True)

    def backward(g):
        return (np.einsum("oj,cop,pk->cjk", wh, g, ww, optimize=True),)

    return _result(out.astype(np.float32, copy=False), (x,), op, backward)


def resize_bilinear(x, out_hw) -> Tensor:
    """Bilinear resize of a (c, h, w) map (half-pixel centres, edge-clamped)."""
    return _resize(_as_tensor(x), out_hw, _bilinear_matrix, "resize_bilinear")


def resize_area(x, out_hw) -> Tensor:
    """Exact area-mean downsample of a (c, h, w) map (never enlarges)."""
    return _resize(_as_tensor(x), out_hw, _area_matrix, "resize_area")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_gradient(fn, tensors, index: int, h: float = 5e-3) -> np.ndarray:
    """Central-difference gradient of scalar fn(*tensors) w.r.t. tensors[index].

    Perturbs the float32 storage in place and differences in float64. The
    step is a compromise: small enough that truncation error stays below the
    check tolerance, large enough that float32 round-off in the loss does
    not drown the signal (loss values should stay O(1) for that reason).
    """
    target = tensors[index]
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = float(fn(*tensors).data)
            flat[i] = saved - h
            lo = float(fn(*tensors).data)
            flat[i] = saved
            grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(target.data.shape)


def gradcheck(fn, tensors, h: float = 5e-3) -> float:
    """Worst relative disagreement between analytic and numeric gradients.

    fn must map the given tensors to a scalar Tensor. Returns
    max over differentiable inputs of ||analytic − numeric|| /
    max(||analytic||, ||numeric||, 1), so a disconnected input (both sides
    zero) scores 0 rather than dividing by nothing.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn(*tensors)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = numeric_gradient(fn, tensors, i, h)
        denom = max(float(np.linalg.norm(ana)), float(np.linalg.norm(num)), 1.0)
        err = float(np.linalg.norm(ana.astype(np.float64) - num)) / denom
        worst = max(worst, err)
    return worst
