"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Every operation that produces a
tensor records its parent tensors and a closure that maps the output
gradient to gradient contributions for each parent.  :func:`backward`
replays those closures in reverse creation order, which is a valid
topological order because a tensor can only be built from tensors that
already exist.

Conventions relied on throughout the package:

* all computation is float64; construction rejects non-finite input,
* ``relu`` uses subgradient 0 at 0; ``maxpool2`` routes ties to the first
  cell of each window in row-major order,
* a tensor marked with :meth:`Tensor.retain_grad` keeps its gradient after
  backward even though it is not a leaf (how score gradients are read at
  the similarity inputs without making them leaves),
* repeated ``backward`` calls on an intact graph accumulate gradients,
* forward results are deterministic functions of their inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, NumericError

_SEQ = itertools.count()
_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (forward only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array participating in the differentiation graph.

    Leaves are tensors with no parents; they receive gradients when
    ``requires_grad`` is set.  Non-leaf tensors carry an operation tag,
    their parents and the backward closure; together with the monotone
    ``_seq`` creation counter these form the (implicit, append-only)
    graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents",
                 "_backward", "_retain", "_seq")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward
        self._retain = False
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Register this tensor as a watch-point: keep its gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_values(shape: Sequence[int], values, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from an explicit shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"non-positive dimension in shape {shape}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    n = int(np.prod(shape)) if shape else 1
    if flat.size != n:
        raise ShapeError(f"shape {shape} needs {n} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite values in tensor construction")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def parameter(data, requires_grad: bool = True) -> Tensor:
    """Leaf tensor intended as a trainable parameter."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _make(data, op: str, parents: tuple, backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents,
                      backward=backward)
    return Tensor(data, op=op)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf and watch-point.

    ``root`` must be a scalar (size-1) tensor.  Nodes are visited exactly
    once, in reverse creation order.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._retain or (not t.parents and t.requires_grad):
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, pg in zip(t.parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), back)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; unlike :func:`mul` this rejects broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"elementwise_mul shapes {a.data.shape} vs {b.data.shape}")
    return mul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), back)


def transpose2d(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a matrix")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(orig),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.maximum(a.data, 0.0)
    return _make(out, "relu", (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so no overflow up to |x|~1e308
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # 0 at 0: subgradient 0
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.data.shape
    return _make(np.asarray(a.data.mean()), "mean", (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two [N, D] matrices -> [N]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError("rowwise_dot expects equal [N, D] shapes")
    out = np.einsum("nd,nd->n", a.data, b.data)

    def back(g):
        return g[:, None] * b.data, g[:, None] * a.data

    return _make(out, "rowwise_dot", (a, b), back)


def rowwise_l2norm(a: Tensor, guard: float = 1e-12) -> Tensor:
    """Euclidean norm of each row of an [N, D] matrix -> [N].

    Rows with norm below ``guard`` get zero gradient (the norm is not
    differentiable at 0).
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("rowwise_l2norm expects [N, D]")
    n = np.sqrt(np.einsum("nd,nd->n", a.data, a.data))
    safe = np.where(n > guard, n, 1.0)
    ok = n > guard

    def back(g):
        return ((g * ok)[:, None] * a.data / safe[:, None],)

    return _make(n, "rowwise_l2norm", (a,), back)


def l2_normalize_rows(a: Tensor, guard: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; rows with norm < guard become zero rows."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize_rows expects [N, D]")
    n = np.sqrt(np.einsum("nd,nd->n", a.data, a.data))
    ok = n > guard
    safe = np.where(ok, n, 1.0)
    u = np.where(ok[:, None], a.data / safe[:, None], 0.0)

    def back(g):
        # d(u)/d(a) = (I - u u^T) / |a| per row
        gu = g * ok[:, None]
        proj = np.einsum("nd,nd->n", gu, u)
        return ((gu - proj[:, None] * u) / safe[:, None],)

    return _make(u, "l2_normalize_rows", (a,), back)


def rowwise_cosine(a: Tensor, b: Tensor, guard: float = 1e-12) -> Tensor:
    """Cosine similarity of corresponding rows of two [N, D] matrices.

    Rows where either operand has norm < guard yield similarity 0 with zero
    gradient, so a fully gated-off projection cannot blow up the division.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError("rowwise_cosine expects equal [N, D] shapes")
    na = np.sqrt(np.einsum("nd,nd->n", a.data, a.data))
    nb = np.sqrt(np.einsum("nd,nd->n", b.data, b.data))
    ok = (na > guard) & (nb > guard)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    d = np.einsum("nd,nd->n", a.data, b.data)
    c = np.where(ok, d / (sa * sb), 0.0)

    def back(g):
        gm = g * ok
        ga = gm[:, None] * (b.data / (sa * sb)[:, None]
                            - (c / (sa * sa))[:, None] * a.data)
        gb = gm[:, None] * (a.data / (sa * sb)[:, None]
                            - (c / (sb * sb))[:, None] * b.data)
        return ga, gb

    return _make(c, "rowwise_cosine", (a, b), back)


def take_rows(a: Tensor, idx) -> Tensor:
    """Differentiable gather of rows (first axis) by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = a.data[idx]
    shape = a.data.shape

    def back(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(out, "take_rows", (a,), back)


def stack_cols(cols: Sequence[Tensor]) -> Tensor:
    """Stack K same-length vectors into an [N, K] matrix."""
    cols = [as_tensor(c) for c in cols]
    out = np.stack([c.data for c in cols], axis=1)

    def back(g):
        return tuple(g[:, i] for i in range(len(cols)))

    return _make(out, "stack_cols", tuple(cols), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along the first axis."""
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(out, "concat_rows", tuple(parts), back)


# ---------------------------------------------------------------------------
# Spatial operations.  The cores work channels-last ([B, H, W, C]) so the
# im2col patch matrix and every reshape around the GEMMs are copy-free; the
# public [C, H, W] entry points are thin permute wrappers over the cores.
# ---------------------------------------------------------------------------

def permute(a: Tensor, axes: tuple) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,),
                 lambda g: (g.transpose(inverse),))


def conv2d_nhwc(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
                bias: Tensor | None = None) -> Tensor:
    """Convolution core over [B, H, W, C] input, [O, C, kh, kw] kernel.

    ``bias`` (shape [O]) is fused into the GEMM epilogue when given.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    b, h, w, c = x.data.shape
    cout, cin, kh, kw = kernel.data.shape
    if cin != c:
        raise ShapeError(f"conv2d channels: input {c}, kernel expects {cin}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((b, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride,
                                        j:j + stride * wo:stride, :]
    cmat = cols.reshape(b * ho * wo, kh * kw * c)
    kmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, cout)
    omat = cmat @ kmat
    if bias is not None:
        omat += bias.data
    out = omat.reshape(b, ho, wo, cout)

    def back(g):
        gmat = g.reshape(b * ho * wo, cout)
        gk = None
        if kernel.requires_grad:
            gk = (cmat.T @ gmat).reshape(kh, kw, c, cout).transpose(3, 2, 0, 1).copy()
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat.T).reshape(b, ho, wo, kh, kw, c)
            gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride,
                        j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        if bias is None:
            return gx, gk
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv2d", parents, back)


def maxpool2_nhwc(x: Tensor) -> Tensor:
    """2x2 max pool core over [B, H, W, C]; ties go to the first window cell
    in row-major order."""
    x = as_tensor(x)
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    nw = xd[:, 0::2, 0::2, :]
    ne = xd[:, 0::2, 1::2, :]
    sw = xd[:, 1::2, 0::2, :]
    se = xd[:, 1::2, 1::2, :]
    out = np.maximum(np.maximum(nw, ne), np.maximum(sw, se))

    def back(g):
        gx = np.zeros((b, h, w, c))
        taken = nw == out
        gx[:, 0::2, 0::2, :] = g * taken
        m = (ne == out) & ~taken
        gx[:, 0::2, 1::2, :] = g * m
        taken = taken | m
        m = (sw == out) & ~taken
        gx[:, 1::2, 0::2, :] = g * m
        taken = taken | m
        gx[:, 1::2, 1::2, :] = g * ((se == out) & ~taken)
        return (gx,)

    return _make(out, "maxpool2", (x,), back)


def global_avg_pool_nhwc(x: Tensor) -> Tensor:
    """Spatial mean core: [B, H, W, C] -> [B, C]."""
    x = as_tensor(x)
    b, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def back(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (b, h, w, c)).copy(),)

    return _make(out, "global_avg_pool", (x,), back)


def _to_nhwc(x: Tensor) -> tuple[Tensor, bool]:
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ShapeError(f"expected [C, H, W] or [B, C, H, W], got {x.data.shape}")
    return permute(x, (0, 2, 3, 1)), single


def _from_nhwc(x: Tensor, single: bool) -> Tensor:
    out = permute(x, (0, 3, 1, 2))
    if single:
        out = reshape(out, out.data.shape[1:])
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [C, H, W] or [B, C, H, W]; ``kernel`` is [C_out, C_in, kh, kw].
    Output spatial side is floor((side + 2*pad - k) / stride) + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.data.ndim != 4:
        raise ShapeError("conv2d kernel must be [O, C, kh, kw]")
    nhwc, single = _to_nhwc(x)
    return _from_nhwc(conv2d_nhwc(nhwc, kernel, stride=stride, pad=pad), single)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route to the first window cell."""
    nhwc, single = _to_nhwc(as_tensor(x))
    return _from_nhwc(maxpool2_nhwc(nhwc), single)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [*, C, H, W] -> [*, C]."""
    nhwc, single = _to_nhwc(as_tensor(x))
    out = global_avg_pool_nhwc(nhwc)
    if single:
        out = reshape(out, (out.data.shape[1],))
    return out


# ---------------------------------------------------------------------------
# Losses and normalization kernels
# ---------------------------------------------------------------------------

def bce_with_logits(s: Tensor, y) -> Tensor:
    """Elementwise binary cross entropy from logits, in the log domain.

    loss = max(s, 0) - s*y + log(1 + exp(-|s|)); gradient is sigmoid(s) - y.
    """
    s = as_tensor(s)
    yd = np.asarray(y, dtype=np.float64)
    out = np.maximum(s.data, 0.0) - s.data * yd + np.log1p(np.exp(-np.abs(s.data)))

    def back(g):
        return (g * (_stable_sigmoid(s.data) - yd),)

    return _make(out, "bce_with_logits", (s,), back)


def batchnorm_cols_train(x: Tensor, eps: float = 1e-5):
    """Standardize each column of [N, D] by its batch mean/population variance.

    Returns (normalized tensor, batch_mean, batch_var); the statistics are
    plain arrays for the caller's running-average update.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("batchnorm_cols_train expects [N, D]")
    n = x.data.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)  # population variance
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def back(g):
        gsum = g.sum(axis=0)
        gdot = (g * xhat).sum(axis=0)
        return (inv * (g - gsum / n - xhat * gdot / n),)

    t = _make(xhat, "batchnorm_train", (x,), back)
    return t, mu, var


def batchnorm_cols_eval(x: Tensor, mean: np.ndarray, var: np.ndarray,
                        eps: float = 1e-5) -> Tensor:
    """Standardize each column of [N, D] by fixed (running) statistics."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("batchnorm_cols_eval expects [N, D]")
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    out = (x.data - np.asarray(mean)) * inv
    return _make(out, "batchnorm_eval", (x,), lambda g: (g * inv,))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Compare autodiff gradient of scalar f(x) against central differences.

    Returns the max elementwise relative error, with the relative error of a
    pair (a, b) defined as |a - b| / max(|a|, |b|, 1e-8).  The caller is
    responsible for evaluating away from relu/maxpool kinks.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    g = probe.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += eps
            fp = f(Tensor(bumped.reshape(x.data.shape))).item()
            bumped[i] -= 2 * eps
            fm = f(Tensor(bumped.reshape(x.data.shape))).item()
            fd[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-8)
    return float(np.max(np.abs(fd - g) / denom))
