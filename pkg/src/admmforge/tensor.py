"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations needed to train small feed-forward conv/dense
networks are provided. Each op records its parents and a backward
closure on the output tensor; ``Tensor.backward`` replays the recorded
tape in reverse topological order. Float32 is the project-wide default
precision; every op preserves the dtype of its inputs so the gradient
check suite can run the same graph at float64.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InputError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense array plus an optional gradient slot and tape record.

    Tensors are treated as immutable once created; the optimizer step is
    the single place that mutates parameter ``data`` in-place.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable parent."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("Tensor + non-Tensor is not supported")
        if self.shape != other.shape:
            raise ShapeError(f"add shapes differ: {self.shape} vs {other.shape}")
        out = _from_op(self.data + other.data, (self, other))
        if out._parents:
            # both parents see the same upstream buffer: copy so neither
            # adopts an array the other may accumulate into
            def _bwd(g, a=self, b=other):
                _accum(a, g.copy())
                _accum(b, g.copy())
            out._backward_fn = _bwd
        return out

    def __mul__(self, scalar):
        s = float(scalar)
        out = _from_op(self.data * s, (self,))
        if out._parents:
            def _bwd(g, a=self, s=s):
                _accum(a, g * s)
            out._backward_fn = _bwd
        return out

    __rmul__ = __mul__

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def _accum(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        # adopt freshly allocated arrays; copy views/mismatched dtypes
        if g.dtype == t.data.dtype and g.base is None and g.flags.owndata:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype)
    else:
        t.grad += g


def _from_op(data: np.ndarray, parents) -> Tensor:
    out = Tensor(data)
    out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = _from_op(a.data @ b.data, (a, b))
    if out._parents:
        def _bwd(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        out._backward_fn = _bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (B,in) times w (out,in), plus optional bias (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: {x.shape} x {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _from_op(y, parents)
    if out._parents:
        def _bwd(g, x=x, w=w, b=b):
            _accum(x, g @ w.data)
            _accum(w, g.T @ x.data)
            if b is not None:
                _accum(b, g.sum(axis=0))
        out._backward_fn = _bwd
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,C,H,W) with w (F,C,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    bsz, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channels differ: input {c}, kernel {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wd, kw, stride, padding)
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw,
                          stride, stride, padding, padding)
    wmat = w.data.reshape(f, c * kh * kw)
    y2 = wmat @ cols                      # (F, B*OH*OW)
    if b is not None:
        if b.shape != (f,):
            raise ShapeError(f"bias shape {b.shape} != ({f},)")
        y2 += b.data[:, None]
    y = np.ascontiguousarray(y2.reshape(f, bsz, oh, ow).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)
    out = _from_op(y, parents)
    if out._parents:
        x_shape = x.shape
        def _bwd(g, x=x, w=w, b=b, cols=cols):
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
            _accum(w, (g2 @ cols.T).reshape(w.shape))
            if b is not None:
                _accum(b, g2.sum(axis=1))
            if x.requires_grad or x._parents:
                dcols = wmat.T @ g2
                _accum(x, kernels.col2im(dcols, x_shape, kh, kw,
                                         stride, stride, padding, padding))
        out._backward_fn = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    out = _from_op(np.maximum(x.data, 0), (x,))
    if out._parents:
        mask = x.data > 0
        def _bwd(g, x=x, mask=mask):
            _accum(x, g * mask)
        out._backward_fn = _bwd
    return out


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with square windows; gradient routes to the argmax only."""
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d expects 4-D input")
    s = kernel if stride is None else stride
    h, w = x.shape[2], x.shape[3]
    if kernel > h or kernel > w:
        raise ShapeError(f"pool window {kernel} larger than input {h}x{w}")
    y, idx = kernels.maxpool_forward(np.ascontiguousarray(x.data), kernel, s)
    out = _from_op(y, (x,))
    if out._parents:
        def _bwd(g, x=x, idx=idx, h=h, w=w):
            _accum(x, kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w))
        out._backward_fn = _bwd
    return out


def flatten(x: Tensor) -> Tensor:
    bsz = x.shape[0]
    out = _from_op(x.data.reshape(bsz, -1), (x,))
    if out._parents:
        def _bwd(g, x=x):
            _accum(x, g.reshape(x.shape))
        out._backward_fn = _bwd
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    Computed via log-sum-exp so it stays finite for logits up to ~1e4.
    """
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (batch, classes) logits")
    labels = np.asarray(labels)
    bsz, ncls = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} != ({bsz},)")
    if labels.min() < 0 or labels.max() >= ncls:
        raise InputError(
            f"label out of range [0, {ncls}): found {int(labels.min())}..{int(labels.max())}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = (lse - z[np.arange(bsz), labels]).mean()
    out = _from_op(np.asarray(loss, dtype=z.dtype), (logits,))
    if out._parents:
        def _bwd(g, logits=logits, z=z, zmax=zmax, labels=labels):
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(bsz), labels] -= 1.0
            _accum(logits, (float(g) / bsz) * p)
        out._backward_fn = _bwd
    return out


def sqsum_diff(w: Tensor, target: np.ndarray) -> Tensor:
    """Scalar sum((w - target)^2); target is a constant."""
    if w.shape != np.shape(target):
        raise ShapeError(f"target shape {np.shape(target)} != {w.shape}")
    d = w.data - target
    out = _from_op(np.asarray((d * d).sum(), dtype=w.data.dtype), (w,))
    if out._parents:
        def _bwd(g, w=w, d=d):
            _accum(w, (2.0 * float(g)) * d)
        out._backward_fn = _bwd
    return out


def sq_sum(w: Tensor) -> Tensor:
    """Scalar sum(w^2)."""
    out = _from_op(np.asarray((w.data * w.data).sum(), dtype=w.data.dtype), (w,))
    if out._parents:
        def _bwd(g, w=w):
            _accum(w, (2.0 * float(g)) * w.data)
        out._backward_fn = _bwd
    return out


def abs_sum(w: Tensor) -> Tensor:
    """Scalar sum(|w|); subgradient sign(w) at zero."""
    out = _from_op(np.asarray(np.abs(w.data).sum(), dtype=w.data.dtype), (w,))
    if out._parents:
        def _bwd(g, w=w):
            _accum(w, float(g) * np.sign(w.data))
        out._backward_fn = _bwd
    return out
