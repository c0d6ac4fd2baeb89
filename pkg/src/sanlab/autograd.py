"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps one contiguous float
array, every operation records a backward closure on its output, and
``Tensor.backward()`` walks the tape in reverse topological order.  Only
the operations the detection pipeline needs exist; there is no
broadcasting and no GPU path.  Training runs in float32; gradient-check
tests rebuild the same graphs in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / constant targets)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape.

    ``data`` is row-major; ``grad`` (same shape) is populated by
    ``backward()`` for every tensor with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return detach(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.shape}")
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("tensor", "momentum", "name")

    def __init__(self, data, name: str = ""):
        self.tensor = Tensor(data)
        self.tensor.requires_grad = True  # independent of any no_grad scope
        self.momentum = np.zeros_like(self.tensor.data)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name or '<anon>'}, shape={self.tensor.shape})"


def _result(data: np.ndarray, parents: Sequence[Tensor], make_backward) -> Tensor:
    """Wrap an op result; records the tape only when a parent needs grad."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = make_backward(out)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w].copy()
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with KCkhkw kernels plus bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {cw}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d bias must have shape ({k},), got {b.shape}")
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"conv2d invalid geometry kh={kh} kw={kw} stride={stride} pad={pad}")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{wd} kernel {kh}x{kw} stride {stride} pad {pad}")

    cols = _im2col(x.data, kh, kw, stride, pad)  # (n, c*kh*kw, ho*wo)
    wm = w.data.reshape(k, c * kh * kw)
    out_data = np.matmul(wm, cols).reshape(n, k, ho, wo) + b.data.reshape(1, k, 1, 1)

    def make_backward(out: Tensor):
        def _backward():
            g = out.grad.reshape(n, k, ho * wo)
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2)))
            if w.requires_grad:
                dwm = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
                w._accumulate(dwm.reshape(w.shape))
            if x.requires_grad:
                dcols = np.matmul(wm.T, g)
                x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad))

        return _backward

    return _result(out_data, (x, w, b), make_backward)


# ---------------------------------------------------------------------------
# pointwise and reduction ops


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""

    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(out.grad * (x.data > 0))

        return _backward

    return _result(np.maximum(x.data, 0), (x,), make_backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane: NCHW -> NC11."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(np.broadcast_to(out.grad / (h * w), x.shape))

        return _backward

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), make_backward)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    _require_same_shape("add", a, b)

    def make_backward(out: Tensor):
        def _backward():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(out.grad)

        return _backward

    return _result(a.data + b.data, (a, b), make_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def make_backward(out: Tensor):
        def _backward():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad)

        return _backward

    return _result(a.data - b.data, (a, b), make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (used for constant loss masks)."""
    _require_same_shape("mul", a, b)

    def make_backward(out: Tensor):
        def _backward():
            if a.requires_grad:
                a._accumulate(out.grad * b.data)
            if b.requires_grad:
                b._accumulate(out.grad * a.data)

        return _backward

    return _result(a.data * b.data, (a, b), make_backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""

    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(out.grad * c)

        return _backward

    return _result(x.data * x.data.dtype.type(c), (x,), make_backward)


def scale_by(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (trainable fusion gate)."""
    if alpha.data.size != 1:
        raise ShapeError(f"scale_by expects a scalar multiplier, got shape {alpha.shape}")
    a = alpha.data.reshape(())

    def make_backward(out: Tensor):
        def _backward():
            if x.requires_grad:
                x._accumulate(out.grad * a)
            if alpha.requires_grad:
                alpha._accumulate(np.sum(out.grad * x.data).reshape(alpha.shape).astype(alpha.dtype))

        return _backward

    return _result(x.data * a, (x, alpha), make_backward)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a 0-d scalar tensor."""

    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(np.broadcast_to(out.grad, x.shape))

        return _backward

    return _result(x.data.sum(), (x,), make_backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(out.grad.reshape(x.shape))

        return _backward

    return _result(x.data.reshape(shape), (x,), make_backward)


def concat0(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (RoI batching)."""
    if not tensors:
        raise ShapeError("concat0 needs at least one tensor")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat0 trailing-shape mismatch: {t.shape[1:]} vs {tail}")
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_backward(out: Tensor):
        def _backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._accumulate(out.grad[lo:hi])

        return _backward

    return _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), make_backward)


def replicate_pad(x: Tensor, p: int) -> Tensor:
    """Edge-replication padding of the two spatial axes of an NCHW tensor.

    Keeps constant inputs constant through padded convolutions, so feature
    vectors of constant images are scale-invariant.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"replicate_pad expects NCHW, got {x.shape}")
    if p < 0:
        raise ShapeError(f"pad must be non-negative, got {p}")
    if p == 0:
        return x
    n, c, h, w = x.shape
    ys = np.clip(np.arange(-p, h + p), 0, h - 1)
    xs = np.clip(np.arange(-p, w + p), 0, w - 1)
    out_data = x.data[:, :, ys][:, :, :, xs]

    def make_backward(out: Tensor):
        def _backward():
            g = np.zeros_like(x.data)
            yi, xi = np.meshgrid(ys, xs, indexing="ij")
            np.add.at(g, (slice(None), slice(None), yi, xi), out.grad)
            x._accumulate(g)

        return _backward

    return _result(out_data, (x,), make_backward)


def take0(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows along axis 0; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take0 index out of range for axis of size {x.shape[0]}")

    def make_backward(out: Tensor):
        def _backward():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accumulate(g)

        return _backward

    return _result(x.data[idx], (x,), make_backward)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-d tensor; gradient scatters back."""
    if x.data.ndim != 1:
        raise ShapeError(f"slice1d expects a 1-d tensor, got {x.shape}")

    def make_backward(out: Tensor):
        def _backward():
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            x._accumulate(g)

        return _backward

    return _result(x.data[start:stop].copy(), (x,), make_backward)


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor that blocks all backward flow through it."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# resizing (forward only)


def _resample_axis(size: int, out_size: int, dtype):
    # align-corners-false convention: sample source at (i + 0.5) * size/out - 0.5
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * (size / out_size) - 0.5
    pos = np.clip(pos, 0.0, size - 1.0)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = (pos - lo).astype(dtype)
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w).

    Forward-only by design: the result never participates in gradients
    (it feeds the constant reference-scale pathway).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    d = x.data
    n, c, h, w = d.shape
    y0, y1, fy = _resample_axis(h, out_h, d.dtype)
    x0, x1, fx = _resample_axis(w, out_w, d.dtype)
    top = d[:, :, y0][:, :, :, x0] * (1 - fx) + d[:, :, y0][:, :, :, x1] * fx
    bot = d[:, :, y1][:, :, :, x0] * (1 - fx) + d[:, :, y1][:, :, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return Tensor(out)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[u] over the batch; max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K+1) logits, got {logits.shape}")
    n, k1 = logits.shape
    if len(labels) != n:
        raise ShapeError(f"softmax_cross_entropy got {n} rows but {len(labels)} labels")
    idx = np.asarray(labels, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= k1):
        bad = idx[(idx < 0) | (idx >= k1)][0]
        raise ShapeError(f"label {bad} out of range [0, {k1 - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_p = z - np.log(sez)
    loss = -log_p[np.arange(n), idx].mean()

    def make_backward(out: Tensor):
        def _backward():
            p = ez / sez
            p[np.arange(n), idx] -= 1
            logits._accumulate(out.grad * p / n)

        return _backward

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), make_backward)


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style robust penalty: 0.5 x^2 inside |x|<1, |x|-0.5 outside."""
    a = np.abs(x.data)
    out_data = np.where(a < 1, 0.5 * x.data * x.data, a - 0.5)

    def make_backward(out: Tensor):
        def _backward():
            x._accumulate(out.grad * np.clip(x.data, -1, 1))

        return _backward

    return _result(out_data.astype(x.dtype), (x,), make_backward)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In-place SGD update with momentum and decoupled-from-nothing weight decay.

    buf <- momentum * buf + grad + weight_decay * w;  w <- w - lr * buf.
    Gradients are consumed (reset to None).
    """
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise GraphError(f"sgd_step: parameter {p.name or '<anon>'} has no gradient")
    for p in params:
        g = p.tensor.grad
        if weight_decay:
            g = g + weight_decay * p.tensor.data
        p.momentum *= momentum
        p.momentum += g
        p.tensor.data -= lr * p.momentum
        p.tensor.grad = None
