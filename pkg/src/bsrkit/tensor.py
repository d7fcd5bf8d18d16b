"""Dense tensors with a small reverse-mode differentiation engine.

Tensors wrap a contiguous numpy array (float32 unless a float64 array is
explicitly requested, which the finite-difference oracle relies on). Every
operation whose inputs require gradients records a node holding its inputs
and a backward rule; :func:`backward` orders those nodes into a :class:`Tape`
and replays it in reverse.

Images and activations use NCHW layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError, UsageError

__all__ = [
    "Tensor", "Tape", "as_tensor", "backward", "build_tape", "finite_diff_grad",
    "add", "sub", "mul_scalar", "matmul", "conv2d", "relu", "max_pool2d",
    "avg_pool2d", "global_avg_pool2d", "flatten", "dense", "log_softmax",
    "nll_loss",
]

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array that can take part in differentiation.

    ``grad`` is populated by :func:`backward` on every leaf with
    ``requires_grad`` reachable from the loss; intermediate results keep
    their gradient only when ``retain_grad`` is set.
    """

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_inputs", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        if np.dtype(dtype) not in [np.dtype(t) for t in _FLOAT_TYPES]:
            raise UsageError(f"unsupported dtype {dtype}")
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.retain_grad = False
        self._inputs: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor-tensor products are not supported; use matmul")
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` and record ``rule`` when any input needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = rule
    return out


def _check_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _elementwise_operands(a, b):
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and b_is:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        _check_dtype(a, b)
        return a, b
    if a_is:
        return a, Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if b_is:
        return Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype), b
    raise UsageError("at least one operand must be a Tensor")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operands receive the summed gradient
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _elementwise_operands(a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _elementwise_operands(a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _result(a.data - b.data, (a, b), rule)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _check_dtype(a, b)
    A, B = a.data, b.data

    def rule(g):
        ga = g @ B.T if a.requires_grad else None
        gb = A.T @ g if b.requires_grad else None
        return ga, gb

    return _result(A @ B, (a, b), rule)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match weight {weight.shape}")
    _check_dtype(x, weight, *([bias] if bias is not None else []))
    X, W = x.data, weight.data
    out = X @ W.T
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gx = g @ W if x.requires_grad else None
        gw = g.T @ X if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, inputs, rule)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (F, C, kh, kw) weight, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d kernel {weight.shape} larger than padded input {(B, C, Hp, Wp)}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    _check_dtype(x, weight, *([bias] if bias is not None else []))

    # im2col from kh*kw shifted slices of a channels-last copy; column order is (i, j, c)
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xh = np.ascontiguousarray(xh)
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    cols = np.empty((B, Ho, Wo, kh * kw * C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * C
            cols[..., k:k + C] = xh[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    Wm = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(F, kh * kw * C)
    out = cols @ Wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (gm @ Wm).reshape(B, Ho, Wo, kh * kw * C)
            dxh = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    k = (i * kw + j) * C
                    dxh[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += \
                        dcols[..., k:k + C]
            gx = dxh[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, inputs, rule)


# ---------------------------------------------------------------------------
# pooling and reshaping
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2d window {size} larger than input {x.shape}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    win = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros((B, C, Ho, Wo, size * size), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :Ho * size, :Wo * size] = (
            gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size))
        return (gx,)

    return _result(out, (x,), rule)


def avg_pool2d(x: Tensor, size: int | None = None) -> Tensor:
    """Non-overlapping average pooling; ``size=None`` averages the whole plane."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    if size is None:
        return global_avg_pool2d(x)
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"avg_pool2d window {size} larger than input {x.shape}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    out = crop.reshape(B, C, Ho, size, Wo, size).mean(axis=(3, 5))
    scale = x.dtype.type(1.0 / (size * size))

    def rule(g):
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :Ho * size, :Wo * size] = np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3)
        return (gx,)

    return _result(out, (x,), rule)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Average over the spatial plane: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    scale = x.dtype.type(1.0 / (H * W))

    def rule(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (B, C, H, W)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), rule)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(z: Tensor) -> Tensor:
    if z.data.ndim != 2:
        raise ShapeError(f"log_softmax expects (batch, classes), got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (z,), rule)


def nll_loss(logp: Tensor, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` classes; ``reduction`` is ``mean`` or ``sum``."""
    if logp.data.ndim != 2:
        raise ShapeError(f"nll_loss expects (batch, classes), got {logp.shape}")
    y = np.asarray(target, dtype=np.int64).reshape(-1)
    B, K = logp.shape
    if y.shape[0] != B:
        raise ShapeError(f"nll_loss target length {y.shape[0]} does not match batch {B}")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ShapeError(f"nll_loss targets outside [0, {K})")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    picked = logp.data[np.arange(B), y]
    total = -picked.sum(dtype=logp.dtype)
    scale = logp.dtype.type(1.0 / B if reduction == "mean" else 1.0)

    def rule(g):
        gz = np.zeros((B, K), dtype=logp.dtype)
        gz[np.arange(B), y] = -g.reshape(()) * scale
        return (gz,)

    return _result(np.asarray(total * scale, dtype=logp.dtype), (logp,), rule)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    ops: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ops)


def build_tape(root: Tensor) -> Tape:
    """Order the recorded operations reachable from ``root`` topologically."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return Tape([t for t in order if t._backward is not None])


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on the gradient-requiring leaves reachable from ``loss``.

    Gradients add into any existing ``grad``, and contributions from several
    uses of one tensor are summed.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires a gradient")
    tape = build_tape(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if node.retain_grad:
            _store(node, g)
        if g is None:
            continue
        for parent, pg in zip(node._inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        _store(leaf, grads.get(key))
    if loss._backward is None or loss.retain_grad:
        _store(loss, np.ones(loss.shape, dtype=loss.dtype))


def _store(t: Tensor, g) -> None:
    if g is None:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``coords`` restricts the estimate to the given flat indices; the other
    entries of the result are left at zero. Evaluation happens in float64.
    """
    if h <= 0:
        raise UsageError(f"finite-difference step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)
