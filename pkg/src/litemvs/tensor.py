"""Dense N-D tensors with reverse-mode automatic differentiation.

The op set covers exactly what the depth-inference network needs: 2D/3D
convolution, transposed 3D convolution, batch normalization, ReLU, softmax,
bilinear gathers, and elementwise/reduction arithmetic.  Arrays are float32
in normal operation; feeding float64 data through keeps every op in float64,
which is how gradient checking runs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "no_grad",
    "elementwise_add",
    "scalar_mul",
    "mean_abs_diff",
    "relu",
    "softmax",
    "conv2d",
    "conv3d",
    "deconv3d",
    "batch_norm",
    "bilinear_gather",
    "numerical_gradient",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense row-major array plus an optional gradient accumulator.

    Tensors are immutable after creation except for ``grad``, which is
    populated during :meth:`backward`.  Only float32/float64 payloads are
    supported; anything else is converted to float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: Iterable["Tensor"] = (), requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        """Wrap an array as a trainable parameter."""
        return Tensor(data, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff engine -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar tensor, populating ``grad``.

        Raises:
            ShapeError: if called on a non-scalar tensor.
            NumericError: if any produced gradient is non-finite.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                node._backward = None  # free closures as we go
        for node in order:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NumericError("non-finite gradient encountered during backward")

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, other)
        return _scalar_add(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, scalar_mul(other, -1.0))
        return _scalar_add(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the graph (graphs get deep at scale)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(grad, dtype=t.data.dtype)
    else:
        t.grad += grad


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, parents if tracked else ())
    out.requires_grad = tracked
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if g != s:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and reduction ops ----------------------------------------------


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            _accumulate(b, _unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product."""
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def scalar_mul(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s, (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad * s)
        out._backward = _bw
    return out


def _scalar_add(a: Tensor, s: float) -> Tensor:
    out = _result(a.data + s, (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad)
        out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    out = _result(a.data ** exponent, (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad * exponent * a.data ** (exponent - 1.0))
        out._backward = _bw
    return out


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at 0."""
    out = _result(np.abs(a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad * np.sign(a.data))
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        out._backward = _bw
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return scalar_mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad.reshape(a.data.shape))
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    out = _result(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        def _bw():
            _accumulate(a, out.grad * (a.data > 0))
        out._backward = _bw
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``; sums to 1 there."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _result(p, (a,))
    if out.requires_grad:
        def _bw():
            gy = out.grad
            dot = (gy * p).sum(axis=axis, keepdims=True)
            _accumulate(a, p * (gy - dot))
        out._backward = _bw
    return out


def mean_abs_diff(a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference, optionally restricted to a boolean/float mask.

    Raises:
        ShapeError: on shape mismatch or an empty mask.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_diff shapes differ: {a.shape} vs {b.shape}")
    diff = absolute(a - b)
    if mask is None:
        return diff.mean()
    m = np.asarray(mask, dtype=a.data.dtype)
    count = float(m.sum())
    if count == 0:
        raise ShapeError("mean_abs_diff: mask selects no elements")
    return scalar_mul(tensor_sum(elementwise_mul(diff, Tensor(m))), 1.0 / count)


# -- convolution kernels ---------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Unfold (C, *spatial) into (C*k^nd, n_out) columns; returns out spatial."""
    nd = x.ndim - 1
    if pad:
        x = np.pad(x, [(0, 0)] + [(pad, pad)] * nd)
    win = sliding_window_view(x, (k,) * nd, axis=tuple(range(1, nd + 1)))
    win = win[(slice(None),) + (slice(None, None, stride),) * nd]
    out_spatial = win.shape[1:1 + nd]
    axes = (0,) + tuple(range(1 + nd, 1 + 2 * nd)) + tuple(range(1, 1 + nd))
    cols = np.ascontiguousarray(win.transpose(axes)).reshape(x.shape[0] * k ** nd, -1)
    return cols, out_spatial


def _col2im(cols: np.ndarray, channels: int, spatial, k: int, stride: int, pad: int, out_spatial):
    """Adjoint of :func:`_im2col`: scatter-add columns back to (C, *spatial)."""
    nd = len(spatial)
    padded = tuple(s + 2 * pad for s in spatial)
    gx = np.zeros((channels,) + padded, dtype=cols.dtype)
    blocks = cols.reshape((channels,) + (k,) * nd + tuple(out_spatial))
    for offset in np.ndindex(*((k,) * nd)):
        sl = tuple(slice(o, o + stride * n, stride) for o, n in zip(offset, out_spatial))
        gx[(slice(None),) + sl] += blocks[(slice(None),) + offset]
    if pad:
        gx = gx[(slice(None),) + tuple(slice(pad, pad + s) for s in spatial)]
    return gx


def _conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, nd: int) -> Tensor:
    c_out, c_in = weight.shape[:2]
    k = weight.shape[2]
    if any(ks != k for ks in weight.shape[2:]):
        raise ShapeError(f"only cubic kernels supported, got {weight.shape}")
    if k % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if x.ndim != nd + 1:
        raise ShapeError(f"expected {nd + 1}-d input (C, spatial...), got shape {x.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    pad = k // 2
    cols, out_spatial = _im2col(x.data, k, stride, pad)
    y = weight.data.reshape(c_out, -1) @ cols
    if bias is not None:
        y = y + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(y.reshape((c_out,) + tuple(out_spatial)), parents)
    if out.requires_grad:
        def _bw():
            gy = out.grad.reshape(c_out, -1)
            if weight.requires_grad:
                fcols, _ = _im2col(x.data, k, stride, pad)  # recomputed, cheaper than caching
                _accumulate(weight, (gy @ fcols.T).reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, gy.sum(axis=1))
            if x.requires_grad:
                gcols = weight.data.reshape(c_out, -1).T @ gy
                _accumulate(x, _col2im(gcols, c_in, x.shape[1:], k, stride, pad, out_spatial))
        out._backward = _bw
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution of (C, H, W) with (C', C, k, k) weights."""
    return _conv_nd(x, weight, bias, stride, nd=2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 3D convolution of (C, D, H, W) with (C', C, k, k, k) weights."""
    return _conv_nd(x, weight, bias, stride, nd=3)


def deconv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 3D convolution doubling each spatial extent at stride 2.

    Defined as the exact adjoint of the matching strided conv3d: with weights
    (C_out, C_in, k, k, k), input channels C_in map to C_out and spatial
    extents are multiplied by ``stride``.

    Raises:
        ShapeError: when the doubled output cannot be reproduced by the
            adjoint convolution with same-padding.
    """
    c_out, c_in = weight.shape[:2]
    k = weight.shape[2]
    if x.ndim != 4:
        raise ShapeError(f"expected (C, D, H, W) input, got shape {x.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    pad = k // 2
    in_spatial = x.shape[1:]
    out_spatial = tuple(s * stride for s in in_spatial)
    for o, i in zip(out_spatial, in_spatial):
        if _conv_out_size(o, k, stride, pad) != i:
            raise ShapeError(
                f"deconv3d output {out_spatial} unreachable from input {in_spatial} "
                f"with kernel {k}, stride {stride}, padding {pad}"
            )
    w_conv = np.ascontiguousarray(weight.data.swapaxes(0, 1))  # (C_in, C_out, k, k, k)
    gcols = w_conv.reshape(c_in, -1).T @ x.data.reshape(c_in, -1)
    y = _col2im(gcols, c_out, out_spatial, k, stride, pad, in_spatial)
    if bias is not None:
        y = y + bias.data[:, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(y, parents)
    if out.requires_grad:
        def _bw():
            gy = out.grad
            if x.requires_grad:
                cols, _ = _im2col(gy, k, stride, pad)
                gx = (w_conv.reshape(c_in, -1) @ cols).reshape(x.shape)
                _accumulate(x, gx)
            if weight.requires_grad:
                cols, _ = _im2col(gy, k, stride, pad)
                gw = (x.data.reshape(c_in, -1) @ cols.T).reshape(w_conv.shape)
                _accumulate(weight, gw.swapaxes(0, 1))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, gy.sum(axis=(1, 2, 3)))
        out._backward = _bw
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-first batch normalization over all non-channel axes.

    Training mode normalizes with the batch statistics of ``x`` and updates
    the running buffers in place; inference mode uses the running buffers.
    The epsilon keeps zero-variance channels finite.
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine parameters must have shape ({c},)")
    axes = tuple(range(1, x.ndim))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    cshape = (c,) + (1,) * (x.ndim - 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(cshape)) * inv.reshape(cshape)
    y = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    out = _result(y, (x, gamma, beta))
    if out.requires_grad:
        def _bw():
            gy = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (gy * xhat).sum(axis=axes))
            if beta.requires_grad:
                _accumulate(beta, gy.sum(axis=axes))
            if x.requires_grad:
                scale = (gamma.data * inv).reshape(cshape)
                if training:
                    gmean = gy.mean(axis=axes).reshape(cshape)
                    gproj = (gy * xhat).mean(axis=axes).reshape(cshape)
                    _accumulate(x, scale * (gy - gmean - xhat * gproj))
                else:
                    _accumulate(x, scale * gy)
        out._backward = _bw
    return out


def bilinear_gather(feat: Tensor, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted gather of 4 bilinear taps from a (C, H, W) feature map.

    Args:
        feat: (C, H, W) tensor to sample from.
        indices: (4, M) int array of flat H*W indices per tap.
        weights: (4, M) tap weights; all-zero columns encode invalid samples.

    Returns:
        (C, M) tensor; gradients scatter-add back into ``feat``.
    """
    c, h, w = feat.shape
    flat = feat.data.reshape(c, h * w)
    wts = weights.astype(feat.data.dtype, copy=False)
    y = np.zeros((c, indices.shape[1]), dtype=feat.data.dtype)
    for tap in range(4):
        y += flat[:, indices[tap]] * wts[tap]
    out = _result(y, (feat,))
    if out.requires_grad:
        def _bw():
            gy = out.grad
            hw = h * w
            base = np.arange(c, dtype=np.int64)[:, None] * hw
            idx_all = np.concatenate([base + indices[t][None, :] for t in range(4)], axis=1)
            g_all = np.concatenate([gy * wts[t] for t in range(4)], axis=1)
            g = np.bincount(idx_all.ravel(), weights=g_all.ravel(), minlength=c * hw)
            _accumulate(feat, g.reshape(c, h, w).astype(feat.data.dtype, copy=False))
        out._backward = _bw
    return out


# -- gradient checking ------------------------------------------------------------


def numerical_gradient(f, array: np.ndarray, coords, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place at each flat coordinate in ``coords`` and
    restored afterwards; ``f`` must recompute the scalar from current state.
    """
    flat = array.reshape(-1)
    grads = np.empty(len(coords), dtype=np.float64)
    for i, c in enumerate(coords):
        orig = flat[c]
        step = eps * max(1.0, abs(float(orig)))
        flat[c] = orig + step
        fp = float(f())
        flat[c] = orig - step
        fm = float(f())
        flat[c] = orig
        grads[i] = (fp - fm) / (2.0 * step)
    return grads


def relative_error(a: float, b: float) -> float:
    """Scale-aware relative difference used by the gradient checks."""
    return abs(a - b) / max(abs(a), abs(b), 1e-6)
