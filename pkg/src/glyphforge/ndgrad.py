"""Minimal reverse-mode differentiable tensor engine.

Supplies exactly the operations the glyph networks and their losses need:
conv2d, conv2d_transpose, maxpool2d, activations, batchnorm2d, channel
concat/slice, dropout, and scalar reductions. Tensors wrap numpy arrays;
backward() walks the recorded graph in reverse topological order and
accumulates gradients additively.

Shape discipline is strict: binary ops between tensors require identical
shapes (Python scalars are allowed as the other operand). There is no
implicit broadcasting anywhere.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """An operation argument is outside its documented domain."""


class GraphError(RuntimeError):
    """Autodiff graph misuse (e.g. backward from a non-scalar)."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values."""


_grad_enabled = True
_deterministic = False
_thread_limiter = None


def grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_deterministic(flag):
    """Toggle deterministic mode.

    Numpy's CPU kernels are already run-to-run deterministic; the flag
    additionally pins BLAS thread pools to one thread so reduction order
    cannot vary with machine load.
    """
    global _deterministic, _thread_limiter
    _deterministic = bool(flag)
    if _deterministic and _thread_limiter is None:
        try:
            import threadpoolctl

            _thread_limiter = threadpoolctl.threadpool_limits(limits=1)
        except Exception:
            _thread_limiter = None
    elif not _deterministic and _thread_limiter is not None:
        try:
            _thread_limiter.restore_original_limits()
        except Exception:
            pass
        _thread_limiter = None


def is_deterministic():
    return _deterministic


def deterministic_from_env():
    """True when GLYPHFORGE_DETERMINISTIC=1 is set in the environment."""
    return os.environ.get("GLYPHFORGE_DETERMINISTIC", "") == "1"


_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 mixing round; used to derive child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *indices):
    """Derive a child 64-bit seed from a parent seed and index path."""
    s = seed & _MASK64
    for v in indices:
        s = splitmix64(s ^ splitmix64(v & _MASK64))
    return s


@dataclass
class RngState:
    """Counter-based RNG state: identical (seed, counter) => identical draw.

    Backed by numpy's Philox4x64-10 bit generator. Each draw() positions
    the Philox counter at ``counter << 64``, giving every call a disjoint
    2^64-block stream, then bumps the counter by one.
    """

    seed: int
    counter: int = 0

    ALGORITHM = "philox4x64-10"

    def draw(self):
        gen = np.random.Generator(
            np.random.Philox(key=self.seed & _MASK64, counter=(self.counter & _MASK64) << 64)
        )
        self.counter += 1
        return gen

    def clone(self):
        return RngState(self.seed, self.counter)


class Tensor:
    """N-dimensional float array participating in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self):
        if self.size != 1:
            raise GraphError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise arithmetic -------------------------------------------

    def _check_mate(self, other, opname):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"{opname}: shapes {self.shape} and {other.shape} differ")
            if other.dtype != self.dtype:
                raise ShapeError(f"{opname}: dtypes {self.dtype} and {other.dtype} differ")
            return other
        if isinstance(other, (int, float)):
            return other
        raise ParameterError(f"{opname}: unsupported operand {type(other).__name__}")

    def __add__(self, other):
        other = self._check_mate(other, "add")
        if isinstance(other, Tensor):
            out = _make(self.data + other.data, (self, other))
            if out.requires_grad:
                def _bw(g):
                    self._accumulate(g)
                    other._accumulate(g)
                out._backward = _bw
            return out
        out = _make(self.data + self.dtype.type(other), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = self._check_mate(other, "sub")
        if isinstance(other, Tensor):
            out = _make(self.data - other.data, (self, other))
            if out.requires_grad:
                def _bw(g):
                    self._accumulate(g)
                    other._accumulate(-g)
                out._backward = _bw
            return out
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._check_mate(other, "mul")
        if isinstance(other, Tensor):
            out = _make(self.data * other.data, (self, other))
            if out.requires_grad:
                def _bw(g):
                    self._accumulate(g * other.data)
                    other._accumulate(g * self.data)
                out._backward = _bw
            return out
        c = self.dtype.type(other)
        out = _make(self.data * c, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * c)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                raise ParameterError("div: division by zero")
            return self * (1.0 / other)
        raise ParameterError("div: only scalar divisors are supported")

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise ParameterError("pow: exponent must be a scalar")
        out = _make(self.data ** n, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * n * self.data ** (n - 1))
        return out

    def abs(self):
        """Elementwise |x|; subgradient 0 at x == 0."""
        out = _make(np.abs(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * np.sign(self.data))
        return out

    def log(self):
        """Natural log; inputs must be positive."""
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def clamp(self, lo, hi):
        """Clip to [lo, hi]; gradient passes through unclipped elements."""
        out = _make(np.clip(self.data, lo, hi), (self,))
        if out.requires_grad:
            mask = ((self.data >= lo) & (self.data <= hi)).astype(self.dtype)
            out._backward = lambda g: self._accumulate(g * mask)
        return out

    # -- reductions and shape ops -----------------------------------------

    def sum(self):
        out = _make(self.data.sum(dtype=self.dtype), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.full_like(self.data, g))
        return out

    def mean(self):
        return self.sum() / self.size

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Populate grads of every reachable requires_grad tensor.

        Must be called on a scalar (size-1) tensor. Gradients accumulate
        additively across multiple uses of the same tensor; callers are
        responsible for zeroing grads between passes.
        """
        if self.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(data, prev):
    req = _grad_enabled and any(p.requires_grad for p in prev)
    if req:
        return Tensor(data, requires_grad=True, _prev=tuple(prev))
    return Tensor(data)


def tensor(data, requires_grad=False, dtype=np.float32):
    """Construct a leaf tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss tensor."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward() expects a Tensor")
    loss.backward()


# -- raw correlation kernels (shared by conv2d / conv2d_transpose) ---------


def _im2col(x, kh, kw, stride, pad):
    """Window matrix (N*Ho*Wo, Ci*kh*kw) plus the output extents."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, ci, ho, wo = win.shape[:4]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, ci * kh * kw)
    return col, ho, wo


def _corr(x, w, stride, pad):
    """Cross-correlation: (N,Ci,H,W) x (Co,Ci,kh,kw) -> (N,Co,Ho,Wo)."""
    co, ci, kh, kw = w.shape
    col, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = col @ w.reshape(co, ci * kh * kw).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, co).transpose(0, 3, 1, 2))


def _corr_dw(x, g, stride, pad, kh, kw):
    """Weight gradient of _corr: inputs x, output-grad g -> (Co,Ci,kh,kw)."""
    ci = x.shape[1]
    col, ho, wo = _im2col(x, kh, kw, stride, pad)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, g.shape[1])
    return (gmat.T @ col).reshape(g.shape[1], ci, kh, kw)


def _corr_dx(g, w, stride, pad, h, width):
    """Adjoint of _corr with respect to its input.

    Dilates g by the stride, full-pads, and correlates with the spatially
    flipped kernel; the result is embedded into the padded input grid (rows
    the forward pass never touched get zero gradient) before the padding is
    cropped away.
    """
    n, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    gd = np.zeros((n, co, hd, wd), dtype=g.dtype)
    gd[:, :, ::stride, ::stride] = g
    wf = w[:, :, ::-1, ::-1]
    gdp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    col, h2, w2 = _im2col(gdp, kh, kw, 1, 0)
    wmat = np.ascontiguousarray(wf.transpose(0, 2, 3, 1)).reshape(co * kh * kw, ci)
    r = np.ascontiguousarray((col @ wmat).reshape(n, h2, w2, ci).transpose(0, 3, 1, 2))
    hp, wp = h + 2 * pad, width + 2 * pad
    if r.shape[2] != hp or r.shape[3] != wp:
        canvas = np.zeros((n, ci, hp, wp), dtype=g.dtype)
        canvas[:, :, : r.shape[2], : r.shape[3]] = r
        r = canvas
    return r[:, :, pad : pad + h, pad : pad + width]


def _check_conv_args(stride, pad):
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"stride must be a positive int, got {stride!r}")
    if not isinstance(pad, int) or pad < 0:
        raise ParameterError(f"pad must be a non-negative int, got {pad!r}")


def conv2d(x, w, b, stride=1, pad=0):
    """2-D cross-correlation plus bias.

    x: (N,C,H,W), w: (K,C,kh,kw), b: (K,). Output (N,K,Ho,Wo) with
    Ho = (H + 2*pad - kh)//stride + 1. Zero padding only.
    """
    _check_conv_args(stride, pad)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, width = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channel axis {c} != weight channel axis {cw}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({k},)")
    if kh > h + 2 * pad:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * pad}")
    if kw > width + 2 * pad:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {width + 2 * pad}")
    out_data = _corr(x.data, w.data, stride, pad)
    out_data += b.data.reshape(1, k, 1, 1)
    out = _make(out_data, (x, w, b))
    if out.requires_grad:
        def _bw(g):
            x._accumulate(_corr_dx(g, w.data, stride, pad, h, width))
            w._accumulate(_corr_dw(x.data, g, stride, pad, kh, kw))
            b._accumulate(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def conv2d_transpose(x, w, b, stride=1, pad=0):
    """Transposed 2-D convolution (exact adjoint of conv2d).

    x: (N,C,H,W), w: (C,K,kh,kw), b: (K,). Output (N,K,Ho,Wo) with
    Ho = (H - 1)*stride - 2*pad + kh.
    """
    _check_conv_args(stride, pad)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, width = x.shape
    cw, k, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d_transpose: input channel axis {c} != weight channel axis {cw}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d_transpose: bias shape {b.shape} != ({k},)")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (width - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output extent ({ho},{wo}) is empty")
    out_data = _corr_dx(x.data, w.data, stride, pad, ho, wo)
    out_data += b.data.reshape(1, k, 1, 1)
    out = _make(out_data, (x, w, b))
    if out.requires_grad:
        def _bw(g):
            x._accumulate(_corr(g, w.data, stride, pad))
            w._accumulate(_corr_dw(g, x.data, stride, pad, kh, kw))
            b._accumulate(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def maxpool2d(x, k, stride):
    """Max pooling; gradient routes to the first row-major argmax per window."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    _check_conv_args(stride, 0)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input ({h},{w})")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = _make(out_data, (x,))
    if out.requires_grad:
        def _bw(g):
            dx = np.zeros_like(x.data)
            rows = (np.arange(ho) * stride)[None, None, :, None] + idx // k
            cols = (np.arange(wo) * stride)[None, None, None, :] + idx % k
            nn = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(dx, (nn, cc, rows, cols), g)
            x._accumulate(dx)
        out._backward = _bw
    return out


_ACTIVATION_KINDS = ("relu", "leaky_relu", "tanh", "sigmoid")


def activation(x, kind, alpha=0.2):
    """Elementwise nonlinearity: relu | leaky_relu(alpha) | tanh | sigmoid."""
    if kind not in _ACTIVATION_KINDS:
        raise ParameterError(f"unknown activation {kind!r}")
    if kind == "leaky_relu" and not (0.0 < alpha < 1.0):
        raise ParameterError(f"leaky_relu alpha must lie in (0,1), got {alpha}")
    xd = x.data
    if kind == "relu":
        out_data = np.maximum(xd, 0)
    elif kind == "leaky_relu":
        out_data = np.where(xd > 0, xd, xd * x.dtype.type(alpha))
    elif kind == "tanh":
        out_data = np.tanh(xd)
    else:
        out_data = 1.0 / (1.0 + np.exp(-xd))
        out_data = out_data.astype(x.dtype, copy=False)
    out = _make(out_data, (x,))
    if out.requires_grad:
        if kind == "relu":
            out._backward = lambda g: x._accumulate(g * (xd > 0))
        elif kind == "leaky_relu":
            a = x.dtype.type(alpha)
            out._backward = lambda g: x._accumulate(g * np.where(xd > 0, x.dtype.type(1), a))
        elif kind == "tanh":
            out._backward = lambda g: x._accumulate(g * (1.0 - out_data * out_data))
        else:
            out._backward = lambda g: x._accumulate(g * out_data * (1.0 - out_data))
    return out


def relu(x):
    return activation(x, "relu")


def leaky_relu(x, alpha=0.2):
    return activation(x, "leaky_relu", alpha)


def tanh(x):
    return activation(x, "tanh")


def sigmoid(x):
    return activation(x, "sigmoid")


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes by biased batch statistics and folds them into the
    running buffers as ``running = momentum*running + (1-momentum)*batch``;
    eval mode normalizes by the running buffers. running_mean / running_var
    are non-differentiable tensors mutated in place.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm2d: mode must be train or eval, got {mode!r}")
    r = n * h * w
    if mode == "train":
        if r < 2:
            raise DegenerateBatchError(f"batchnorm2d: train mode needs N*H*W >= 2, got {r}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[:] = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data[:] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _make(out_data.astype(x.dtype, copy=False), (x, gamma, beta))
    if out.requires_grad:
        def _bw(g):
            gam = gamma.data.reshape(1, c, 1, 1)
            istd = invstd.reshape(1, c, 1, 1)
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))
            dxhat = g * gam
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                x._accumulate((istd / r) * (r * dxhat - s1 - xhat * s2))
            else:
                x._accumulate(dxhat * istd)
        out._backward = _bw
    return out


def concat_channels(a, b):
    """Concatenate along the channel axis; a's channels precede b's."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels: expected 4-d inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch axis differs ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: spatial axes differ ({a.shape[2:]} vs {b.shape[2:]})")
    c1 = a.shape[1]
    out = _make(np.concatenate([a.data, b.data], axis=1), (a, b))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g[:, :c1])
            b._accumulate(g[:, c1:])
        out._backward = _bw
    return out


def crop2d(x, r0, r1, c0, c1):
    """Take the spatial window [r0:r1, c0:c1] of a 4-d tensor."""
    if x.ndim != 4:
        raise ShapeError(f"crop2d: expected 4-d input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"crop2d: window [{r0}:{r1},{c0}:{c1}] invalid for ({h},{w})")
    out = _make(x.data[:, :, r0:r1, c0:c1], (x,))
    if out.requires_grad:
        def _bw(g):
            dx = np.zeros_like(x.data)
            dx[:, :, r0:r1, c0:c1] = g
            x._accumulate(dx)
        out._backward = _bw
    return out


def slice_channels(x, start, stop):
    """Take channels [start, stop) of a 4-d tensor."""
    if x.ndim != 4:
        raise ShapeError(f"slice_channels: expected 4-d input, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: range [{start},{stop}) invalid for {x.shape[1]} channels")
    out = _make(x.data[:, start:stop], (x,))
    if out.requires_grad:
        def _bw(g):
            dx = np.zeros_like(x.data)
            dx[:, start:stop] = g
            x._accumulate(dx)
        out._backward = _bw
    return out


def dropout(x, p, mode, rng):
    """Zero each element with probability p in train mode, scaling survivors.

    Eval mode is the identity. The mask is a pure function of the RngState
    passed in, so a cloned state reproduces the mask exactly.
    """
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"dropout: p must lie in [0,1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout: mode must be train or eval, got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.draw().random(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    out = _make(x.data * keep * scale, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * keep * scale)
    return out
