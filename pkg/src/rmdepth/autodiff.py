"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation records its parents and a
backward closure on the output tensor.  ``Tensor.backward()`` topologically
sorts the recorded graph, pushes gradients from a scalar loss to every
reachable tensor with ``requires_grad``, and then frees the graph.

Image-like data uses (batch, channel, height, width) layout throughout.
Two precision modes are supported: float64 for gradient checking and
float32 for training, selected via :func:`set_default_dtype` or the
:class:`precision` context manager.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeError

_DEFAULT_DTYPE = np.float32

# count of grid_sample calls that saw NaN flow values (diagnostic only)
_NAN_FLOW_EVENTS = 0


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InvalidArgumentError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager selecting 32- or 64-bit mode: ``with precision(64): ...``"""

    def __init__(self, bits: int):
        if bits not in (32, 64):
            raise InvalidArgumentError("precision must be 32 or 64")
        self._dtype = np.float64 if bits == 64 else np.float32

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def nan_flow_count() -> int:
    return _NAN_FLOW_EVENTS


def reset_nan_flow_count() -> None:
    global _NAN_FLOW_EVENTS
    _NAN_FLOW_EVENTS = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor; loss must be scalar."""
        if self.data.size != 1:
            raise InvalidArgumentError("backward requires a scalar (single-element) loss")
        topo = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the recorded graph; leaf grads stay
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _needs_grad(t):
        return
    g = _unbroadcast(np.asarray(g), t.data.shape).astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + g


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(_needs_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_op(a: Tensor, b: Tensor, fwd):
    try:
        return fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from e


# -- elementwise operations --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.add)

    def bw(go):
        _accum(a, go)
        _accum(b, go)

    return _make(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.subtract)

    def bw(go):
        _accum(a, go)
        _accum(b, -go)

    return _make(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.multiply)

    def bw(go):
        _accum(a, go * b.data)
        _accum(b, go * a.data)

    return _make(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.divide)

    def bw(go):
        _accum(a, go / b.data)
        _accum(b, -go * a.data / (b.data * b.data))

    return _make(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(go):
        _accum(a, -go)

    return _make(-a.data, (a,), bw)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def bw(go):
        _accum(a, go * p * a.data ** (p - 1.0))

    return _make(data, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(go):
        _accum(a, go * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(go):
        _accum(a, go * (0.5 / data))

    return _make(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(go):
        _accum(a, go * data)

    return _make(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(go):
        _accum(a, go / a.data)

    return _make(np.log(a.data), (a,), bw)


def sin(a: Tensor) -> Tensor:
    def bw(go):
        _accum(a, go * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bw)


def cos(a: Tensor) -> Tensor:
    def bw(go):
        _accum(a, -go * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bw)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(go):
        # subgradient 0 at the kink
        _accum(a, go * np.sign(a.data))

    return _make(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(go):
        _accum(a, go * (1.0 - data * data))

    return _make(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable in both tails
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def bw(go):
        _accum(a, go * data * (1.0 - data))

    return _make(data, (a,), bw)


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    data = np.where(x > 0, x, neg_part).astype(x.dtype, copy=False)

    def bw(go):
        _accum(a, go * np.where(x > 0, 1.0, neg_part + 1.0))

    return _make(data, (a,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.maximum)
    mask = a.data >= b.data  # ties route the gradient to the first argument

    def bw(go):
        _accum(a, go * mask)
        _accum(b, go * ~mask)

    return _make(data, (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_op(a, b, np.minimum)
    mask = a.data <= b.data

    def bw(go):
        _accum(a, go * mask)
        _accum(b, go * ~mask)

    return _make(data, (a, b), bw)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "sqrt": sqrt, "exp": exp, "log": log, "abs": absolute,
    "tanh": tanh, "sigmoid": sigmoid, "elu": elu, "square": square,
    "sin": sin, "cos": cos,
    "maximum": maximum, "minimum": minimum,
}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name (unary ops ignore ``b``)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown elementwise kind '{kind}'") from None
    if b is None:
        return fn(a)
    return fn(a, b)


# -- reductions and shape ops ------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(go):
        g = np.asarray(go)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(data, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bw(go):
        _accum(a, go.reshape(a.data.shape))

    return _make(data, (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bw(go):
        g = np.zeros_like(a.data)
        g[idx] = go
        _accum(a, g)

    return _make(data, (a,), bw)


def concat_channels(xs) -> Tensor:
    """Concatenate along the channel axis; backward splits the gradient."""
    xs = list(xs)
    if not xs:
        raise InvalidArgumentError("concat_channels requires at least one tensor")
    base = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(base) or x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeError(f"cannot concat {x.shape} with {base} along channels")
    data = np.concatenate([x.data for x in xs], axis=1)
    widths = [x.shape[1] for x in xs]

    def bw(go):
        ofs = 0
        for x, w in zip(xs, widths):
            _accum(x, go[:, ofs:ofs + w])
            ofs += w

    return _make(data, tuple(xs), bw)


# -- convolution -------------------------------------------------------------

def _conv_windows(xpad: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)


def _conv_forward_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xpad = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _conv_windows(xpad, k, stride)
    OH, OW = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * OH * OW, C * k * k)
    out = col @ w.reshape(O, -1).T
    return out.reshape(B, OH, OW, O).transpose(0, 3, 1, 2)


def _col2im(gcol: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col.  gcol: (B, OH, OW, C, k, k)."""
    B, C, H, W = xshape
    OH, OW = gcol.shape[1], gcol.shape[2]
    gpad = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=gcol.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += \
                gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return gpad[:, :, pad:-pad, pad:-pad]
    return gpad


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with symmetric zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin, k, k); bias: (Cout,) or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weight")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d requires square kernels")
    if Cw != C:
        raise ShapeError(f"input channels {C} != weight input channels {Cw}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input ({H}+2*{pad}, {W}+2*{pad})")
    data = _conv_forward_raw(x.data, w.data, stride, pad)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)
    OH, OW = data.shape[2], data.shape[3]

    def bw(go):
        go_mat = go.transpose(0, 2, 3, 1).reshape(B * OH * OW, O)
        if _needs_grad(w) or _needs_grad(x):
            wmat = w.data.reshape(O, -1)
        if _needs_grad(w):
            xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
            win = _conv_windows(xpad, k, stride)
            col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * OH * OW, C * k * k)
            _accum(w, (go_mat.T @ col).reshape(w.data.shape))
        if _needs_grad(x):
            gcol = (go_mat @ wmat).reshape(B, OH, OW, C, k, k)
            _accum(x, _col2im(gcol, x.data.shape, k, stride, pad))
        if bias is not None:
            _accum(bias, go.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, bw)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution (learned upsampling).

    x: (B, Cin, H, W); w: (Cin, Cout, k, k).  Output spatial size is
    (H-1)*stride - 2*pad + k; with k=4, stride=2, pad=1 this is exactly 2H.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4D input and weight")
    B, C, H, W = x.shape
    Cw, O, k, _ = w.shape
    if Cw != C:
        raise ShapeError(f"input channels {C} != weight input channels {Cw}")
    OH = (H - 1) * stride - 2 * pad + k
    OW = (W - 1) * stride - 2 * pad + k
    if OH <= 0 or OW <= 0:
        raise ShapeError("transposed conv output would be empty")
    gcol = (x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
            @ w.data.reshape(C, -1)).reshape(B, H, W, O, k, k)
    data = _col2im(gcol, (B, O, OH, OW), k, stride, pad)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)

    def bw(go):
        gopad = np.pad(go, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else go
        win = _conv_windows(gopad, k, stride)  # (B, O, H, W, k, k)
        if _needs_grad(w):
            _accum(w, np.einsum("bchw,bohwkl->cokl", x.data, win))
        if _needs_grad(x):
            _accum(x, np.einsum("cokl,bohwkl->bchw", w.data, win))
        if bias is not None:
            _accum(bias, go.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, bw)


# -- resampling --------------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Bilinear interpolation matrix, align-corners-false convention."""
    R = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, n_in - 2) if n_in > 1 else i0
    frac = src - i0
    R[np.arange(n_out), i0] += 1.0 - frac
    if n_in > 1:
        R[np.arange(n_out), i0 + 1] += frac
    return R


def bilinear_resize(x: Tensor, factor) -> Tensor:
    """Resize spatial axes by a positive rational factor (pixel centers at (i+0.5)/N)."""
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects a 4D tensor")
    f = float(factor)
    if f <= 0:
        raise InvalidArgumentError("factor must be positive")
    B, C, H, W = x.shape
    OH, OW = H * f, W * f
    if abs(OH - round(OH)) > 1e-9 or abs(OW - round(OW)) > 1e-9:
        raise InvalidArgumentError(f"factor {factor} gives non-integer extents for {(H, W)}")
    OH, OW = int(round(OH)), int(round(OW))
    if (OH, OW) == (H, W):
        def bw_id(go):
            _accum(x, go)
        return _make(x.data, (x,), bw_id)
    Ry = _interp_matrix(OH, H, x.data.dtype)
    Rx = _interp_matrix(OW, W, x.data.dtype)
    data = np.einsum("oh,bchw,pw->bcop", Ry, x.data, Rx, optimize=True)

    def bw(go):
        _accum(x, np.einsum("oh,bcop,pw->bchw", Ry, go, Rx, optimize=True))

    return _make(data, (x,), bw)


def grid_sample(image: Tensor, flow: Tensor) -> Tensor:
    """Sample ``image`` at pixel + flow positions with bilinear interpolation.

    flow: (B, 2, H, W) holding (u, v) pixel displacements.  Reads outside the
    border clamp to edge pixels.  NaN flow propagates NaN into the output and
    bumps a diagnostic counter.
    """
    global _NAN_FLOW_EVENTS
    if image.ndim != 4 or flow.ndim != 4:
        raise ShapeError("grid_sample expects 4D image and flow")
    B, C, H, W = image.shape
    if flow.shape[0] != B or flow.shape[1] != 2 or flow.shape[2:] != (H, W):
        raise ShapeError(f"flow shape {flow.shape} incompatible with image {image.shape}")
    xs = flow.data[:, 0] + np.arange(W, dtype=flow.dtype)
    ys = flow.data[:, 1] + np.arange(H, dtype=flow.dtype).reshape(-1, 1)
    nan_mask = ~(np.isfinite(xs) & np.isfinite(ys))
    if nan_mask.any():
        _NAN_FLOW_EVENTS += 1
        xs = np.where(nan_mask, 0.0, xs)
        ys = np.where(nan_mask, 0.0, ys)
    xc = np.clip(xs, 0.0, W - 1.0)
    yc = np.clip(ys, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc), W - 2).astype(np.intp) if W > 1 else np.zeros_like(xc, dtype=np.intp)
    y0 = np.minimum(np.floor(yc), H - 2).astype(np.intp) if H > 1 else np.zeros_like(yc, dtype=np.intp)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (xc - x0)[:, None]  # (B, 1, H, W)
    fy = (yc - y0)[:, None]
    bidx = np.arange(B)[:, None, None]
    I00 = image.data[bidx, :, y0, x0].transpose(0, 3, 1, 2)
    I01 = image.data[bidx, :, y0, x1].transpose(0, 3, 1, 2)
    I10 = image.data[bidx, :, y1, x0].transpose(0, 3, 1, 2)
    I11 = image.data[bidx, :, y1, x1].transpose(0, 3, 1, 2)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    data = w00 * I00 + w01 * I01 + w10 * I10 + w11 * I11
    if nan_mask.any():
        data = np.where(nan_mask[:, None], np.nan, data)

    # inside-border indicator: clamped coordinates stop depending on the flow
    in_x = ((xs > 0.0) & (xs < W - 1.0)).astype(image.dtype)[:, None]
    in_y = ((ys > 0.0) & (ys < H - 1.0)).astype(image.dtype)[:, None]

    def bw(go):
        if nan_mask.any():
            go = np.where(nan_mask[:, None], 0.0, go)
        if _needs_grad(image):
            gimg = np.zeros_like(image.data)
            flat = gimg.reshape(-1)
            coff = (np.arange(B)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                idx = (coff + (yy * W + xx)[:, None]).reshape(-1)
                flat += np.bincount(idx, weights=(go * ww).reshape(-1), minlength=flat.size).astype(flat.dtype)
            _accum(image, gimg)
        if _needs_grad(flow):
            dx = ((1 - fy) * (I01 - I00) + fy * (I11 - I10))
            dy = ((1 - fx) * (I10 - I00) + fx * (I11 - I01))
            gu = (go * dx).sum(axis=1, keepdims=True) * in_x
            gv = (go * dy).sum(axis=1, keepdims=True) * in_y
            _accum(flow, np.concatenate([gu, gv], axis=1))

    return _make(data, (image, flow), bw)


def box_filter3(x: Tensor) -> Tensor:
    """3x3 mean filter, 'valid' extent (output shrinks by 2 per axis)."""
    if x.ndim != 4:
        raise ShapeError("box_filter3 expects a 4D tensor")
    B, C, H, W = x.shape
    if H < 3 or W < 3:
        raise ShapeError("box_filter3 requires spatial extents >= 3")
    acc = np.zeros((B, C, H - 2, W - 2), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            acc += x.data[:, :, i:i + H - 2, j:j + W - 2]
    data = acc / 9.0

    def bw(go):
        g = np.zeros_like(x.data)
        for i in range(3):
            for j in range(3):
                g[:, :, i:i + H - 2, j:j + W - 2] += go
        _accum(x, g / 9.0)

    return _make(data, (x,), bw)


def box_mean_same(x: Tensor) -> Tensor:
    """3x3 mean filter at the input extent; border windows average the
    in-bounds pixels only (count-normalized)."""
    if x.ndim != 4:
        raise ShapeError("box_mean_same expects a 4D tensor")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros((B, C, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            acc += xp[:, :, i:i + H, j:j + W]
    ones = np.pad(np.ones((H, W), dtype=x.dtype), 1)
    count = np.zeros((H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            count += ones[i:i + H, j:j + W]
    data = acc / count

    def bw(go):
        gn = go / count
        gpad = np.zeros((B, C, H + 2, W + 2), dtype=go.dtype)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + H, j:j + W] += gn
        _accum(x, gpad[:, :, 1:-1, 1:-1])

    return _make(data, (x,), bw)


def constant(value, dtype=None) -> Tensor:
    """Non-differentiable tensor (masks, weights frozen by construction)."""
    return Tensor(value, dtype=dtype)


def parameter(value, dtype=None) -> Tensor:
    return Tensor(value, requires_grad=True, dtype=dtype)
