"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the feature-mapping networks are provided:
2-D convolution and its transpose, instance normalisation, pointwise
activations, elementwise addition and the two scalar losses (mean absolute
difference and mean squared offset).  Every op records a node on its output
when any input requires a gradient; :func:`backward` walks those nodes once
in reverse topological order.

Gradients are accumulated on leaf tensors only (tensors that were not
produced by an op).  Intermediate tensors never hold ``.grad``.
"""
from __future__ import annotations

import contextlib
import os
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "ParameterError",
    "no_grad",
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "activation",
    "relu",
    "leaky_relu",
    "add",
    "scale",
    "detach",
    "mean_abs",
    "mean_square",
    "backward",
    "conv_output_size",
    "conv_transpose_output_size",
]

DEBUG = os.environ.get("CGADAPT_DEBUG", "") not in ("", "0")
LEAKY_SLOPE = 0.2

_state = threading.local()


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up for an op."""


class ParameterError(ValueError):
    """Raised for invalid op hyper-parameters (stride, padding, ...)."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        # freeze the parent set now: toggling requires_grad later must not
        # route gradients into tensors that were constants when this node was built
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        if len(a.shape) != len(b.shape):
            raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        axis = next(i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y)
        raise ShapeError(
            f"{op}: size mismatch on axis {axis}: {a.shape[axis]} vs {b.shape[axis]}"
        )


# ---------------------------------------------------------------------------
# convolution helpers


def _pair(v, name: str) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ParameterError(f"{name} must be an int or a pair")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _pads(padding) -> tuple:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(padding, (tuple, list)):
        if len(padding) == 4:
            pads = tuple(int(p) for p in padding)
        elif len(padding) == 2:
            ph, pw = int(padding[0]), int(padding[1])
            pads = (ph, ph, pw, pw)
        else:
            raise ParameterError("padding must be an int, a pair or a 4-tuple")
    else:
        p = int(padding)
        pads = (p, p, p, p)
    if min(pads) < 0:
        raise ParameterError(f"padding must be non-negative, got {padding}")
    return pads


def conv_output_size(n: int, k: int, stride: int, pad_lo: int, pad_hi: int | None = None) -> int:
    if pad_hi is None:
        pad_hi = pad_lo
    return (n + pad_lo + pad_hi - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # [B, C, Ho, Wo, kh, kw] strided view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter(cols: np.ndarray, canvas_hw: tuple, sh: int, sw: int) -> np.ndarray:
    """Overlap-add ``cols`` [C, kh, kw, B, Ho, Wo] onto a [B, C, H, W] canvas."""
    c, kh, kw, b, ho, wo = cols.shape
    canvas = np.zeros((c, b) + tuple(canvas_hw))
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, i, j]
    return canvas.transpose(1, 0, 2, 3)


def _conv_forward(xp: np.ndarray, w: np.ndarray, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    win = _windows(xp, w.shape[2], w.shape[3], sh, sw, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(input, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``input`` [B, C_in, H, W] with ``weight`` [C_out, C_in, kh, kw].

    ``padding`` is an int (all sides), an (h, w) pair, or an explicit
    (top, bottom, left, right) tuple for asymmetric zero padding.
    """
    x, w = _as_tensor(input), _as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 [B,C,H,W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4 [O,C,kh,kw], got shape {w.shape}")
    sh, sw = _pair(stride, "stride")
    if sh < 1 or sw < 1:
        raise ParameterError(f"conv2d: stride must be positive, got {stride}")
    pt, pb, pl, pr = _pads(padding)
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: channel axis (1) of input is {cin} but weight expects {wcin}")
    if kh > h + pt + pb:
        raise ShapeError(f"conv2d: height axis (2) too small: {h} + padding < kernel {kh}")
    if kw > wd + pl + pr:
        raise ShapeError(f"conv2d: width axis (3) too small: {wd} + padding < kernel {kw}")
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias must have shape ({cout},), got {b.shape}")

    ho = conv_output_size(h, kh, sh, pt, pb)
    wo = conv_output_size(wd, kw, sw, pl, pr)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = _conv_forward(xp, w.data, sh, sw, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b is not None and b.requires_grad

    def _bw(gy):
        gx = gw = gb = None
        if need_x:
            cols = np.tensordot(w.data, gy, axes=([0], [1]))  # C, kh, kw, B, Ho, Wo
            canvas = _scatter(cols, xp.shape[2:], sh, sw)
            gx = np.ascontiguousarray(canvas[:, :, pt : pt + h, pl : pl + wd])
        if need_w:
            win = _windows(xp, kh, kw, sh, sw, ho, wo)
            gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
        if need_b:
            gb = gy.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, _bw, "conv2d")


def conv_transpose2d(input, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out [C_in, C_out, kh, kw].

    The forward pass is the input-gradient of :func:`conv2d` with the same
    weight, stride and padding.  ``output_padding`` adds rows/columns at the
    bottom/right so that any spatial size can be restored exactly.
    """
    x, w = _as_tensor(input), _as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: input must be rank 4, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: weight must be rank 4, got shape {w.shape}")
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    oph, opw = _pair(output_padding, "output_padding")
    if sh < 1 or sw < 1:
        raise ParameterError(f"conv_transpose2d: stride must be positive, got {stride}")
    if ph < 0 or pw < 0:
        raise ParameterError(f"conv_transpose2d: padding must be non-negative, got {padding}")
    if not (0 <= oph < sh and 0 <= opw < sw):
        raise ParameterError(
            f"conv_transpose2d: output_padding {output_padding} must satisfy 0 <= op < stride {stride}"
        )
    bsz, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: channel axis (1) of input is {cin} but weight expects {wcin}")
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias must have shape ({cout},), got {b.shape}")

    ho = conv_transpose_output_size(h, kh, sh, ph, oph)
    wo = conv_transpose_output_size(wd, kw, sw, pw, opw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output {ho}x{wo}")
    canvas_hw = ((h - 1) * sh + kh + oph, (wd - 1) * sw + kw + opw)
    cols = np.tensordot(w.data, x.data, axes=([0], [1]))  # C_out, kh, kw, B, H, W
    canvas = _scatter(cols, canvas_hw, sh, sw)
    out = np.ascontiguousarray(canvas[:, :, ph : ph + ho, pw : pw + wo])
    if b is not None:
        out += b.data[None, :, None, None]

    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b is not None and b.requires_grad

    def _bw(gy):
        gx = gw = gb = None
        gyp = np.pad(
            gy,
            ((0, 0), (0, 0), (ph, canvas_hw[0] - ph - ho), (pw, canvas_hw[1] - pw - wo)),
        )
        win = _windows(gyp, kh, kw, sh, sw, h, wd)  # B, C_out, H, W, kh, kw
        if need_x:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if need_w:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if need_b:
            gb = gy.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, _bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# normalisation and pointwise ops


def instance_norm(input, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, g, b = _as_tensor(input), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm: input must be rank 4, got shape {x.shape}")
    c = x.shape[1]
    if g.shape != (c,):
        raise ShapeError(f"instance_norm: gamma must have shape ({c},), got {g.shape}")
    if b.shape != (c,):
        raise ShapeError(f"instance_norm: beta must have shape ({c},), got {b.shape}")
    n = x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("instance_norm: needs at least 2 spatial positions")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g.data[None, :, None, None] + b.data[None, :, None, None]

    need_x, need_g, need_b = x.requires_grad, g.requires_grad, b.requires_grad

    def _bw(gy):
        gx = gg = gb = None
        if need_x:
            dxhat = gy * g.data[None, :, None, None]
            s1 = dxhat.mean(axis=(2, 3), keepdims=True)
            s2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (dxhat - s1 - xhat * s2)
        if need_g:
            gg = (gy * xhat).sum(axis=(0, 2, 3))
        if need_b:
            gb = gy.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return _make(out, (x, g, b), _bw, "instance_norm")


def activation(input, kind: str = "relu", slope: float = LEAKY_SLOPE) -> Tensor:
    """Pointwise non-linearity: ``relu``, ``leaky_relu`` or ``none``."""
    x = _as_tensor(input)
    if kind == "none":
        return x
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0.0)
        factor = mask.astype(np.float64)
    elif kind == "leaky_relu":
        mask = x.data > 0
        out = np.where(mask, x.data, slope * x.data)
        factor = np.where(mask, 1.0, slope)
    else:
        raise ParameterError(f"unknown activation {kind!r}")

    def _bw(gy):
        return (gy * factor,)

    return _make(out, (x,), _bw, kind)


def relu(x) -> Tensor:
    return activation(x, "relu")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    return activation(x, "leaky_relu", slope)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def _bw(gy):
        return gy, gy

    return _make(a.data + b.data, (a, b), _bw, "add")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant."""
    a = _as_tensor(a)
    c = float(c)

    def _bw(gy):
        return (gy * c,)

    return _make(a.data * c, (a,), _bw, "scale")


def detach(a) -> Tensor:
    return Tensor(_as_tensor(a).data)


def mean_abs(a, b) -> Tensor:
    """Mean of |a - b| over all elements (L1 distance per element)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mean_abs")
    diff = a.data - b.data
    n = diff.size
    out = np.array([np.abs(diff).mean()])

    def _bw(gy):
        g = np.sign(diff) * (gy[0] / n)
        return g, -g

    return _make(out, (a, b), _bw, "mean_abs")


def mean_square(a, c: float) -> Tensor:
    """Mean of (a - c)^2 for a constant target ``c``."""
    a = _as_tensor(a)
    diff = a.data - float(c)
    n = diff.size
    out = np.array([(diff * diff).mean()])

    def _bw(gy):
        return (diff * (2.0 * gy[0] / n),)

    return _make(out, (a,), _bw, "mean_square")


# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
