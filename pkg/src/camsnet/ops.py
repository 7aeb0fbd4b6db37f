"""Differentiable operations on :class:`~camsnet.autograd.Tensor`.

Only the op set the segmentation network needs. Every op returns a fresh
contiguous array; there are no strided views.
"""
from __future__ import annotations

import builtins

import numpy as np
from scipy.special import expit

from .autograd import ShapeError, Tensor, as_tensor, make_result

SOFTPLUS_THRESHOLD = 20.0


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over the axes that were broadcast."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched ``a[..., m, k] @ b[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError(f"matmul expects a[..., m, k] and b[k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    k, n = b.shape

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the trailing axis; ``w`` is stored as (d_in, d_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    d_in, d_out = w.shape
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ w.data
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (d_out,):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        inputs.append(b)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result("linear", out.reshape(x.shape[:-1] + (d_out,)), inputs, bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return make_result("silu", x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


def softplus(x) -> Tensor:
    """``ln(1 + e^x)``, returning ``x`` itself above the overflow threshold."""
    x = as_tensor(x)
    big = x.data > SOFTPLUS_THRESHOLD
    out = np.where(big, x.data, np.log1p(np.exp(np.minimum(x.data, SOFTPLUS_THRESHOLD))))
    return make_result("softplus", out, (x,), lambda g: (g * expit(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(
        "softmax", y, (x,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (
        -1 not in shape and int(np.prod(shape)) != x.size
    ) or (-1 in shape and (np.prod(known) == 0 or x.size % int(np.prod(known)))):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim if -x.ndim <= a < x.ndim else a for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of the axes of a {x.ndim}-d tensor")
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        "permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    return make_result(
        "flip", np.flip(x.data, axis).copy(), (x,),
        lambda g: (np.flip(g, axis).copy(),),
    )


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    index = (slice(None),) * axis + (slice(start, start + length),)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result("narrow", x.data[index].copy(), (x,), bw)


def split(x, sizes, axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to axis length {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(x, axis, start, n))
        start += n
    return out


def avg_pool2d(x) -> Tensor:
    """Non-overlapping 2x2 mean pooling of a (B, C, H, W) tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result("avg_pool2d", out, (x,), bw)


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix for scale-2 bilinear, align_corners=False."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample2d(x) -> Tensor:
    """Scale-2 bilinear upsampling of a (B, C, H, W) tensor with edge clamping."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2d expects (B, C, H, W), got {x.shape}")
    uh = upsample_matrix(x.shape[2], x.dtype)
    uw = upsample_matrix(x.shape[3], x.dtype)
    out = np.einsum("ih,bchw,jw->bcij", uh, x.data, uw, optimize=True)

    def bw(g):
        return (np.einsum("ih,bcij,jw->bchw", uh, g, uw, optimize=True),)

    return make_result("bilinear_upsample2d", out, (x,), bw)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis, then scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine {weight.shape}/{bias.shape} does not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def bw(g):
        gx_hat = g * weight.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return make_result("layer_norm", out, (x, weight, bias), bw)


def ones_like(x) -> Tensor:
    return Tensor(np.ones_like(as_tensor(x).data))


def zeros_like(x) -> Tensor:
    return Tensor(np.zeros_like(as_tensor(x).data))
