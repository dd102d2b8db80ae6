"""Differentiable operations on :class:`~swinvox.tensor.core.Tensor`.

Every op computes its forward value with numpy, validates that it is finite,
and (when a tape is active and an input requires grad) records a closure that
maps the output gradient to one gradient per input.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from ..errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteError
from .core import Tensor, active_tape, default_dtype

MASK_VALUE = -1e4


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{name}'")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(name, inputs, out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", out, (a, b), backward)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def scale(x: Tensor, s: float) -> Tensor:
    return _emit("scale", x.data * s, (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _sigmoid_grad(out: np.ndarray) -> np.ndarray:
    return out * (1 - out)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit("sigmoid", out, (x,), lambda g: (g * _sigmoid_grad(out),))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    out = (0.5 * xd * (1.0 + erf(xd * _SQRT_HALF))).astype(x.dtype)
    return _emit("gelu", out, (x,), lambda g: ((g * _gelu_grad(xd)).astype(xd.dtype),))


def clamp_max(x: Tensor, limit: float) -> Tensor:
    keep = x.data <= limit
    return _emit("clamp_max", np.minimum(x.data, limit).astype(x.dtype), (x,), lambda g: (g * keep,))


def constant_mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed array that carries no gradient."""
    mask = np.asarray(mask, dtype=x.dtype)
    return _emit("constant_mul", x.data * mask, (x,), lambda g: (unbroadcast(g * mask, x.shape),))


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape moves


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _emit("roll", np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", out, tensors, backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along the first axis; duplicate indices accumulate."""
    index = np.asarray(index)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _emit("take_rows", table.data[index], (table,), backward)


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


# ---------------------------------------------------------------- normalizers


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over the last (channel) dimension."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _emit("layer_norm", out, (x, gamma, beta), backward)


def normalize_lastdim(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = xd / safe

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        dx = np.where(norm > eps, (g - out * dot) / safe, g / safe)
        return (dx,)

    return _emit("normalize", out, (x,), backward)


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel normalization of a (b, c, d, h, w) volume.

    Returns ``(out, new_running_mean, new_running_var)``; the running arrays
    are new objects (inputs are left untouched). Training mode normalizes
    with the biased batch variance and folds the unbiased one into the
    running estimate.
    """
    if x.ndim != 5:
        raise DimensionError(f"batch_norm3d expects (b, c, d, h, w), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm3d affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    axes = (0, 2, 3, 4)
    n = x.size // c
    bshape = (1, c, 1, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    if training:
        if n < 2:
            raise DegenerateBatchError(
                f"batch norm in training mode needs at least 2 values per channel, got {n}")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        new_mean = ((1 - momentum) * running_mean + momentum * mu.reshape(c)).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var
                   + momentum * var.reshape(c) * (n / (n - 1))).astype(running_var.dtype)

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return dx, dgamma, dbeta
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv
        new_mean, new_var = running_mean.copy(), running_var.copy()

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return _emit("batch_norm3d", out, (x, gamma, beta), backward), new_mean, new_var


# -------------------------------------------------------------- convolutions

KERNEL = 4
STRIDE = 2
PADDING = 1


# For output parity r along one axis, the two (kernel tap, start offset into
# the 1-padded input) pairs that reach it.
_TAPS = {0: ((3, 0), (1, 1)), 1: ((2, 1), (0, 2))}
_PARITIES = [(rd, rh, rw) for rd in (0, 1) for rh in (0, 1) for rw in (0, 1)]


def _parity_taps(parity):
    rd, rh, rw = parity
    return [(td, th, tw) for td in _TAPS[rd] for th in _TAPS[rh] for tw in _TAPS[rw]]


def _gather_taps(xp, taps, d, h, w):
    return np.concatenate(
        [xp[:, sd:sd + d, sh:sh + h, sw:sw + w, :] for (_, sd), (_, sh), (_, sw) in taps], axis=-1)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed 3D convolution with kernel 4, stride 2, padding 1.

    ``x`` is (b, c_in, d, h, w), ``weight`` is (c_in, c_out, 4, 4, 4); the
    output is (b, c_out, 2d, 2h, 2w). Input voxel ``i`` scatters its kernel
    into output positions ``2*i + k - 1``; computed here as eight dense
    2x2x2 correlations, one per output parity class.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv_transpose3d expects 5-d input and weight, got {x.shape}, {weight.shape}")
    if weight.shape[2:] != (KERNEL,) * 3:
        raise DimensionError(f"conv_transpose3d supports only 4x4x4 kernels, got {weight.shape}")
    b, ci, d, h, w = x.shape
    if weight.shape[0] != ci:
        raise DimensionError(f"conv_transpose3d channel mismatch: input {x.shape}, weight {weight.shape}")
    co = weight.shape[1]
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv_transpose3d bias {bias.shape} vs {co} output channels")

    wd = weight.data
    xp = np.zeros((b, d + 2, h + 2, w + 2, ci), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x.data.transpose(0, 2, 3, 4, 1)
    n = b * d * h * w
    plan = []
    out = np.empty((b, d, 2, h, 2, w, 2, co), dtype=x.dtype)
    for parity in _PARITIES:
        taps = _parity_taps(parity)
        wp = np.concatenate([wd[:, :, kd, kh, kw] for (kd, _), (kh, _), (kw, _) in taps], axis=0)
        cols = _gather_taps(xp, taps, d, h, w).reshape(n, 8 * ci)
        rd, rh, rw = parity
        out[:, :, rd, :, rh, :, rw, :] = (cols @ wp).reshape(b, d, h, w, co)
        plan.append((parity, taps, wp))
    out = out.reshape(b, 2 * d, 2 * h, 2 * w, co)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(g):
        gl = g.transpose(0, 2, 3, 4, 1).reshape(b, d, 2, h, 2, w, 2, co)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for (rd, rh, rw), taps, wp in plan:
            gp = gl[:, :, rd, :, rh, :, rw, :].reshape(n, co)
            cols = _gather_taps(xp, taps, d, h, w).reshape(n, 8 * ci)
            gwp = cols.T @ gp
            gcols = (gp @ wp.T).reshape(b, d, h, w, 8, ci)
            for t, ((kd, sd), (kh, sh), (kw, sw)) in enumerate(taps):
                gw[:, :, kd, kh, kw] += gwp[t * ci:(t + 1) * ci]
                gxp[:, sd:sd + d, sh:sh + h, sw:sw + w, :] += gcols[..., t, :]
        gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1].transpose(0, 4, 1, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv_transpose3d", out, inputs, backward)


def check_scalar(t: Tensor) -> Tensor:
    if t.size != 1:
        raise ContractError(f"expected a scalar, got shape {t.shape}")
    return t
