"""Differentiable layer operations built on :mod:`facemetric.tensor`.

Convolution and pooling are written once for any number of spatial axes
and exposed as 2-D and 3-D variants.  Inputs may be unbatched
(``[C, *spatial]``) or batched (``[N, C, *spatial]``); the output keeps the
same convention.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result, relu, sigmoid, tanh

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _as_tuple(value, n: int, name: str) -> tuple:
    if isinstance(value, int):
        value = (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ShapeError(f"{name} needs {n} entries, got {value}")
    return value


def output_extent(size: int, k: int, stride: int, padding: str) -> tuple[int, tuple[int, int]]:
    """Output length along one axis and the (before, after) padding used.

    ``same`` follows the TensorFlow convention: the output has
    ``ceil(size / stride)`` cells and any odd padding goes after.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if k > size:
            raise ShapeError(f"window {k} exceeds input extent {size} with valid padding")
        return (size - k) // stride + 1, (0, 0)
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, (total // 2, total - total // 2)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _windows(xp: np.ndarray, ksize: tuple, strides: tuple, outs: tuple) -> np.ndarray:
    """View of shape (N, C, *outs, *ksize) over the padded input."""
    nsp = len(ksize)
    win = sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + nsp)))
    sl = (slice(None), slice(None)) + tuple(slice(0, s * (o - 1) + 1, s) for s, o in zip(strides, outs))
    return win[sl]


def _offset_slices(offset: tuple, strides: tuple, outs: tuple) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(o0, o0 + s * (o - 1) + 1, s) for o0, s, o in zip(offset, strides, outs)
    )


def _batched(x: Tensor, nsp: int, op: str) -> bool:
    if x.ndim == nsp + 2:
        return True
    if x.ndim == nsp + 1:
        return False
    raise ShapeError(f"{op}: expected input of rank {nsp + 1} or {nsp + 2}, got shape {x.shape}")


class _ConvPlan:
    """Padding/stride bookkeeping shared by the forward and backward passes."""

    def __init__(self, in_shape: tuple, ksize: tuple, stride, padding: str):
        nsp = len(ksize)
        self.ksize = tuple(ksize)
        self.strides = _as_tuple(stride, nsp, "stride")
        outs, pads = zip(*(output_extent(sz, k, s, padding) for sz, k, s in zip(in_shape, self.ksize, self.strides)))
        self.outs, self.pads, self.in_shape = tuple(outs), tuple(pads), tuple(in_shape)
        self.spatial = tuple(range(2, 2 + nsp))

    def pad(self, xd: np.ndarray, value: float = 0.0) -> np.ndarray:
        if not any(sum(p) for p in self.pads):
            return xd
        return np.pad(xd, ((0, 0), (0, 0)) + self.pads, constant_values=value)

    def unpad(self, xp: np.ndarray) -> np.ndarray:
        return xp[(slice(None), slice(None)) + tuple(slice(a, a + s) for (a, _), s in zip(self.pads, self.in_shape))]

    def windows(self, xp: np.ndarray) -> np.ndarray:
        return _windows(xp, self.ksize, self.strides, self.outs)

    def offsets(self):
        for offset in itertools.product(*(range(k) for k in self.ksize)):
            yield offset, _offset_slices(offset, self.strides, self.outs)


def im2col(xp: np.ndarray, plan: _ConvPlan) -> np.ndarray:
    """Patch matrix of shape ``(C, *k, N, *outs)`` for a padded batch."""
    n, c = xp.shape[:2]
    cols = np.empty((c,) + plan.ksize + (n,) + plan.outs)
    for offset, sl in plan.offsets():
        cols[(slice(None),) + offset] = xp[sl].swapaxes(0, 1)
    return cols


def conv_forward(cols: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation from a patch matrix; returns ``(N, F, *outs)``."""
    f = w.shape[0]
    k = w[0].size
    out = w.reshape(f, k) @ cols.reshape(k, -1)
    # cols is (C, *k, N, *outs): drop the C and kernel axes
    return np.ascontiguousarray(out.reshape((f,) + cols.shape[w.ndim - 1 :]).swapaxes(0, 1))


def conv_grad_weights(g: np.ndarray, cols: np.ndarray, wshape: tuple) -> np.ndarray:
    f = g.shape[1]
    gf = g.swapaxes(0, 1).reshape(f, -1)
    return (gf @ cols.reshape(-1, gf.shape[1]).T).reshape(wshape)


def conv_grad_input(g: np.ndarray, w: np.ndarray, plan: _ConvPlan) -> np.ndarray:
    f, c = w.shape[:2]
    n = g.shape[0]
    gf = g.swapaxes(0, 1).reshape(f, -1)
    cols = (w.reshape(f, -1).T @ gf).reshape((c,) + plan.ksize + (n,) + plan.outs)
    padded = tuple(s + a + b for s, (a, b) in zip(plan.in_shape, plan.pads))
    gxp = np.zeros((c, n) + padded)
    for offset, sl in plan.offsets():
        gxp[sl] += cols[(slice(None),) + offset]
    return np.ascontiguousarray(plan.unpad(gxp).swapaxes(0, 1))


def conv(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    """N-d cross-correlation; ``kernels`` is ``[F, C, *k]`` and ``bias`` is ``[F]``."""
    nsp = kernels.ndim - 2
    if nsp < 1:
        raise ShapeError(f"kernels must be [F, C, *k], got {kernels.shape}")
    batched = _batched(x, nsp, "conv")
    xd = x.data if batched else x.data[None]
    c = xd.shape[1]
    f, ck = kernels.shape[:2]
    if c != ck:
        raise ShapeError(f"conv: input has {c} channels, kernels expect {ck}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv: bias shape {bias.shape} != ({f},)")
    plan = _ConvPlan(xd.shape[2:], kernels.shape[2:], stride, padding)
    w = kernels.data
    cols = im2col(plan.pad(xd), plan)
    out = conv_forward(cols, w)
    if bias is not None:
        out += bias.data.reshape((1, f) + (1,) * nsp)
    if not batched:
        out = out[0]

    def back(g):
        if not batched:
            g = g[None]
        gx = gw = None
        if kernels.requires_grad:
            gw = conv_grad_weights(g, cols, w.shape)
        if x.requires_grad:
            gx = conv_grad_input(g, w, plan)
            if not batched:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + plan.spatial)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return make_result(out, parents, back, f"conv{nsp}d")


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be [F, C, kh, kw], got {kernels.shape}")
    return conv(x, kernels, bias, stride, padding)


def conv3d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    if kernels.ndim != 5:
        raise ShapeError(f"conv3d kernels must be [F, C, kt, kh, kw], got {kernels.shape}")
    return conv(x, kernels, bias, stride, padding)


def maxpool(x: Tensor, window: Sequence[int], stride=None, padding: str = "valid") -> Tensor:
    """Max over each window; gradient goes to the first maximal cell in scan order."""
    window = tuple(int(w) for w in window)
    nsp = len(window)
    batched = _batched(x, nsp, "maxpool")
    xd = x.data if batched else x.data[None]
    plan = _ConvPlan(xd.shape[2:], window, window if stride is None else stride, padding)
    xp = plan.pad(xd, -np.inf)
    win = plan.windows(xp)
    flat = win.reshape(win.shape[: 2 + nsp] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def back(g):
        if not batched:
            g = g[None]
        gxp = np.zeros(xp.shape)
        for k, (_, sl) in enumerate(plan.offsets()):
            gxp[sl] += np.where(arg == k, g, 0.0)
        gx = plan.unpad(gxp)
        return (gx if batched else gx[0],)

    return make_result(out, (x,), back, f"maxpool{nsp}d")


def maxpool2d(x: Tensor, window=(2, 2), stride=None, padding: str = "valid") -> Tensor:
    return maxpool(x, _as_tuple(window, 2, "window"), stride, padding)


def maxpool3d(x: Tensor, window=(2, 2, 2), stride=None, padding: str = "valid") -> Tensor:
    return maxpool(x, _as_tuple(window, 3, "window"), stride, padding)


_ACTIVATIONS = {"linear": lambda t: t, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def dense(x: Tensor, weights: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    """``act(W x + b)`` for ``x`` of shape ``[n]`` or ``[N, n]`` and ``W`` of shape ``[m, n]``."""
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    m, n = weights.shape
    if x.shape[-1] != n or x.ndim not in (1, 2):
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias {bias.shape} != ({m},)")
    xd, w = x.data, weights.data

    def back(g):
        gx = g @ w if x.requires_grad else None
        gw = (np.outer(g, xd) if xd.ndim == 1 else g.T @ xd) if weights.requires_grad else None
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    y = make_result(xd @ w.T + bias.data, (x, weights, bias), back, "dense")
    return _ACTIVATIONS[activation](y)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode the batch statistics are used and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    m = xd.size // xd.shape[1]

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(xhat * g_ + b_, (x, gamma, beta), back, "batchnorm")


def row_distances(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows (last axis is the vector).

    The gradient at zero distance is taken as 0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def back(g):
        safe = np.where(d > 0, d, 1.0)
        coef = np.where(d > 0, g / safe, 0.0)[..., None]
        ga = coef * diff
        return ga, -ga

    return make_result(d, (a, b), back, "distance")


def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    """Scalar distance between two vectors."""
    if u.ndim != 1:
        raise ShapeError(f"euclidean_distance expects vectors, got {u.shape}")
    return row_distances(u, v)
