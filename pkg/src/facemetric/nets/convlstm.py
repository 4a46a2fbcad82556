"""Convolutional LSTM: a single differentiable step and a fused sequence op.

Gate channels are stacked in the order input, forget, candidate, output,
so a kernel producing the gate pre-activations has ``4 * filters`` outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..functional import _ConvPlan, conv2d, conv_forward, conv_grad_input, conv_grad_weights, im2col
from ..tensor import ShapeError, Tensor, add, make_result, mul, sigmoid, tanh


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, filters: int, spatial: tuple, batch: int | None = None) -> "ConvLSTMState":
        shape = (filters,) + tuple(spatial) if batch is None else (batch, filters) + tuple(spatial)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def convlstm2d_step(x_t: Tensor, state: ConvLSTMState, params: dict) -> ConvLSTMState:
    """One gated update built from primitive tensor ops.

    ``params`` holds ``wx`` ``[4F, C, kh, kw]``, ``wh`` ``[4F, F, kh, kw]`` and
    ``b`` ``[4F]``.  Works on batched (``[N, C, H, W]``) or unbatched maps.
    """
    wx, wh, b = params["wx"], params["wh"], params["b"]
    f4 = wx.shape[0]
    if f4 % 4 or wh.shape[:2] != (f4, f4 // 4) or b.shape != (f4,):
        raise ShapeError(f"convlstm parameters do not compose: wx {wx.shape}, wh {wh.shape}, b {b.shape}")
    if state.h.shape != state.c.shape:
        raise ShapeError(f"hidden {state.h.shape} and cell {state.c.shape} differ")
    f = f4 // 4
    z = add(conv2d(x_t, wx, b, padding="same"), conv2d(state.h, wh, None, padding="same"))
    if z.shape[-2:] != state.h.shape[-2:]:
        raise ShapeError(f"input map {x_t.shape} does not match state {state.h.shape}")
    ax = z.ndim - 3

    def gate(k):
        key = (slice(None),) * ax + (slice(k * f, (k + 1) * f),)
        return z[key]

    i, fg, g, o = sigmoid(gate(0)), sigmoid(gate(1)), tanh(gate(2)), sigmoid(gate(3))
    c = add(mul(fg, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return ConvLSTMState(h, c)


def convlstm2d(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, return_sequences: bool = True) -> Tensor:
    """Run a ConvLSTM over ``x`` of shape ``[N, C, T, H, W]`` from a zero state.

    Returns the hidden maps for every step (``[N, F, T, H, W]``) or only the
    last one (``[N, F, H, W]``).  Backpropagation through time is done by hand
    so the whole sequence is a single graph node.
    """
    if x.ndim != 5:
        raise ShapeError(f"convlstm2d expects [N, C, T, H, W], got {x.shape}")
    n, c, t_len, hh, ww = x.shape
    f4 = wx.shape[0]
    f = f4 // 4
    if f4 % 4 or wx.shape[1] != c or wh.shape[:2] != (f4, f) or b.shape != (f4,):
        raise ShapeError(f"convlstm parameters do not compose with input {x.shape}: wx {wx.shape}, wh {wh.shape}")

    # input contributions for all steps at once: fold time into the batch axis
    xs = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3, 4)).reshape(n * t_len, c, hh, ww)
    plan_x = _ConvPlan((hh, ww), wx.shape[2:], 1, "same")
    plan_h = _ConvPlan((hh, ww), wh.shape[2:], 1, "same")
    xcols = im2col(plan_x.pad(xs), plan_x)
    zx = conv_forward(xcols, wx.data).reshape(n, t_len, f4, hh, ww)
    zx += b.data.reshape(1, 1, f4, 1, 1)

    hs = np.zeros((t_len + 1, n, f, hh, ww))
    cs = np.zeros((t_len + 1, n, f, hh, ww))
    gates = np.empty((t_len, n, f4, hh, ww))
    hcols = [None] * t_len
    for t in range(t_len):
        z = zx[:, t]
        if t > 0:
            hcols[t] = im2col(plan_h.pad(hs[t]), plan_h)
            z = z + conv_forward(hcols[t], wh.data)
        a = gates[t]
        a[:, : 2 * f] = expit(z[:, : 2 * f])
        a[:, 2 * f : 3 * f] = np.tanh(z[:, 2 * f : 3 * f])
        a[:, 3 * f :] = expit(z[:, 3 * f :])
        i, fg, g, o = a[:, :f], a[:, f : 2 * f], a[:, 2 * f : 3 * f], a[:, 3 * f :]
        cs[t + 1] = fg * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])

    out = np.ascontiguousarray(hs[1:].transpose(1, 2, 0, 3, 4)) if return_sequences else hs[-1].copy()

    def back(gout):
        if return_sequences:
            gh_seq = gout.transpose(2, 0, 1, 3, 4)
        dz = np.empty((t_len, n, f4, hh, ww))
        gwh = np.zeros(wh.shape)
        dh = np.zeros((n, f, hh, ww))
        dc = np.zeros((n, f, hh, ww))
        for t in reversed(range(t_len)):
            if return_sequences:
                dh = dh + gh_seq[t]
            elif t == t_len - 1:
                dh = dh + gout
            a = gates[t]
            i, fg, g, o = a[:, :f], a[:, f : 2 * f], a[:, 2 * f : 3 * f], a[:, 3 * f :]
            tc = np.tanh(cs[t + 1])
            dc = dc + dh * o * (1.0 - tc * tc)
            d = dz[t]
            d[:, :f] = dc * g * i * (1.0 - i)
            d[:, f : 2 * f] = dc * cs[t] * fg * (1.0 - fg)
            d[:, 2 * f : 3 * f] = dc * i * (1.0 - g * g)
            d[:, 3 * f :] = dh * tc * o * (1.0 - o)
            dc = dc * fg
            if t > 0:
                gwh += conv_grad_weights(d, hcols[t], wh.shape)
                dh = conv_grad_input(d, wh.data, plan_h)
            else:
                dh = None
        dzf = np.ascontiguousarray(dz.transpose(1, 0, 2, 3, 4)).reshape(n * t_len, f4, hh, ww)
        gb = dzf.sum(axis=(0, 2, 3))
        gwx = conv_grad_weights(dzf, xcols, wx.shape) if wx.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = conv_grad_input(dzf, wx.data, plan_x).reshape(n, t_len, c, hh, ww).transpose(0, 2, 1, 3, 4)
        return gx, gwx, gwh, gb

    return make_result(out, (x, wx, wh, b), back, "convlstm2d")
