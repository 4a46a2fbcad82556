"""Layer objects: a :class:`LayerSpec` plus parameters and a forward pass.

Shapes handled here exclude the batch axis: ``(C, H, W)`` for still maps and
``(C, T, H, W)`` for clips.  ``infer_shape`` performs the symbolic shape
propagation used to validate a network before any parameter is allocated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .. import functional as F
from ..tensor import ShapeError, Tensor, concat_channels, flatten, relu, sigmoid, tanh
from .convlstm import convlstm2d


class BuildError(ValueError):
    """Raised when a network description cannot be realised for an input shape."""


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)


_ACT = {"linear": lambda t: t, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _pool_extent(size: int, k: int, s: int, padding: str) -> int:
    try:
        return F.output_extent(size, k, s, padding)[0]
    except ShapeError as exc:
        raise BuildError(str(exc)) from exc


class Layer:
    kind = ""

    def __init__(self, **params):
        self.spec = LayerSpec(self.kind, dict(params))
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def infer_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def build(self, shape: tuple, rng: np.random.Generator) -> tuple:
        return self.infer_shape(shape)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def named_parameters(self):
        yield from self.params.items()


class Conv(Layer):
    """``conv2d`` or ``conv3d`` with an activation."""

    def __init__(self, kind: str, filters: int, kernel: tuple, activation: str = "relu",
                 stride=1, padding: str = "same"):
        self.kind = kind
        super().__init__(filters=filters, kernel=tuple(kernel), activation=activation,
                         stride=stride, padding=padding)

    @property
    def nsp(self) -> int:
        return 2 if self.kind == "conv2d" else 3

    def infer_shape(self, shape):
        p = self.spec.params
        if len(shape) != self.nsp + 1 or len(p["kernel"]) != self.nsp:
            raise BuildError(f"{self.kind} cannot take input {shape} with kernel {p['kernel']}")
        stride = F._as_tuple(p["stride"], self.nsp, "stride")
        outs = tuple(_pool_extent(sz, k, s, p["padding"]) for sz, k, s in zip(shape[1:], p["kernel"], stride))
        return (p["filters"],) + outs

    def build(self, shape, rng):
        out = self.infer_shape(shape)
        p = self.spec.params
        c, k = shape[0], prod(p["kernel"])
        self.params["w"] = glorot(rng, (p["filters"], c) + p["kernel"], c * k, p["filters"] * k)
        self.params["b"] = Tensor(np.zeros(p["filters"]), requires_grad=True)
        return out

    def forward(self, x, training):
        p = self.spec.params
        y = F.conv(x, self.params["w"], self.params["b"], p["stride"], p["padding"])
        return _ACT[p["activation"]](y)


class MaxPool(Layer):
    def __init__(self, kind: str, window: tuple, stride=None, padding: str = "valid"):
        self.kind = kind
        window = tuple(window)
        super().__init__(window=window, stride=window if stride is None else stride, padding=padding)

    def infer_shape(self, shape):
        p = self.spec.params
        if len(shape) != len(p["window"]) + 1:
            raise BuildError(f"{self.kind} window {p['window']} does not fit input {shape}")
        stride = F._as_tuple(p["stride"], len(p["window"]), "stride")
        return (shape[0],) + tuple(
            _pool_extent(sz, k, s, p["padding"]) for sz, k, s in zip(shape[1:], p["window"], stride)
        )

    def forward(self, x, training):
        p = self.spec.params
        return F.maxpool(x, p["window"], p["stride"], p["padding"])


class BatchNorm(Layer):
    """Batch normalisation whose eval statistics are zero-debiased moving averages.

    The moving averages start at zero and are divided by ``1 - momentum**t``
    after ``t`` updates, so the eval-mode statistics track the data from the
    first training step.  Before any update they are mean 0 and variance 1.
    """

    kind = "batchnorm"

    def __init__(self, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__(momentum=momentum, eps=eps)

    def infer_shape(self, shape):
        return shape

    def build(self, shape, rng):
        c = shape[0]
        self.params["gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        self.buffers["ema_mean"] = np.zeros(c)
        self.buffers["ema_var"] = np.zeros(c)
        self.buffers["updates"] = np.zeros(1)
        return shape

    def forward(self, x, training):
        p, b = self.spec.params, self.buffers
        if not training:
            return F.batchnorm(x, self.params["gamma"], self.params["beta"], b["running_mean"], b["running_var"],
                               False, p["momentum"], p["eps"])
        out = F.batchnorm(x, self.params["gamma"], self.params["beta"], b["ema_mean"], b["ema_var"],
                          True, p["momentum"], p["eps"])
        b["updates"] += 1
        debias = 1.0 - p["momentum"] ** b["updates"][0]
        b["running_mean"][...] = b["ema_mean"] / debias
        b["running_var"][...] = b["ema_var"] / debias
        return out


class Flatten(Layer):
    kind = "flatten"

    def infer_shape(self, shape):
        return (prod(shape),)

    def forward(self, x, training):
        return flatten(x)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int, activation: str = "linear"):
        super().__init__(units=units, activation=activation)

    def infer_shape(self, shape):
        if len(shape) != 1:
            raise BuildError(f"dense needs a flat input, got {shape}")
        return (self.spec.params["units"],)

    def build(self, shape, rng):
        m = self.spec.params["units"]
        self.params["w"] = glorot(rng, (m, shape[0]), shape[0], m)
        self.params["b"] = Tensor(np.zeros(m), requires_grad=True)
        return (m,)

    def forward(self, x, training):
        return F.dense(x, self.params["w"], self.params["b"], self.spec.params["activation"])


class InceptionBlock(Layer):
    """Parallel 1x1, 1x1->3x3, 1x1->5x5 and pool->1x1 branches joined on channels."""

    kind = "inception_block"

    def __init__(self, b1: int, r3: int, b3: int, r5: int, b5: int, pool_proj: int):
        super().__init__(b1=b1, r3=r3, b3=b3, r5=r5, b5=b5, pool_proj=pool_proj)
        p = self.spec.params
        self.branches = [
            [Conv("conv2d", p["b1"], (1, 1))],
            [Conv("conv2d", p["r3"], (1, 1)), Conv("conv2d", p["b3"], (3, 3))],
            [Conv("conv2d", p["r5"], (1, 1)), Conv("conv2d", p["b5"], (5, 5))],
            [MaxPool("maxpool2d", (3, 3), stride=1, padding="same"), Conv("conv2d", p["pool_proj"], (1, 1))],
        ]

    @property
    def out_channels(self) -> int:
        p = self.spec.params
        return p["b1"] + p["b3"] + p["b5"] + p["pool_proj"]

    def infer_shape(self, shape):
        if len(shape) != 3:
            raise BuildError(f"inception block needs a (C, H, W) map, got {shape}")
        for branch in self.branches:
            s = shape
            for layer in branch:
                s = layer.infer_shape(s)
            if s[1:] != shape[1:]:
                raise BuildError("inception branches must preserve spatial extent")
        return (self.out_channels,) + tuple(shape[1:])

    def build(self, shape, rng):
        out = self.infer_shape(shape)
        for branch in self.branches:
            s = shape
            for layer in branch:
                s = layer.build(s, rng)
        return out

    def forward(self, x, training):
        outs = []
        for branch in self.branches:
            y = x
            for layer in branch:
                y = layer.forward(y, training)
            outs.append(y)
        return concat_channels(outs)

    def named_parameters(self):
        for bi, branch in enumerate(self.branches):
            for li, layer in enumerate(branch):
                for name, t in layer.named_parameters():
                    yield f"branch{bi}.{li}.{name}", t


class ConvLSTM2D(Layer):
    """ConvLSTM over a clip ``(C, T, H, W)``; yields the hidden sequence or the last map."""

    kind = "convlstm2d"

    def __init__(self, filters: int, kernel=(3, 3), return_sequences: bool = True, forget_bias: float = 1.0):
        super().__init__(filters=filters, kernel=tuple(kernel), return_sequences=return_sequences,
                         forget_bias=forget_bias)

    def infer_shape(self, shape):
        if len(shape) != 4:
            raise BuildError(f"convlstm2d needs a (C, T, H, W) clip, got {shape}")
        f = self.spec.params["filters"]
        return (f,) + tuple(shape[1:]) if self.spec.params["return_sequences"] else (f,) + tuple(shape[2:])

    def build(self, shape, rng):
        out = self.infer_shape(shape)
        p = self.spec.params
        f, c, k = p["filters"], shape[0], prod(p["kernel"])
        self.params["wx"] = glorot(rng, (4 * f, c) + p["kernel"], c * k, 4 * f * k)
        self.params["wh"] = glorot(rng, (4 * f, f) + p["kernel"], f * k, 4 * f * k)
        b = np.zeros(4 * f)
        b[f : 2 * f] = p["forget_bias"]
        self.params["b"] = Tensor(b, requires_grad=True)
        return out

    def forward(self, x, training):
        return convlstm2d(x, self.params["wx"], self.params["wh"], self.params["b"],
                          self.spec.params["return_sequences"])
