"""Desk-scale embedding networks for stills and 8-frame clips."""

from __future__ import annotations

from math import prod
from typing import Iterable, Optional

import numpy as np

from ..tensor import Tensor
from .layers import (
    BatchNorm,
    BuildError,
    Conv,
    ConvLSTM2D,
    Dense,
    Flatten,
    InceptionBlock,
    Layer,
    LayerSpec,
    MaxPool,
)

CLIP_LENGTH = 8


class EmbeddingNet:
    """An ordered stack of layers ending in a linear embedding layer."""

    def __init__(self, arch: str, layers: list[Layer], input_shape: tuple, embedding_dim: int = 128,
                 seed: int = 0, config: Optional[dict] = None):
        self.arch = arch
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.config = dict(config or {})
        last = layers[-1]
        if not (isinstance(last, Dense) and last.spec.params["activation"] == "linear"
                and last.spec.params["units"] == embedding_dim):
            raise BuildError(f"final layer must be a linear dense layer of size {embedding_dim}")
        # validate the whole shape chain before allocating anything
        shape = self.input_shape
        self.shapes = [shape]
        for layer in layers:
            shape = layer.infer_shape(shape)
            self.shapes.append(shape)
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in layers:
            shape = layer.build(shape, rng)

    @property
    def layer_specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters():
                yield f"{i:02d}.{layer.kind}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def named_buffers(self) -> Iterable[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.buffers.items():
                yield f"{i:02d}.{layer.kind}.{name}", arr

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: t.data for name, t in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, arr in targets.items():
            if state[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def forward(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.input_shape:
            from ..tensor import ShapeError

            raise ShapeError(f"{self.arch} expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward


def embed(net: EmbeddingNet, inputs: np.ndarray, batch_size: int = 32, training: bool = False) -> np.ndarray:
    """Embedding rows for a stack of inputs (eval mode by default)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    rows = [net.forward(Tensor(inputs[i : i + batch_size]), training).data for i in range(0, len(inputs), batch_size)]
    if not rows:
        return np.zeros((0, net.embedding_dim))
    return np.concatenate(rows, axis=0)


def _w(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


INCEPTION_WIDTHS = (8, 16, 4, 4)


def build_inception_lite(input_shape=(3, 32, 32), embedding_dim: int = 128, scale: float = 1.0,
                         blocks: int = 2, hidden: int = 128, seed: int = 0) -> EmbeddingNet:
    """Stem conv, ``blocks`` inception blocks each followed by 2x2 pooling, dense, embedding."""
    input_shape = tuple(input_shape)
    if len(input_shape) != 3 or min(input_shape[1:]) < 16:
        raise BuildError(f"inception_lite needs a (3, H, W) input with H, W >= 16, got {input_shape}")
    b1, b3, b5, bp = (_w(v, scale) for v in INCEPTION_WIDTHS)
    layers: list[Layer] = [Conv("conv2d", _w(16, scale), (3, 3)), MaxPool("maxpool2d", (2, 2))]
    for _ in range(blocks):
        layers += [InceptionBlock(b1, _w(8, scale), b3, _w(4, scale), b5, bp), MaxPool("maxpool2d", (2, 2))]
    layers += [Flatten(), Dense(_w(hidden, scale), "relu"), Dense(embedding_dim, "linear")]
    config = dict(scale=scale, blocks=blocks, hidden=hidden)
    return EmbeddingNet("inception_lite", layers, input_shape, embedding_dim, seed, config)


def c3d_pool_schedule(t_len: int = CLIP_LENGTH) -> list[tuple[int, int, int]]:
    """(1,2,2) first, then (2,2,2) until the temporal axis reaches 1."""
    schedule = [(1, 2, 2)]
    while t_len > 1:
        schedule.append((2, 2, 2))
        t_len //= 2
    return schedule


def build_c3d_lite(input_shape=(3, CLIP_LENGTH, 32, 32), embedding_dim: int = 128, scale: float = 1.0,
                   hidden: int = 256, seed: int = 0) -> EmbeddingNet:
    input_shape = tuple(input_shape)
    if len(input_shape) != 4 or input_shape[1] != CLIP_LENGTH:
        raise BuildError(f"c3d_lite needs a (C, {CLIP_LENGTH}, H, W) clip, got {input_shape}")
    widths = (8, 16, 32, 32)
    layers: list[Layer] = []
    for width, window in zip(widths, c3d_pool_schedule()):
        layers += [Conv("conv3d", _w(width, scale), (3, 3, 3)), MaxPool("maxpool3d", window)]
    layers += [Flatten(), Dense(_w(hidden, scale), "relu"), Dense(embedding_dim, "linear")]
    return EmbeddingNet("c3d_lite", layers, input_shape, embedding_dim, seed, dict(scale=scale, hidden=hidden))


def build_lstm2d_lite(input_shape=(3, CLIP_LENGTH, 32, 32), embedding_dim: int = 128, filters: int = 16,
                      stages: int = 5, hidden: int = 128, seed: int = 0) -> EmbeddingNet:
    """Five (ConvLSTM -> spatial max-pool -> batchnorm) stages, flatten, dense, embedding.

    Inner stages pass the full hidden sequence on; the last stage keeps only
    the final hidden map.  Pooling halves each spatial axis that is still
    larger than 1.
    """
    input_shape = tuple(input_shape)
    if len(input_shape) != 4 or input_shape[1] != CLIP_LENGTH:
        raise BuildError(f"lstm2d_lite needs a (C, {CLIP_LENGTH}, H, W) clip, got {input_shape}")
    layers: list[Layer] = []
    h, w = input_shape[2:]
    for stage in range(stages):
        last = stage == stages - 1
        layers.append(ConvLSTM2D(filters, (3, 3), return_sequences=not last))
        ph, pw = min(2, h), min(2, w)
        layers.append(MaxPool("maxpool2d", (ph, pw)) if last else MaxPool("maxpool3d", (1, ph, pw)))
        layers.append(BatchNorm())
        h, w = h // ph, w // pw
    layers += [Flatten(), Dense(hidden, "relu"), Dense(embedding_dim, "linear")]
    config = dict(filters=filters, stages=stages, hidden=hidden)
    return EmbeddingNet("lstm2d_lite", layers, input_shape, embedding_dim, seed, config)


BUILDERS = {
    "inception_lite": build_inception_lite,
    "c3d_lite": build_c3d_lite,
    "lstm2d_lite": build_lstm2d_lite,
}

STILL_ARCHS = {"inception_lite"}
CLIP_ARCHS = {"c3d_lite", "lstm2d_lite"}


def build(arch: str, input_shape, embedding_dim: int = 128, seed: int = 0, **config) -> EmbeddingNet:
    if arch not in BUILDERS:
        raise BuildError(f"unknown architecture {arch!r}; choose from {sorted(BUILDERS)}")
    return BUILDERS[arch](input_shape=input_shape, embedding_dim=embedding_dim, seed=seed, **config)


def count_conv_params(c_in: int, filters: int, kernel: tuple) -> int:
    return filters * c_in * prod(kernel) + filters
