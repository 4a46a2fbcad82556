"""Contrastive and triplet losses on Euclidean embedding distances.

Pair labels follow the convention ``Y = 0`` for the same identity and
``Y = 1`` for different identities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from .functional import row_distances
from .tensor import Tensor, as_tensor, mean, mul, relu


@dataclass(frozen=True)
class Margin:
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"margin must be finite and non-negative, got {self.value}")
        object.__setattr__(self, "value", v)

    def __float__(self) -> float:
        return self.value


MarginLike = Union[Margin, float]


def _margin(m: MarginLike) -> float:
    return Margin(float(m)).value


class PairExample(NamedTuple):
    i: int
    j: int
    y: int


class TripletExample(NamedTuple):
    a: int
    p: int
    n: int


def triplet_terms(d_ap: Tensor, d_an: Tensor, margin: MarginLike) -> Tensor:
    """Per-triplet hinge ``max(d_ap - d_an + margin, 0)``."""
    return relu(d_ap - d_an + _margin(margin))


def contrastive_terms(d: Tensor, y: np.ndarray, margin: MarginLike) -> Tensor:
    """Per-pair ``0.5 (1-Y) d^2 + 0.5 Y max(0, margin - d)^2``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("pair labels must be 0 (same identity) or 1 (different)")
    y = np.broadcast_to(y, d.shape).copy()
    pos = mul(d * d, Tensor(0.5 * (1.0 - y)))
    hinge = relu(-d + _margin(margin))
    neg = mul(hinge * hinge, Tensor(0.5 * y))
    return pos + neg


def triplet_loss(e_a, e_p, e_n, margin: MarginLike) -> Tensor:
    e_a, e_p, e_n = as_tensor(e_a), as_tensor(e_p), as_tensor(e_n)
    return triplet_terms(row_distances(e_a, e_p), row_distances(e_a, e_n), margin)


def contrastive_loss(e_i, e_j, y: int, margin: MarginLike) -> Tensor:
    if y not in (0, 1):
        raise ValueError(f"Y must be 0 or 1, got {y!r}")
    return contrastive_terms(row_distances(as_tensor(e_i), as_tensor(e_j)), np.float64(y), margin)


def batch_loss(embeddings, examples: Sequence, margin: MarginLike) -> Tensor:
    """Mean loss over a list of :class:`PairExample` or :class:`TripletExample`.

    ``embeddings`` is a ``[B, d]`` tensor; gradients flow back into it.
    """
    if not examples:
        raise ValueError("batch_loss needs at least one example")
    emb = as_tensor(embeddings)
    idx = np.asarray(examples, dtype=np.int64)
    refs = idx if isinstance(examples[0], TripletExample) else idx[:, :2]
    if refs.min() < 0 or refs.max() >= emb.shape[0]:
        raise IndexError("example index outside the embedding batch")
    if isinstance(examples[0], TripletExample):
        a, p, n = emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]]
        return mean(triplet_terms(row_distances(a, p), row_distances(a, n), margin))
    if isinstance(examples[0], PairExample):
        d = row_distances(emb[idx[:, 0]], emb[idx[:, 1]])
        return mean(contrastive_terms(d, idx[:, 2], margin))
    raise TypeError(f"unsupported example type {type(examples[0]).__name__}")
