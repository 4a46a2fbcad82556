"""Identity-balanced batches, random pairs and semi-hard triplet mining."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .losses import MarginLike, PairExample, TripletExample, _margin


class InsufficientDataError(ValueError):
    """Not enough identities or samples to honour a batch plan."""


class IdentityIndex:
    """Mapping identity label -> sample ids (positions within one split)."""

    def __init__(self, groups: dict[Hashable, list[int]]):
        seen: set[int] = set()
        for label, ids in groups.items():
            if not ids:
                raise ValueError(f"identity {label!r} has no samples")
            if seen.intersection(ids):
                raise ValueError("a sample id appears under more than one identity")
            seen.update(ids)
        self.groups = {label: list(ids) for label, ids in groups.items()}

    @classmethod
    def from_labels(cls, labels: Sequence) -> "IdentityIndex":
        groups: dict = defaultdict(list)
        for pos, label in enumerate(labels):
            groups[label].append(pos)
        return cls(dict(groups))

    def eligible(self, k: int) -> list:
        return sorted(label for label, ids in self.groups.items() if len(ids) >= k)

    def __len__(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class BatchPlan:
    identities: int = 16
    per_identity: int = 2

    def __post_init__(self):
        if self.identities < 1 or self.per_identity < 2:
            raise ValueError(f"need P >= 1 and K >= 2, got P={self.identities}, K={self.per_identity}")

    @property
    def batch_size(self) -> int:
        return self.identities * self.per_identity


def sample_batch(index: IdentityIndex, plan: BatchPlan, rng: np.random.Generator) -> list[tuple[int, Hashable]]:
    """P distinct identities with K samples each, drawn without replacement."""
    pool = index.eligible(plan.per_identity)
    if len(pool) < plan.identities:
        raise InsufficientDataError(
            f"batch plan needs {plan.identities} identities with >= {plan.per_identity} samples, "
            f"only {len(pool)} are eligible"
        )
    batch = []
    for li in rng.choice(len(pool), size=plan.identities, replace=False):
        label = pool[li]
        for sid in rng.choice(index.groups[label], size=plan.per_identity, replace=False):
            batch.append((int(sid), label))
    return batch


def make_pairs(batch: Sequence[tuple[int, Hashable]], rng: np.random.Generator) -> list[PairExample]:
    """One positive pair per identity plus as many random cross-identity pairs.

    Pair indices refer to positions within ``batch``.
    """
    by_label: dict = defaultdict(list)
    for pos, (_, label) in enumerate(batch):
        by_label[label].append(pos)
    if any(len(v) != 2 for v in by_label.values()):
        raise ValueError("make_pairs supports only plans with exactly 2 samples per identity")
    positives = [PairExample(v[0], v[1], 0) for v in by_label.values()]
    labels = [label for _, label in batch]
    candidates = [(i, j) for i in range(len(batch)) for j in range(i + 1, len(batch)) if labels[i] != labels[j]]
    chosen = rng.choice(len(candidates), size=min(len(positives), len(candidates)), replace=False)
    negatives = [PairExample(*candidates[c], 1) for c in chosen]
    return positives + negatives


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _first_min(values: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate with the smallest value, lowest index on ties."""
    return int(candidates[np.argmin(values[candidates])])


def mine_semihard_triplets(embeddings: np.ndarray, labels: Sequence, margin: MarginLike) -> list[TripletExample]:
    """One triplet per ordered same-identity (anchor, positive) pair.

    The negative is the nearest one inside ``(d_ap, d_ap + margin)``; if that
    band is empty, the nearest negative beyond ``d_ap``; failing that, the
    nearest negative overall.
    """
    m = _margin(margin)
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    dist = pairwise_distances(emb)
    idx = np.arange(len(labels))
    triplets = []
    for a in idx:
        positives = idx[(labels == labels[a]) & (idx != a)]
        negatives = idx[labels != labels[a]]
        if positives.size == 0 or negatives.size == 0:
            continue
        d_an = dist[a]
        for p in positives:
            d_ap = dist[a, p]
            band = negatives[(d_an[negatives] > d_ap) & (d_an[negatives] < d_ap + m)]
            if band.size:
                n = _first_min(d_an, band)
            else:
                beyond = negatives[d_an[negatives] > d_ap]
                n = _first_min(d_an, beyond if beyond.size else negatives)
            triplets.append(TripletExample(int(a), int(p), n))
    if not triplets:
        raise ValueError("no anchor has both a positive and a negative in this batch")
    return triplets
