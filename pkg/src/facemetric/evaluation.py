"""Cosine top-n retrieval and n-shot identification with a linear SVM."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

# cosines this close are one tie (equal in exact arithmetic, a few ulps apart in float64)
TIE_TOL = 1e-12


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (N, d)
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.ids = np.arange(len(self.labels)) if self.ids is None else np.asarray(self.ids)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("embedding rows, labels and ids must align")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embeddings contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, index) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[index], self.labels[index], self.ids[index])

    # -- delimited text format: id,label,e0..e{d-1} ----------------------
    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"e{k}" for k in range(self.dim)])
        for sid, label, row in zip(self.ids, self.labels, self.vectors):
            writer.writerow([sid, label] + [repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "EmbeddingSet":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else source
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[:2] != ["id", "label"]:
            raise ValueError("embedding file must start with an 'id,label,e0,...' header")
        ids = [int(r[0]) if r[0].lstrip("-").isdigit() else r[0] for r in body]
        return cls(np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(header) - 2),
                   np.array([r[1] for r in body]), np.array(ids))


def cosine_similarity(u, v) -> float:
    """``u.v / (|u| |v|)``; a zero vector has similarity 0 (logged)."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        log.warning("cosine similarity with a zero vector taken as 0")
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d zero embedding(s); their similarities are taken as 0", int(zero.sum()))
    unit = x / np.where(zero, 1.0, norms)[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


@dataclass
class RetrievalReport:
    accuracy: dict[int, float]
    queries: int
    excluded: int = 0

    def row(self, ns: Sequence[int] = (1, 3, 5)) -> list[float]:
        return [self.accuracy[n] for n in ns]


def rank_with_ties(scores: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Positions sorted by descending score; scores within ``tol`` of their neighbour keep input order."""
    order = np.argsort(-scores, kind="stable")
    group = np.concatenate([[0], np.cumsum(np.diff(-scores[order]) > tol)])
    return order[np.lexsort((order, group))]


def topn_retrieval_accuracy(emb: EmbeddingSet, ns=(1, 3, 5)) -> RetrievalReport:
    """Fraction of queries whose ``n`` most cosine-similar other samples include a same-label one.

    Candidates are ranked by descending similarity, ties by ascending sample
    id.  Similarities closer than ``TIE_TOL`` count as tied, so cosines that
    are equal in exact arithmetic tie regardless of rounding.  Queries without any same-label candidate are left out and counted.
    """
    ns = (ns,) if isinstance(ns, int) else tuple(ns)
    n_samples = len(emb)
    if min(ns) < 1:
        raise ValueError("n must be positive")
    if max(ns) >= n_samples:
        raise ValueError(f"n={max(ns)} needs more than {n_samples} samples")
    sim = cosine_matrix(emb.vectors)
    same = emb.labels[:, None] == emb.labels[None, :]
    np.fill_diagonal(same, False)
    valid = same.any(axis=1)
    hits = {n: 0 for n in ns}
    order_ids = np.argsort(emb.ids, kind="stable")
    for q in np.flatnonzero(valid):
        cand = order_ids[order_ids != q]
        ranked = cand[rank_with_ties(sim[q, cand])]
        first_hit = int(np.argmax(same[q, ranked]))
        for n in ns:
            hits[n] += first_hit < n
    evaluated = int(valid.sum())
    acc = {n: (hits[n] / evaluated if evaluated else float("nan")) for n in ns}
    return RetrievalReport(acc, evaluated, n_samples - evaluated)


# ---------------------------------------------------------------------------
# linear SVM
# ---------------------------------------------------------------------------

@dataclass
class LinearSvmModel:
    classes: list
    weights: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    C: float
    tol: float
    max_iter: int
    n_iter: int = 0
    converged: bool = True

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        scores = self.decision_function(x)
        # classes are stored sorted, so argmax's first-index rule picks the smallest label
        return np.asarray(self.classes, dtype=object)[np.argmax(scores, axis=1)]

    def score(self, x: np.ndarray, y: Sequence) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y, dtype=object)))


def train_linear_svm(features: np.ndarray, labels: Sequence, C: float = 1.0, tol: float = 1e-6,
                     max_iter: int = 2000) -> LinearSvmModel:
    """One-vs-rest L2-regularised hinge-loss SVMs by dual coordinate descent.

    Each binary problem solves ``min 0.5 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))``
    with the bias folded in as a constant feature.  Samples are visited in
    their given order every epoch; a problem stops once the spread of its
    projected gradients falls below ``tol`` or after ``max_iter`` epochs.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError("features must be (N, d) aligned with labels")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or Inf")
    if C <= 0:
        raise ValueError("C must be positive")
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("an SVM needs at least two classes")
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    y = np.where(labels[None, :] == np.asarray(classes, dtype=object)[:, None], 1.0, -1.0)  # (K, N)
    k = len(classes)
    alpha = np.zeros((k, n))
    w = np.zeros((k, d + 1))
    qii = np.einsum("ij,ij->i", xa, xa)
    active = np.ones(k, dtype=bool)
    epoch = 0
    for epoch in range(1, max_iter + 1):
        pg_max = np.full(k, -np.inf)
        pg_min = np.full(k, np.inf)
        for i in range(n):
            yi = y[:, i]
            grad = yi * (w @ xa[i]) - 1.0
            a = alpha[:, i]
            pg = np.where(a <= 0, np.minimum(grad, 0.0), np.where(a >= C, np.maximum(grad, 0.0), grad))
            pg_max = np.maximum(pg_max, pg)
            pg_min = np.minimum(pg_min, pg)
            new = np.clip(a - grad / qii[i], 0.0, C)
            step = np.where(active & (pg != 0), new - a, 0.0)
            alpha[:, i] = a + step
            w += (step * yi)[:, None] * xa[i][None, :]
        active &= (pg_max - pg_min) > tol
        if not active.any():
            break
    converged = not active.any()
    if not converged:
        log.info("linear SVM hit max_iter=%d before reaching tol=%g", max_iter, tol)
    return LinearSvmModel(classes, w[:, :d].copy(), w[:, d].copy(), float(C), tol, max_iter, epoch, converged)


# ---------------------------------------------------------------------------
# n-shot identification and C search
# ---------------------------------------------------------------------------

@dataclass
class NShotResult:
    n: int
    accuracy: float
    train_size: int
    test_size: int
    excluded: list = field(default_factory=list)


def nshot_eval(emb: EmbeddingSet, n: int, C: float, rng: np.random.Generator) -> NShotResult:
    """Train on ``n`` random samples per identity, score on all remaining samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    train_idx, test_idx, excluded = [], [], []
    for label in sorted(set(emb.labels.tolist())):
        pos = np.flatnonzero(emb.labels == label)
        if len(pos) < n + 1:
            excluded.append(label)
            continue
        pick = rng.choice(len(pos), size=n, replace=False)
        mask = np.zeros(len(pos), dtype=bool)
        mask[pick] = True
        train_idx.extend(pos[mask])
        test_idx.extend(pos[~mask])
    if len(set(emb.labels.tolist())) - len(excluded) < 2:
        raise ValueError(f"n={n}: fewer than two identities have {n + 1} or more samples")
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)
    model = train_linear_svm(emb.vectors[train_idx], emb.labels[train_idx], C)
    acc = model.score(emb.vectors[test_idx], emb.labels[test_idx])
    return NShotResult(n, acc, len(train_idx), len(test_idx), excluded)


def stratified_folds(labels: Sequence, folds: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Fold number per sample; each class is dealt round-robin across folds."""
    labels = np.asarray(labels, dtype=object)
    fold = np.empty(len(labels), dtype=np.int64)
    for label in sorted(set(labels.tolist())):
        pos = np.flatnonzero(labels == label)
        if rng is not None:
            pos = pos[rng.permutation(len(pos))]
        fold[pos] = np.arange(len(pos)) % folds
    return fold


def grid_search_C(emb: EmbeddingSet, candidates: Sequence[float], folds: int = 3,
                  rng: Optional[np.random.Generator] = None) -> tuple[float, dict[float, float]]:
    """Best ``C`` by stratified k-fold accuracy; ties go to the smallest ``C``."""
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("no candidate C values")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    smallest = min(np.sum(emb.labels == c) for c in set(emb.labels.tolist()))
    if smallest < folds:
        reduced = max(2, int(smallest))
        log.warning("reducing folds from %d to %d: a class has only %d samples", folds, reduced, smallest)
        folds = reduced
    if len(candidates) == 1:
        return candidates[0], {}
    assign = stratified_folds(emb.labels, folds, rng)
    scores = {}
    for c in candidates:
        accs = []
        for k in range(folds):
            tr, te = assign != k, assign == k
            model = train_linear_svm(emb.vectors[tr], emb.labels[tr], c)
            accs.append(model.score(emb.vectors[te], emb.labels[te]))
        scores[c] = float(np.mean(accs))
    best = max(candidates, key=lambda c: (scores[c], -c))
    return best, scores


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
