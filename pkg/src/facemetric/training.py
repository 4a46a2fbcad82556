"""Adam, the similarity-training loop and the margin search."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DataSplits, SampleSet
from .evaluation import EmbeddingSet, topn_retrieval_accuracy
from .losses import Margin, batch_loss
from .nets.builders import EmbeddingNet, embed
from .sampling import BatchPlan, IdentityIndex, make_pairs, mine_semihard_triplets, sample_batch
from .tensor import NonFiniteError, Tensor, backward, zero_grad

log = logging.getLogger(__name__)

LOSSES = ("contrastive", "triplet")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.lr < 1:
            raise ValueError(f"learning rate must be in [0, 1), got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


class AdamState:
    def __init__(self, shapes: Sequence[tuple]):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    @classmethod
    def for_params(cls, params: Sequence) -> "AdamState":
        return cls([np.shape(p.data if isinstance(p, Tensor) else p) for p in params])


def adam_step(params: Sequence, grads: Sequence[np.ndarray], state: AdamState, config: AdamConfig = AdamConfig(),
              names: Optional[Sequence[str]] = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` (Tensors or arrays)."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state must have equal length")
    names = names or [f"param[{i}]" for i in range(len(params))]
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    for name, arr, g in zip(names, arrays, grads):
        if np.shape(g) != arr.shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {arr.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for arr, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arr -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss: str = "triplet"
    margin: float = 1.0
    epochs: int = 25
    batches_per_epoch: Optional[int] = None  # None: one pass over the training samples
    adam: AdamConfig = AdamConfig()
    plan: BatchPlan = BatchPlan()
    seed: int = 0
    patience: int = 5
    min_delta: float = 1e-4
    val_batches: int = 4

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        object.__setattr__(self, "margin", Margin(self.margin).value)
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_top1: list[float] = field(default_factory=list)
    initial_val_top1: float = math.nan
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainHistory":
        return cls(**json.loads(text))


def _examples(emb: np.ndarray, labels: Sequence, batch, loss: str, margin: float, rng: np.random.Generator):
    if loss == "contrastive":
        return make_pairs(batch, rng)
    return mine_semihard_triplets(emb, labels, margin)


def _step_loss(net: EmbeddingNet, samples: SampleSet, batch, config: TrainConfig, rng, training: bool) -> Tensor:
    pos = np.array([sid for sid, _ in batch])
    labels = [label for _, label in batch]
    out = net.forward(Tensor(samples.x[pos]), training=training)
    examples = _examples(out.data, labels, batch, config.loss, config.margin, rng)
    return batch_loss(out, examples, config.margin)


def _fit_plan(plan: BatchPlan, index: IdentityIndex) -> BatchPlan:
    eligible = len(index.eligible(plan.per_identity))
    if eligible >= plan.identities:
        return plan
    if eligible < 2:
        raise ValueError("validation split needs at least two identities with two samples each")
    return BatchPlan(eligible, plan.per_identity)


def validation_metrics(net: EmbeddingNet, val: SampleSet, config: TrainConfig,
                       batches: Sequence) -> tuple[float, float]:
    """Mean loss over fixed validation batches and top-1 retrieval, both in eval mode."""
    emb = embed(net, val.x)
    rng = np.random.default_rng([config.seed, 3])
    losses = []
    for batch in batches:
        rows = np.array([sid for sid, _ in batch])
        labels = [label for _, label in batch]
        sub = emb[rows]
        examples = _examples(sub, labels, batch, config.loss, config.margin, rng)
        losses.append(batch_loss(Tensor(sub), examples, config.margin).item())
    top1 = topn_retrieval_accuracy(EmbeddingSet(emb, val.labels, val.ids), ns=(1,)).accuracy[1]
    return float(np.mean(losses)), float(top1)


def train(net: EmbeddingNet, splits: DataSplits, config: TrainConfig,
          on_epoch: Optional[Callable[[int, TrainHistory], None]] = None) -> TrainHistory:
    """Train ``net`` in place; returns the per-epoch history.

    Every step samples a P x K batch, embeds it in training mode, builds
    random pairs (contrastive) or semi-hard triplets (triplet), and applies
    one Adam update.  After each epoch the validation loss and validation
    top-1 retrieval are recorded.  Training stops early once the validation
    loss has not improved by ``min_delta`` for ``patience`` epochs.
    """
    train_set, val_set = splits.train, splits.validation
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng([config.seed, 2])
    index = IdentityIndex.from_labels(train_set.labels)
    sample_batch(index, config.plan, np.random.default_rng(0))  # fail fast if the plan cannot be met
    val_index = IdentityIndex.from_labels(val_set.labels)
    val_plan = _fit_plan(config.plan, val_index)
    val_rng = np.random.default_rng([config.seed, 4])
    val_batches = [sample_batch(val_index, val_plan, val_rng) for _ in range(config.val_batches)]
    steps = config.batches_per_epoch or max(1, math.ceil(len(train_set) / config.plan.batch_size))

    names, params = zip(*net.named_parameters())
    state = AdamState.for_params(params)
    history = TrainHistory()
    _, history.initial_val_top1 = validation_metrics(net, val_set, config, val_batches)
    best, stale = math.inf, 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            zero_grad(params)
            batch = sample_batch(index, config.plan, rng)
            loss = _step_loss(net, train_set, batch, config, rng, training=True)
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(params, grads, state, config.adam, names)
            losses.append(loss.item())
        val_loss, val_top1 = validation_metrics(net, val_set, config, val_batches)
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val_loss)
        history.val_top1.append(val_top1)
        log.info("epoch %d: train %.4f  val %.4f  val top-1 %.3f", epoch + 1, history.train_loss[-1], val_loss, val_top1)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if val_loss < best - config.min_delta:
            best, stale = val_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = epoch + 1 < config.epochs
                break
    zero_grad(params)
    return history


# ---------------------------------------------------------------------------
# margin search
# ---------------------------------------------------------------------------

INITIAL_MARGINS = (0.25, 0.5, 0.75, 1.0, 1.25)


@dataclass
class MarginSearchResult:
    best: float
    table: dict[float, float]  # margin -> score, in evaluation order
    rounds: int

    def rows(self) -> list[tuple[float, float]]:
        return sorted(self.table.items())


def margin_search(score: Callable[[float], float], initial: Sequence[float] = INITIAL_MARGINS,
                  extend_step: float = 0.25, tol: float = 1e-3, max_rounds: int = 3,
                  max_extend: int = 20) -> MarginSearchResult:
    """Pick the margin with the best score (higher is better).

    The initial grid is scored first.  If its winner is the largest
    candidate, margins are extended upward by ``extend_step`` while the score
    keeps improving by at least ``tol``.  Otherwise the winner is refined by
    trying ``best +/- step`` with the step halving each round, stopping after
    ``max_rounds`` or when a round improves by less than ``tol``.
    """
    initial = sorted(Margin(m).value for m in initial)
    if not initial:
        raise ValueError("no initial margins")
    table: dict[float, float] = {}

    def run(m: float) -> float:
        if m not in table:
            table[m] = float(score(m))
            log.info("margin %.4g -> %.4f", m, table[m])
        return table[m]

    for m in initial:
        run(m)
    best = max(initial, key=lambda m: (table[m], -m))
    rounds = 0
    if best == initial[-1] and len(initial) > 1:
        for _ in range(max_extend):
            rounds += 1
            nxt = best + extend_step
            if run(nxt) >= table[best] + tol:
                best = nxt
            else:
                break
    else:
        step = (initial[1] - initial[0]) / 2 if len(initial) > 1 else extend_step / 2
        for _ in range(max_rounds):
            rounds += 1
            cands = [m for m in (best - step, best + step) if m > 0]
            for m in cands:
                run(m)
            challenger = max(cands, key=lambda m: (table[m], -m), default=best)
            if cands and table[challenger] >= table[best] + tol:
                best = challenger
                step /= 2
            else:
                break
    return MarginSearchResult(best, table, rounds)


def validation_scorer(builder: Callable[[], EmbeddingNet], splits: DataSplits, loss: str,
                      epochs: int = 5, seed: int = 0, **train_kwargs) -> Callable[[float], float]:
    """Score a margin by the validation top-1 of a short training run."""

    def score(margin: float) -> float:
        net = builder()
        cfg = TrainConfig(loss=loss, margin=margin, epochs=epochs, seed=seed, **train_kwargs)
        history = train(net, splits, cfg)
        return history.val_top1[-1]

    return score
