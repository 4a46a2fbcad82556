"""Experiment specifications and multi-seed runs.

A run trains one fresh network per seed on that seed's identity split,
embeds the test identities, scores top-n retrieval and n-shot SVM
identification, and aggregates every metric as mean and sample standard
deviation across seeds.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import DataSplits, Video, build_splits, generate_synthetic_identities, ingest_frames
from .evaluation import EmbeddingSet, grid_search_C, mean_std, nshot_eval, topn_retrieval_accuracy
from .nets.builders import BUILDERS, CLIP_ARCHS, STILL_ARCHS, EmbeddingNet, build, embed
from .nets.checkpoint import load_checkpoint, save_checkpoint
from .training import LOSSES, AdamConfig, MarginSearchResult, TrainConfig, TrainHistory, margin_search, train, \
    validation_scorer

log = logging.getLogger(__name__)

__version__ = "0.1.0"

# Tuned margin and SVM C for each (architecture, loss), used when the spec file says "tuned".
TUNED_MARGINS = {
    ("inception_lite", "contrastive"): 1.0, ("c3d_lite", "contrastive"): 0.125,
    ("lstm2d_lite", "contrastive"): 0.125, ("inception_lite", "triplet"): 1.25,
    ("c3d_lite", "triplet"): 1.5, ("lstm2d_lite", "triplet"): 2.0,
}
TUNED_SVM_C = {
    ("inception_lite", "contrastive"): 0.001, ("c3d_lite", "contrastive"): 0.001,
    ("lstm2d_lite", "contrastive"): 10.0, ("inception_lite", "triplet"): 10.0,
    ("c3d_lite", "triplet"): 10.0, ("lstm2d_lite", "triplet"): 0.1,
}
C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


class SpecError(ValueError):
    """The experiment description is inconsistent or incomplete."""


class SeedFailure(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        super().__init__(f"seed {seed} failed: {type(cause).__name__}: {cause}")
        self.seed = seed


def _ints(text: str) -> list[int]:
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.replace(",", " ").split()]


@dataclass(frozen=True)
class DataSource:
    path: Optional[str] = None  # frame store on disk; None means synthetic
    num_ids: int = 20
    clips_per_id: int = 4
    frames_per_clip: int = 24
    height: int = 32
    width: int = 32
    seed: int = 0

    def synthetic_args(self) -> dict:
        return dict(num_ids=self.num_ids, clips_per_id=self.clips_per_id, frames_per_clip=self.frames_per_clip,
                    height=self.height, width=self.width, seed=self.seed)


@dataclass(frozen=True)
class ExperimentSpec:
    arch: str = "inception_lite"
    loss: str = "contrastive"
    margin: Union[float, str] = "tuned"  # a value, "tuned" or "search"
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 25
    batches_per_epoch: Optional[int] = None
    learning_rate: float = 1e-4
    validation_mode: str = "samples"
    data: DataSource = DataSource()
    retrieval_ns: tuple = (1, 3, 5)
    nshot: tuple = tuple(range(1, 11))
    nshot_draws: int = 1
    svm_c: Union[float, str] = "tuned"  # a value, "tuned" or "search"
    out: str = "runs/experiment"
    declared_modality: Optional[str] = None  # optional "stills" | "clips" cross-check

    @property
    def modality(self) -> str:
        return "stills" if self.arch in STILL_ARCHS else "clips"

    def validate(self) -> "ExperimentSpec":
        if self.arch not in BUILDERS:
            raise SpecError(f"unknown architecture {self.arch!r}; choose from {sorted(BUILDERS)}")
        if self.loss not in LOSSES:
            raise SpecError(f"unknown loss {self.loss!r}; choose from {list(LOSSES)}")
        if isinstance(self.margin, str) and self.margin not in ("tuned", "search"):
            raise SpecError(f"margin must be a number, 'tuned' or 'search', got {self.margin!r}")
        if isinstance(self.svm_c, str) and self.svm_c not in ("tuned", "search"):
            raise SpecError(f"svm_c must be a number, 'tuned' or 'search', got {self.svm_c!r}")
        if self.declared_modality is not None:
            self.check_modality(self.declared_modality)
        if not self.seeds:
            raise SpecError("at least one seed is required")
        if self.epochs < 1:
            raise SpecError("epochs must be >= 1")
        if self.data.path is not None:
            root = Path(self.data.path)
            if not root.is_dir():
                raise SpecError(f"frame store {root} does not exist")
        return self

    def check_modality(self, modality: str) -> None:
        """Reject still-image architectures on clips and vice versa."""
        if modality not in ("stills", "clips"):
            raise SpecError(f"modality must be 'stills' or 'clips', got {modality!r}")
        if modality != self.modality:
            raise SpecError(f"{self.arch} takes {self.modality}, not {modality}")

    def resolved_margin(self) -> Optional[float]:
        if self.margin == "search":
            return None
        if self.margin == "tuned":
            return TUNED_MARGINS[(self.arch, self.loss)]
        return float(self.margin)

    def resolved_c(self) -> Optional[float]:
        if self.svm_c == "search":
            return None
        if self.svm_c == "tuned":
            return TUNED_SVM_C[(self.arch, self.loss)]
        return float(self.svm_c)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    # -- spec file -------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "ExperimentSpec":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise SpecError(f"unreadable spec: {exc}") from exc
        if not cp.has_section("experiment"):
            raise SpecError("spec file needs an [experiment] section")
        exp, kw = cp["experiment"], {}
        for key in ("arch", "loss", "validation_mode", "out"):
            if key in exp:
                kw[key] = exp[key].strip()
        for key in ("margin", "svm_c"):
            if key in exp:
                value = exp[key].strip()
                kw[key] = value if value in ("tuned", "search") else float(value)
        if "seeds" in exp:
            kw["seeds"] = tuple(_ints(exp["seeds"]))
        for key in ("epochs", "batches_per_epoch", "nshot_draws"):
            if key in exp:
                kw[key] = int(exp[key])
        if "learning_rate" in exp:
            kw["learning_rate"] = float(exp["learning_rate"])
        if "retrieval" in exp:
            kw["retrieval_ns"] = tuple(_ints(exp["retrieval"]))
        if "nshot" in exp:
            kw["nshot"] = tuple(_ints(exp["nshot"]))
        if cp.has_section("data"):
            d = cp["data"]
            dkw = {k: int(d[k]) for k in ("num_ids", "clips_per_id", "frames_per_clip", "height", "width", "seed")
                   if k in d}
            if d.get("source", "synthetic").strip() != "synthetic":
                dkw["path"] = d["source"].strip()
            if "modality" in d:
                kw["declared_modality"] = d["modality"].strip()
            kw["data"] = DataSource(**dkw)
        unknown = set(exp) - {"arch", "loss", "validation_mode", "out", "margin", "svm_c", "seeds", "epochs",
                              "batches_per_epoch", "nshot_draws", "learning_rate", "retrieval", "nshot"}
        if unknown:
            raise SpecError(f"unknown [experiment] keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        path = Path(path)
        if not path.is_file():
            raise SpecError(f"spec file {path} does not exist")
        return cls.from_text(path.read_text())

    def with_overrides(self, **overrides) -> "ExperimentSpec":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _store(source: DataSource) -> tuple:
    if source.path is not None:
        store, _ = ingest_frames(source.path)
        if not store:
            raise SpecError(f"no frames found under {source.path}")
    else:
        store, _ = generate_synthetic_identities(**source.synthetic_args())
    return tuple(store)


def load_store(source: DataSource) -> list[Video]:
    return list(_store(source))


def splits_for(spec: ExperimentSpec, seed: int) -> DataSplits:
    return build_splits(load_store(spec.data), spec.modality, seed=seed, validation_mode=spec.validation_mode)


def new_net(spec: ExperimentSpec, splits: DataSplits, seed: int) -> EmbeddingNet:
    return build(spec.arch, splits.train.x.shape[1:], seed=seed)


# ---------------------------------------------------------------------------
# per-seed work
# ---------------------------------------------------------------------------

def train_config(spec: ExperimentSpec, margin: float, seed: int, epochs: Optional[int] = None) -> TrainConfig:
    return TrainConfig(loss=spec.loss, margin=margin, epochs=epochs or spec.epochs,
                       batches_per_epoch=spec.batches_per_epoch, adam=AdamConfig(lr=spec.learning_rate), seed=seed)


def search_margin(spec: ExperimentSpec, seed: int, epochs: int = 5) -> MarginSearchResult:
    """Margin search with short training runs scored by validation top-1."""
    splits = splits_for(spec, seed)
    base = train_config(spec, 1.0, seed, epochs)
    kwargs = dict(batches_per_epoch=base.batches_per_epoch, adam=base.adam)
    scorer = validation_scorer(lambda: new_net(spec, splits, seed), splits, spec.loss, epochs, seed, **kwargs)
    return margin_search(scorer)


@dataclass
class SeedRun:
    seed: int
    margin: float
    history: TrainHistory
    net: EmbeddingNet
    splits: DataSplits
    search: Optional[MarginSearchResult] = None


def train_seed(spec: ExperimentSpec, seed: int) -> SeedRun:
    margin = spec.resolved_margin()
    search = None
    if margin is None:
        search = search_margin(spec, seed)
        margin = search.best
        log.info("seed %d: margin search chose %g", seed, margin)
    splits = splits_for(spec, seed)
    net = new_net(spec, splits, seed)
    history = train(net, splits, train_config(spec, margin, seed))
    return SeedRun(seed, margin, history, net, splits, search)


def embed_test_split(net: EmbeddingNet, splits: DataSplits) -> EmbeddingSet:
    return EmbeddingSet(embed(net, splits.test.x), splits.test.labels, splits.test.ids)


def evaluate_embeddings(spec: ExperimentSpec, emb: EmbeddingSet, seed: int) -> dict:
    """Retrieval and n-shot metrics for one seed's test embeddings."""
    report = topn_retrieval_accuracy(emb, spec.retrieval_ns)
    c = spec.resolved_c()
    c_scores = {}
    if c is None:
        c, c_scores = grid_search_C(emb, C_GRID, folds=3, rng=np.random.default_rng([seed, 5]))
    rng = np.random.default_rng([seed, 6])
    nshot = {}
    for n in spec.nshot:
        accs = [nshot_eval(emb, n, c, rng).accuracy for _ in range(spec.nshot_draws)]
        nshot[str(n)] = float(np.mean(accs))
    return {
        "retrieval": {str(n): report.accuracy[n] for n in spec.retrieval_ns},
        "retrieval_queries": report.queries,
        "retrieval_excluded": report.excluded,
        "svm_c": c,
        "svm_c_scores": {repr(k): v for k, v in c_scores.items()},
        "nshot": nshot,
    }


def seed_dir(spec: ExperimentSpec, seed: int) -> Path:
    return Path(spec.out) / f"seed-{seed}"


def seed_complete(spec: ExperimentSpec, seed: int) -> bool:
    d = seed_dir(spec, seed)
    marker = d / "train.json"
    if not (marker.is_file() and (d / "checkpoint.fmck").is_file()):
        return False
    return json.loads(marker.read_text()).get("spec_digest") == spec.digest()


def write_training_outputs(spec: ExperimentSpec, run: SeedRun) -> Path:
    d = seed_dir(spec, run.seed)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.net, d / "checkpoint.fmck", {"margin": run.margin, "seed": run.seed})
    (d / "history.json").write_text(run.history.to_json())
    if run.search is not None:
        write_margin_table(run.search, d / "margin_search.csv")
    info = {"seed": run.seed, "margin": run.margin, "spec_digest": spec.digest(),
            "epochs_run": run.history.epochs_run, "final_val_top1": run.history.val_top1[-1],
            "initial_val_top1": run.history.initial_val_top1}
    (d / "train.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return d


def train_and_save(spec: ExperimentSpec, seed: int) -> dict:
    try:
        run = train_seed(spec, seed)
        write_training_outputs(spec, run)
        return json.loads((seed_dir(spec, seed) / "train.json").read_text())
    except Exception as exc:
        raise SeedFailure(seed, exc) from exc


def eval_saved(spec: ExperimentSpec, seed: int, embeddings_only: bool = False) -> Optional[dict]:
    d = seed_dir(spec, seed)
    try:
        net, extra = load_checkpoint(d / "checkpoint.fmck")
        emb = embed_test_split(net, splits_for(spec, seed))
        emb.to_csv(d / "embeddings_test.csv")
        if embeddings_only:
            return None
        metrics = evaluate_embeddings(spec, emb, seed)
        train_info = json.loads((d / "train.json").read_text())
        metrics.update(seed=seed, margin=extra.get("margin"), final_val_top1=train_info["final_val_top1"],
                       initial_val_top1=train_info["initial_val_top1"])
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
        return metrics
    except Exception as exc:
        raise SeedFailure(seed, exc) from exc


def _map(fn, spec: ExperimentSpec, seeds: Sequence[int], jobs: int, **kw) -> list:
    if jobs <= 1 or len(seeds) <= 1:
        return [fn(spec, s, **kw) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, spec, s, **kw) for s in seeds]
        return [f.result() for f in futures]


def train_seeds(spec: ExperimentSpec, jobs: int = 1) -> dict[int, dict]:
    """Train every seed that has no up-to-date outputs yet."""
    done = {s: json.loads((seed_dir(spec, s) / "train.json").read_text())
            for s in spec.seeds if seed_complete(spec, s)}
    for s in done:
        log.warning("seed %d already trained for this spec; skipping", s)
    todo = [s for s in spec.seeds if s not in done]
    done.update(zip(todo, _map(train_and_save, spec, todo, jobs)))
    return {s: done[s] for s in spec.seeds}


def missing_checkpoints(spec: ExperimentSpec) -> list[int]:
    return [s for s in spec.seeds if not (seed_dir(spec, s) / "checkpoint.fmck").is_file()]


def eval_seeds(spec: ExperimentSpec, jobs: int = 1, embeddings_only: bool = False) -> list[dict]:
    missing = missing_checkpoints(spec)
    if missing:
        raise FileNotFoundError(f"no checkpoint for seed(s) {missing} under {spec.out}")
    return _map(eval_saved, spec, list(spec.seeds), jobs, embeddings_only=embeddings_only)


# ---------------------------------------------------------------------------
# aggregation and tables
# ---------------------------------------------------------------------------

@dataclass
class AggregateReport:
    label: str
    seeds: list[int]
    retrieval: dict[str, tuple[float, float]]
    nshot: dict[str, tuple[float, float]]
    val_top1: tuple[float, float]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(label: str, per_seed: Sequence[dict]) -> AggregateReport:
    seeds = [m["seed"] for m in per_seed]
    notes = []
    if len(per_seed) == 1:
        notes.append("single seed: standard deviation reported as 0")

    def agg(key: str) -> dict[str, tuple[float, float]]:
        keys = per_seed[0][key].keys()
        return {k: mean_std([m[key][k] for m in per_seed]) for k in keys}

    return AggregateReport(label, seeds, agg("retrieval"), agg("nshot"),
                           mean_std([m["final_val_top1"] for m in per_seed]), notes)


def format_pct(mean: float, std: float, digits: int = 2) -> str:
    return f"{100 * mean:.{digits}f} ± {100 * std:.{digits}f}%"


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def retrieval_table(reports: Sequence[AggregateReport]) -> str:
    ns = list(reports[0].retrieval)
    rows = [["model"] + [f"Top {n}" for n in ns]]
    rows += [[r.label] + [format_pct(*r.retrieval[n]) for n in ns] for r in reports]
    return _csv(rows)


def nshot_table(reports: Sequence[AggregateReport]) -> str:
    rows = [["n"] + [r.label for r in reports]]
    rows += [[n] + [format_pct(*r.nshot[n]) for r in reports] for n in reports[0].nshot]
    return _csv(rows)


def write_margin_table(result: MarginSearchResult, path) -> None:
    rows = [["margin", "val_top1", "chosen"]]
    rows += [[repr(m), repr(s), int(m == result.best)] for m, s in result.rows()]
    Path(path).write_text(_csv(rows))


def write_reports(spec: ExperimentSpec, per_seed: Sequence[dict]) -> AggregateReport:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate(f"{spec.arch}-{spec.loss}", sorted(per_seed, key=lambda m: m["seed"]))
    (out / "retrieval.csv").write_text(retrieval_table([report]))
    (out / "nshot.csv").write_text(nshot_table([report]))
    (out / "results.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    for note in report.notes:
        log.warning(note)
    return report


def write_provenance(spec: ExperimentSpec, command: str) -> Path:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "spec": spec.to_dict(), "spec_digest": spec.digest(), "seeds": list(spec.seeds),
           "version": __version__, "numpy": np.__version__}
    path = out / f"provenance-{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> AggregateReport:
    """Train and evaluate every seed, then write the aggregated tables."""
    spec.validate()
    write_provenance(spec, "run")
    train_seeds(spec, jobs)
    return write_reports(spec, eval_seeds(spec, jobs))
