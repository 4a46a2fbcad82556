"""``facemetric`` command line: generate | train | eval | margin-search | report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .data import generate_synthetic_identities, write_frame_store
from .experiment import (
    ExperimentSpec,
    SeedFailure,
    SpecError,
    eval_seeds,
    search_margin,
    seed_dir,
    train_seeds,
    write_margin_table,
    write_provenance,
    write_reports,
)
from .nets.layers import BuildError

log = logging.getLogger("facemetric")

EXIT_OK, EXIT_FAILURE, EXIT_SPEC, EXIT_MISSING, EXIT_SEED = 0, 1, 2, 3, 4


def _seed_list(text: str) -> tuple:
    from .experiment import _ints

    try:
        return tuple(_ints(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _margin(text: str):
    if text in ("search", "tuned"):
        return text
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"margin must be a number, 'search' or 'tuned', got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", type=Path, help="experiment spec file (INI)")
    common.add_argument("--out", help="output directory (overrides the spec file)")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--seeds", type=_seed_list, help="seed list, e.g. '0,1,2' or '0..4'")
    common.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel")
    common.add_argument("--arch", help="inception_lite | c3d_lite | lstm2d_lite")
    common.add_argument("--loss", help="contrastive | triplet")
    common.add_argument("--margin", type=_margin, help="margin value, 'tuned' or 'search'")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batches-per-epoch", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="facemetric", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic frame store")
    sub.add_parser("train", parents=[common], help="train one network per seed")
    ev = sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints")
    ev.add_argument("--embeddings-only", action="store_true", help="only dump test embeddings")
    sub.add_parser("margin-search", parents=[common], help="search the loss margin")
    sub.add_parser("report", parents=[common], help="aggregate per-seed metrics into tables")
    return parser


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    spec = ExperimentSpec.from_file(args.spec) if args.spec else ExperimentSpec()
    seeds = (args.seed,) if args.seed is not None else args.seeds
    spec = spec.with_overrides(out=args.out, seeds=seeds, arch=args.arch, loss=args.loss, margin=args.margin,
                               epochs=args.epochs, batches_per_epoch=args.batches_per_epoch)
    return spec.validate()


def cmd_generate(spec: ExperimentSpec, args) -> int:
    src = spec.data
    seed = args.seed if args.seed is not None else src.seed
    store, manifest = generate_synthetic_identities(**{**src.synthetic_args(), "seed": seed})
    root = write_frame_store(store, Path(spec.out) / "frames", manifest)
    log.info("wrote %d identities, %d videos, %d frames to %s", len(manifest.identities), manifest.num_videos,
             manifest.num_frames, root)
    return EXIT_OK


def cmd_train(spec: ExperimentSpec, args) -> int:
    write_provenance(spec, "train")
    for seed, info in train_seeds(spec, args.jobs).items():
        log.info("seed %d: margin %g, %d epochs, validation top-1 %.3f -> %.3f", seed, info["margin"],
                 info["epochs_run"], info["initial_val_top1"], info["final_val_top1"])
    return EXIT_OK


def cmd_eval(spec: ExperimentSpec, args) -> int:
    write_provenance(spec, "eval")
    metrics = eval_seeds(spec, args.jobs, embeddings_only=args.embeddings_only)
    if args.embeddings_only:
        log.info("embeddings written under %s", spec.out)
        return EXIT_OK
    report = write_reports(spec, metrics)
    print((Path(spec.out) / "retrieval.csv").read_text(), end="")
    log.info("validation top-1 %.3f ± %.3f over seeds %s", *report.val_top1, report.seeds)
    return EXIT_OK


def cmd_margin_search(spec: ExperimentSpec, args) -> int:
    write_provenance(spec, "margin-search")
    seed = spec.seeds[0]
    result = search_margin(spec, seed)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_margin_table(result, out / "margin_search.csv")
    print((out / "margin_search.csv").read_text(), end="")
    log.info("chosen margin %g", result.best)
    return EXIT_OK


def cmd_report(spec: ExperimentSpec, args) -> int:
    paths = [seed_dir(spec, s) / "metrics.json" for s in spec.seeds]
    missing = [s for s, p in zip(spec.seeds, paths) if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"no metrics for seed(s) {missing}; run 'facemetric eval' first")
    write_reports(spec, [json.loads(p.read_text()) for p in paths])
    print((Path(spec.out) / "retrieval.csv").read_text(), end="")
    print((Path(spec.out) / "nshot.csv").read_text(), end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "margin-search": cmd_margin_search,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        spec = resolve_spec(args)
        return COMMANDS[args.command](spec, args)
    except (SpecError, BuildError) as exc:
        log.error("spec error: %s", exc)
        return EXIT_SPEC
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except SeedFailure as exc:
        log.error("%s", exc)
        return EXIT_SEED
    except Exception as exc:  # noqa: BLE001 - report any failure as an exit code
        log.error("failed: %s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
