"""Command-line surface: offline prototype construction, online detection, evaluation.

Conventions shared by every subcommand:

- stdout carries data (summaries, tables); stderr carries diagnostics and the
  resolved configuration.
- Outputs are deterministic: the same inputs produce byte-identical files,
  regardless of --jobs. Timing is off by default for that reason; pass
  --measure-time to record per-image matching time in result files.
- Exit codes: 0 success, 2 usage, 3 I/O failure, 4 malformed file,
  5 inconsistent data (duplicate class, missing embedding, dimension clash),
  6 validation found violations.
- PROTODETECT_LOG=debug|info|warning|error sets the log level (stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from typing import Sequence

import numpy as np

from . import __version__
from .errors import (
    DimensionMismatchError,
    DuplicateClassError,
    EmptyMaskError,
    EngineError,
    FormatError,
    MalformedRleError,
    MissingEmbeddingsError,
    SchemaViolationError,
    UnknownClassError,
    ZeroVectorError,
)
from .evaluation import DetectionRecord, evaluate
from .formats import (
    EmbeddingArchive,
    ProposalKey,
    SupportKey,
    ap_report_csv,
    attach_embeddings,
    format_ap_table,
    group_proposals,
    load_config,
    read_bop_results,
    read_embedding_archive,
    read_ground_truth,
    read_proposal_archive,
    runs_to_results,
    validate,
    write_ap_report,
    write_bop_results,
)
from .ioutil import atomic_write_text
from .pipeline import DetectionRun, PipelineConfig, ProposalBatch, detect, filter_proposals
from .prototypes import (
    PrototypeStore,
    SupportSet,
    build_store,
    load_store,
    prototype_similarity_matrix,
    save_store,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_DATA = 5
EXIT_INVALID = 6

_DATA_ERRORS = (
    DuplicateClassError,
    DimensionMismatchError,
    MissingEmbeddingsError,
    UnknownClassError,
    ZeroVectorError,
    EmptyMaskError,
)

log = logging.getLogger("protodetect")


def _setup_logging() -> None:
    level = os.environ.get("PROTODETECT_LOG", "warning").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _print_config(args: argparse.Namespace, cfg: PipelineConfig | None = None) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    if cfg is not None:
        resolved.update({f.name: getattr(cfg, f.name) for f in fields(PipelineConfig)})
    print("config: " + " ".join(f"{k}={v}" for k, v in sorted(resolved.items())), file=sys.stderr)


def _resolve_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file first, then per-flag overrides."""
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for flag, name in (
        ("min_area_ratio", "min_area_ratio"),
        ("min_generator_iou", "min_generator_iou"),
        ("min_stability", "min_stability"),
        ("theta_nms", "theta_nms"),
        ("tau", "tau"),
        ("classwise_nms", "classwise_nms_iou"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _store_from_archive(archive: EmbeddingArchive) -> PrototypeStore:
    """Group support-keyed rows into per-class support sets, ascending indices."""
    rows_by_class: dict[int, list[tuple[int, np.ndarray]]] = {}
    for key, row in zip(archive.keys, archive.matrix):
        rows_by_class.setdefault(key.class_id, []).append((key.support_index, row))
    supports = []
    for class_id in sorted(rows_by_class):
        members = sorted(rows_by_class[class_id], key=lambda pair: pair[0])
        supports.append(SupportSet(class_id=class_id, embeddings=tuple(row for _, row in members)))
    return build_store(supports, provenance=archive.extractor)


def _cmd_build_prototypes(args: argparse.Namespace) -> int:
    _print_config(args)
    archive = read_embedding_archive(args.supports)
    if any(isinstance(key, ProposalKey) for key in archive.keys):
        raise SchemaViolationError(
            f"{args.supports}: archive is proposal-keyed, expected class_id/support_index keys"
        )
    store = _store_from_archive(archive)
    save_store(store, args.out)
    for prototype in store.prototypes:
        print(f"class {prototype.class_id}: k={prototype.k_support} norm={prototype.norm:.6f}")
    log.info("wrote %d prototypes to %s", len(store), args.out)
    return EXIT_OK


def _batches_with_embeddings(args: argparse.Namespace) -> list[ProposalBatch]:
    records = read_proposal_archive(args.proposals)
    batches = group_proposals(records)
    archive = read_embedding_archive(args.embeddings)
    if any(isinstance(key, SupportKey) for key in archive.keys):
        raise SchemaViolationError(
            f"{args.embeddings}: archive is support-keyed, expected scene_id/image_id/proposal_index keys"
        )
    return [attach_embeddings(batch, archive) for batch in batches]


def _first_missing_key(batch: ProposalBatch, retained: Sequence[int]) -> ProposalKey | None:
    for index in retained:
        if batch.embeddings is None or batch.embeddings[index] is None:
            return ProposalKey(batch.scene_id, batch.image_id, index)
    return None


def _run_jobs(tasks, worker, jobs: int):
    """Map worker over tasks, deterministically ordered by task sort key."""
    if jobs <= 1 or len(tasks) <= 1:
        return [worker(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _cmd_detect(args: argparse.Namespace) -> int:
    cfg = _resolve_pipeline_config(args)
    _print_config(args, cfg)
    store = load_store(args.store)
    batches = _batches_with_embeddings(args)
    for batch in batches:
        missing = _first_missing_key(batch, filter_proposals(batch, cfg))
        if missing is not None:
            raise MissingEmbeddingsError(
                f"no embedding for retained proposal scene_id={missing.scene_id} "
                f"image_id={missing.image_id} proposal_index={missing.proposal_index}"
            )

    def worker(batch: ProposalBatch) -> DetectionRun:
        start = time.perf_counter()
        run = detect(batch, store, cfg)
        if args.measure_time:
            run = replace(run, time_s=time.perf_counter() - start)
        return run

    runs = _run_jobs(batches, worker, args.jobs)
    runs.sort(key=lambda run: (run.scene_id, run.image_id))
    write_bop_results(runs_to_results(runs), args.out)
    total = 0
    for run in runs:
        print(f"scene {run.scene_id} image {run.image_id}: {len(run.detections)} detections")
        total += len(run.detections)
    print(f"total: {total} detections over {len(runs)} images")
    return EXIT_OK


def _cmd_filter_proposals(args: argparse.Namespace) -> int:
    cfg = _resolve_pipeline_config(args)
    _print_config(args, cfg)
    batches = group_proposals(read_proposal_archive(args.proposals))
    payload = []
    total_in = 0
    total_kept = 0
    for batch in batches:
        retained = filter_proposals(batch, cfg)
        payload.append(
            {"scene_id": batch.scene_id, "image_id": batch.image_id, "retained": retained}
        )
        total_in += len(batch.proposals)
        total_kept += len(retained)
    atomic_write_text(args.out, json.dumps(payload, indent=1) + "\n")
    print(f"retained {total_kept} of {total_in} proposals over {len(batches)} images")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    _print_config(args)
    results = read_bop_results(args.results)
    gts, _images = read_ground_truth(args.gt)
    detections = [
        DetectionRecord(
            scene_id=r.scene_id,
            image_id=r.image_id,
            class_id=r.category_id,
            bbox=r.bbox,
            score=r.score,
        )
        for r in results
    ]
    report = evaluate(detections, gts)
    write_ap_report(report, args.out)
    if args.csv:
        atomic_write_text(args.csv, ap_report_csv(report))
    print(format_ap_table(report, gts.class_names))
    return EXIT_OK


def _cmd_prototype_similarity(args: argparse.Namespace) -> int:
    _print_config(args)
    store = load_store(args.store)
    matrix = prototype_similarity_matrix(store)
    header = "class_id," + ",".join(str(c) for c in store.class_ids)
    lines = [header]
    for class_id, row in zip(store.class_ids, matrix):
        lines.append(f"{class_id}," + ",".join(repr(float(v)) for v in row))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(store)}x{len(store)} similarity matrix to {args.out}")
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    _print_config(args)
    clean = True
    for path in args.paths:
        violations = validate(path, format_hint=args.format)
        if violations:
            clean = False
            for violation in violations:
                print(str(violation))
        else:
            print(f"{path}: clean")
    return EXIT_OK if clean else EXIT_INVALID


def _add_config_flags(parser: argparse.ArgumentParser, knobs: Sequence[str]) -> None:
    parser.add_argument("--config", help="TOML run config with a [pipeline] table")
    flags = {
        "min_area_ratio": "minimum foreground area as a fraction of the image",
        "min_generator_iou": "floor on the generator's predicted-quality score",
        "min_stability": "floor on the generator's stability score",
        "theta_nms": "IoU threshold of the proposal-stage NMS",
        "tau": "filter-score gate; proposals below it are dropped",
        "classwise_nms": "IoU threshold of the per-class NMS on detections",
    }
    for name in knobs:
        parser.add_argument(f"--{name.replace('_', '-')}", type=float, dest=name, help=flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodetect",
        description="Few-shot object detection by prototype matching over mask proposals.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-prototypes", help="average support embeddings into a prototype store")
    p.add_argument("--supports", required=True, help="embedding archive keyed by class_id/support_index")
    p.add_argument("--out", required=True, help="prototype store path to write")
    p.set_defaults(func=_cmd_build_prototypes)

    p = sub.add_parser("filter-proposals", help="emit retained proposal indices per image")
    p.add_argument("--proposals", required=True, help="proposal archive (JSON lines)")
    p.add_argument("--out", required=True, help="retained-index JSON path to write")
    _add_config_flags(p, ["min_area_ratio", "min_generator_iou", "min_stability", "theta_nms"])
    p.set_defaults(func=_cmd_filter_proposals)

    p = sub.add_parser("detect", help="run the full pipeline and write a BOP result file")
    p.add_argument("--proposals", required=True, help="proposal archive (JSON lines)")
    p.add_argument("--embeddings", required=True, help="embedding archive keyed by proposal")
    p.add_argument("--store", required=True, help="prototype store")
    p.add_argument("--out", required=True, help="BOP result JSON path to write")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel image workers")
    p.add_argument(
        "--measure-time",
        action="store_true",
        help="record per-image matching time (breaks byte-identical reruns)",
    )
    _add_config_flags(
        p,
        ["min_area_ratio", "min_generator_iou", "min_stability", "theta_nms", "tau", "classwise_nms"],
    )
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("evaluate", help="score a result file against ground truth")
    p.add_argument("--results", required=True, help="BOP result JSON")
    p.add_argument("--gt", required=True, help="ground-truth JSON")
    p.add_argument("--out", required=True, help="AP report JSON path to write")
    p.add_argument("--csv", help="optional CSV table path")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallelism cap; evaluation output never depends on it")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("prototype-similarity", help="pairwise cosine similarity between prototypes")
    p.add_argument("--store", required=True, help="prototype store")
    p.add_argument("--out", required=True, help="CSV path to write")
    p.set_defaults(func=_cmd_prototype_similarity)

    p = sub.add_parser("validate", help="schema-check any engine file")
    p.add_argument("paths", nargs="+", help="files to check")
    p.add_argument(
        "--format",
        choices=["store", "embeddings", "proposals", "results", "gt", "config"],
        help="skip format sniffing",
    )
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, MalformedRleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except _DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
