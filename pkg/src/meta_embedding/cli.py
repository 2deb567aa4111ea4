#!/usr/bin/env python3
"""
Meta-embedding CLI - stage and experiment commands

Usage:
    python -m meta_embedding.cli run --config exp.env          # full pipeline + report
    python -m meta_embedding.cli knn --config exp.env --k 50   # stop after the k-NN stage
    python -m meta_embedding.cli sweep --config exp.env --axis dimension --values 50,100,300

Every command prints a JSON summary on stdout. Failures print one JSON
object {"error", "message", "stage"} on stderr and exit with status 1.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List

from .core.config import Config, setup_logging
from .embio import FORMATS, load_embeddings
from .neighbours import dump_graph_text
from .pipeline import (
    METHODS,
    SOLVERS,
    SWEEP_AXES,
    Pipeline,
    PipelineConfig,
    StageError,
    ablate,
    run,
    sweep,
    tune,
)
from .recon import dump_weights_text

# Fix Windows console encoding for Unicode
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    sys.stderr.reconfigure(encoding="utf-8", errors="replace")

logger = logging.getLogger(__name__)


def _values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="key=value experiment file")
    common.add_argument("--out", help="output directory (OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="root seed (SEED)")
    common.add_argument("--threads", type=int, help="worker threads (WORKERS)")
    common.add_argument("--k", type=int, help="neighbourhood size (K)")
    common.add_argument("--dim", type=int, help="meta-embedding dimensionality (DIM)")
    common.add_argument("--method", choices=METHODS, help="lle, conc or svd (METHOD)")
    common.add_argument("--solver", choices=SOLVERS, help="weight solver (SOLVER)")
    common.add_argument("--row-normalize", dest="row_normalize", action="store_true", default=None,
                        help="renormalise combined weight rows (ROW_NORMALIZE)")
    common.add_argument("--no-row-normalize", dest="row_normalize", action="store_false",
                        help="keep combined weights as merged")
    common.add_argument("--include-self", dest="include_self", action="store_true", default=None,
                        help="keep each word in its own neighbourhood (INCLUDE_SELF)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING ... (META_LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="meta-embed",
        description="Meta-embedding CLI - stage and experiment commands",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  meta-embed run --config exp.env                     Full pipeline, writes report.json/report.csv
  meta-embed conc --config exp.env --out out/conc     CONC baseline only
  meta-embed ablate --config exp.env --hold-out hlbl  Drop one source
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("ingest", "load and normalise sources"),
        ("project", "compute the meta-embedding (method lle)"),
        ("conc", "CONC baseline"),
        ("svd", "SVD baseline"),
        ("run", "full pipeline and report"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)

    knn = sub.add_parser("knn", parents=[common], help="build the neighbourhood graph")
    knn.add_argument("--dump", help="also write 'word source neighbour...' text")
    weights = sub.add_parser("weights", parents=[common], help="fit reconstruction weights")
    weights.add_argument("--dump", help="also write 'word neighbour weight' text")

    ev = sub.add_parser("eval", parents=[common], help="evaluate an embedding file")
    ev.add_argument("--embedding", required=True, help="embedding file to evaluate")
    ev.add_argument("--format", choices=FORMATS, default="glove-text")

    sw = sub.add_parser("sweep", parents=[common], help="run over a list of values")
    sw.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sw.add_argument("--values", type=_values, required=True)

    ab = sub.add_parser("ablate", parents=[common], help="run with one source held out")
    ab.add_argument("--hold-out", dest="hold_out", required=True)

    tn = sub.add_parser("tune", parents=[common], help="pick the best value on a validation set")
    tn.add_argument("--axis", choices=SWEEP_AXES, required=True)
    tn.add_argument("--values", type=_values, required=True)
    tn.add_argument("--validation", required=True, help="EVAL_<n>_NAME of the validation dataset")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file first, then every flag that was given."""
    config = PipelineConfig.from_file(args.config)
    return config.with_overrides(
        output_dir=Path(args.out) if args.out else None,
        seed=args.seed,
        workers=args.threads,
        k=args.k,
        dim=args.dim,
        method=args.method,
        solver=args.solver,
        row_normalize=args.row_normalize,
        include_self=args.include_self,
    )


def _stage_summary(pipeline: Pipeline, stage: str, key: str, **extra) -> Dict[str, Any]:
    return {"stage": stage, "key": key, "artifact": str(pipeline.artifact_path(stage, key)), **extra}


def execute(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    command = args.command

    if command == "run":
        result = run(config)
        return {"summary": result.summary, "outputs": {k: str(v) for k, v in result.outputs.items()},
                "records": len(result.records)}
    if command == "sweep":
        rows = sweep(config, args.axis, args.values)
        return {"axis": args.axis, "rows": len(rows), "failed": sum(1 for r in rows if r["error"])}
    if command == "ablate":
        result = ablate(config, args.hold_out)
        return {"summary": result.summary, "outputs": {k: str(v) for k, v in result.outputs.items()}}
    if command == "tune":
        result = tune(config, args.axis, args.values, args.validation)
        return {"axis": result.axis, "validation": result.validation, "best_value": result.best_value,
                "scores": {str(k): v for k, v in result.scores.items()}}

    if command == "eval":
        emb = load_embeddings(args.embedding, args.format)
        records = Pipeline(config).evaluate(emb, emb.name)
        return {"embedding": emb.name, "records": records}

    config.validate()
    pipeline = Pipeline(config)

    sets, ingest_keys = pipeline.ingest()
    if command == "ingest":
        return {"stage": "ingest", "sources": [
            {"name": e.name, "words": len(e), "dim": e.dim, "artifact": str(pipeline.artifact_path("ingest", k))}
            for e, k in zip(sets, ingest_keys)
        ]}
    if command == "conc":
        meta, key = pipeline.conc(sets, ingest_keys)
        return _stage_summary(pipeline, "conc", key, words=len(meta), dim=meta.dim)
    if command == "svd":
        meta, key = pipeline.svd(sets, ingest_keys)
        return _stage_summary(pipeline, "svd", key, words=len(meta), dim=meta.dim)

    graph, knn_key = pipeline.knn(sets, ingest_keys)
    if command == "knn":
        if args.dump:
            dump_graph_text(graph, args.dump)
        return _stage_summary(pipeline, "knn", knn_key, words=graph.n_words, k=graph.k)

    W, weights_key = pipeline.weights(sets, graph, knn_key)
    if command == "weights":
        if args.dump:
            dump_weights_text(W, graph.vocab, args.dump)
        return _stage_summary(pipeline, "weights", weights_key, words=W.n_words, nnz=W.nnz)

    meta, key = pipeline.project(W, graph, weights_key)
    return _stage_summary(pipeline, "project", key, words=len(meta), dim=meta.dim)


def error_payload(exc: BaseException) -> Dict[str, Any]:
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "stage": getattr(exc, "stage", None),
    }


def main(argv: List[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or Config.LOG_LEVEL)

    try:
        summary = execute(args)
    except (StageError, ValueError, OSError, RuntimeError) as e:
        logger.debug(f"[CLI] {args.command} failed", exc_info=True)
        print(json.dumps(error_payload(e), sort_keys=True), file=sys.stderr)
        return 1

    print(json.dumps(summary, sort_keys=True, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
