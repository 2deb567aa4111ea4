"""
Pipeline Module

Runs the stages in order and caches every intermediate:

    ingest (load + l2 normalise) -> knn -> weights -> project    (method lle)
    ingest -> conc | svd                                        (baselines)
    -> evaluate -> meta.txt, meta.bin, report.json, report.csv

Each stage's cache key hashes its parameters together with the keys of its
inputs, and ingest keys hash the source files' contents, so editing a file or
a parameter recomputes exactly the stages downstream of it.

Experiments on top of run(): sweep (one parameter over a list of values),
ablate (drop one source) and tune (pick the value scoring best on a
validation dataset).
"""

import csv
import functools
import io
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from dotenv import dotenv_values

from .artifact_cache import ArtifactCache, atomic_write_text, cache_key, content_digest
from .baselines import ConcConfig, VOCAB_POLICIES, concat, svd_meta
from .core.config import (
    Config,
    DEFAULT_ADAGRAD_EPSILON,
    DEFAULT_CONC_EMPHASIS,
    DEFAULT_CV_FOLDS,
    DEFAULT_DIM,
    DEFAULT_EIGEN_TOL,
    DEFAULT_K,
    DEFAULT_LEAF_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_ITERS,
    DEFAULT_REG_GRID,
    DEFAULT_TOLERANCE,
)
from .embio import FORMATS, EmbeddingSet, l2_normalize, load_embeddings, save_cache, union_vocab
from .evalsuite import (
    InsufficientCoverageError,
    UndefinedCorrelationError,
    eval_analogy,
    eval_relation,
    eval_similarity,
    eval_text,
    parse_analogy,
    parse_relation,
    parse_similarity,
    parse_text,
)
from .neighbours import NeighbourhoodGraph, build_graph, load_graph, save_graph
from .project import MetaEmbedding, combine_weights, project, save_meta
from .recon import SolverConfig, SparseWeights, fit_weights_exact, fit_weights_sgd, load_weights, save_weights

logger = logging.getLogger(__name__)

METHODS = ("lle", "conc", "svd")
SOLVERS = ("sgd", "exact")
TASKS = ("similarity", "analogy", "relation", "text")
SWEEP_AXES = ("dimension", "neighbourhood", "emphasis")
OUTPUT_FILES = ("meta.txt", "meta.bin", "report.json", "report.csv")
SCORE_SCALE = 100.0

_SOURCE_KEY = re.compile(r"^SOURCE_(\d+)_(NAME|PATH|FORMAT|SCALE|EMPHASISE)$")
_EVAL_KEY = re.compile(r"^EVAL_(\d+)_(TASK|PATH|TEST_PATH|NAME)$")
_SCALAR_KEYS = {
    "K", "DIM", "INCLUDE_SELF", "ROW_NORMALIZE", "SOLVER", "METHOD", "SEED", "WORKERS",
    "LEAF_SIZE", "LEARNING_RATE", "MAX_ITERS", "ADAGRAD_EPSILON", "TOLERANCE", "PROJECTED_SGD",
    "CONC_POLICY", "CONC_EMPHASIS", "SVD_SCALED", "SVD_WEIGHTED", "EVALUATE_SOURCES",
    "OUTPUT_DIR", "CACHE_DIR",
}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

REPORT_COLUMNS = ("method", "embedding", "ablation", "task", "dataset", "score", "coverage", "evaluated", "total", "error")
SWEEP_COLUMNS = ("axis", "value", "embedding", "task", "dataset", "score", "coverage", "error")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(message)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class SourceEntry:
    name: str
    path: Path
    format: str = "glove-text"
    scale: Optional[float] = None
    emphasise: bool = False


@dataclass(frozen=True)
class EvalEntry:
    task: str
    path: Path
    name: str
    test_path: Optional[Path] = None


@dataclass(frozen=True)
class PipelineConfig:
    """One experiment. Field defaults come from core.config."""
    sources: Tuple[SourceEntry, ...] = ()
    evaluations: Tuple[EvalEntry, ...] = ()
    k: int = DEFAULT_K
    dim: int = DEFAULT_DIM
    include_self: bool = False
    row_normalize: bool = True
    solver: str = "sgd"
    method: str = "lle"
    seed: int = 0
    workers: int = field(default_factory=Config.get_workers)
    leaf_size: int = DEFAULT_LEAF_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    max_iters: int = DEFAULT_MAX_ITERS
    adagrad_epsilon: float = DEFAULT_ADAGRAD_EPSILON
    tolerance: float = DEFAULT_TOLERANCE
    projected_sgd: bool = False
    conc_policy: str = "intersection"
    conc_emphasis: float = DEFAULT_CONC_EMPHASIS
    svd_scaled: bool = True
    svd_weighted: bool = False
    evaluate_sources: bool = False
    eigen_tol: float = DEFAULT_EIGEN_TOL
    cv_folds: int = DEFAULT_CV_FOLDS
    reg_grid: Tuple[float, ...] = DEFAULT_REG_GRID
    output_dir: Path = Path("out")
    cache_dir: Path = Path(Config.CACHE_DIR)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"METHOD must be one of {METHODS}, got '{self.method}'", "METHOD")
        if self.solver not in SOLVERS:
            raise ConfigError(f"SOLVER must be one of {SOLVERS}, got '{self.solver}'", "SOLVER")
        if self.conc_policy not in VOCAB_POLICIES:
            raise ConfigError(f"CONC_POLICY must be one of {VOCAB_POLICIES}", "CONC_POLICY")
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}", "K")
        if self.dim < 1:
            raise ConfigError(f"DIM must be >= 1, got {self.dim}", "DIM")
        if self.workers < 1:
            raise ConfigError(f"WORKERS must be >= 1, got {self.workers}", "WORKERS")
        names = [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ConfigError(f"source names must be unique, got {names}", "SOURCE_NAME")
        for s in self.sources:
            if s.format not in FORMATS:
                raise ConfigError(f"source '{s.name}': unknown format '{s.format}'", "SOURCE_FORMAT")
        for e in self.evaluations:
            if e.task not in TASKS:
                raise ConfigError(f"evaluation '{e.name}': unknown task '{e.task}'", "EVAL_TASK")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, Any] = None) -> "PipelineConfig":
        """
        Read a key=value experiment file (dotenv syntax).

        Args:
            path: Config file; relative paths inside it resolve against its directory
            overrides: Keys that replace file values (CLI flags)

        Raises:
            ConfigError: Unknown key or unparsable value
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values, base_dir=path.parent)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base_dir=None) -> "PipelineConfig":
        base = Path(base_dir) if base_dir is not None else Path(".")
        sources: Dict[int, Dict[str, str]] = {}
        evals: Dict[int, Dict[str, str]] = {}
        kwargs: Dict[str, Any] = {}

        for key, raw in values.items():
            key = key.upper()
            m = _SOURCE_KEY.match(key)
            if m:
                sources.setdefault(int(m.group(1)), {})[m.group(2)] = str(raw)
                continue
            m = _EVAL_KEY.match(key)
            if m:
                evals.setdefault(int(m.group(1)), {})[m.group(2)] = str(raw)
                continue
            if key not in _SCALAR_KEYS:
                raise ConfigError(f"unknown config key '{key}'", key)
            kwargs.update(_scalar(key, raw, base))

        kwargs["sources"] = tuple(_source_entry(i, sources[i], base) for i in sorted(sources))
        kwargs["evaluations"] = tuple(_eval_entry(i, evals[i], base) for i in sorted(evals))
        return cls(**kwargs)

    def with_overrides(self, **changes) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    # -- derived ------------------------------------------------------------

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            adagrad_epsilon=self.adagrad_epsilon,
            seed=self.seed,
            tolerance=self.tolerance,
            projected=self.projected_sgd,
        )

    def conc_config(self) -> ConcConfig:
        return ConcConfig(
            scales={s.name: s.scale for s in self.sources if s.scale is not None},
            emphasised=tuple(s.name for s in self.sources if s.emphasise),
            emphasis=self.conc_emphasis,
            vocab_policy=self.conc_policy,
        )

    def validate(self) -> None:
        """Checks that need the filesystem or more than one field."""
        if not self.sources:
            raise ConfigError("no sources configured", "SOURCE_1_PATH")
        if self.method == "lle" and self.k < self.dim + 1:
            logger.warning(f"[Pipeline] k={self.k} is below dim + 1 = {self.dim + 1}")
        out = self.output_dir.resolve()
        reserved = {out} | {out / name for name in OUTPUT_FILES}
        inputs = [s.path for s in self.sources] + [e.path for e in self.evaluations]
        inputs += [e.test_path for e in self.evaluations if e.test_path is not None]
        for p in inputs:
            if p.resolve() in reserved:
                raise ConfigError(f"input {p} collides with the output directory {self.output_dir}", "OUTPUT_DIR")


def _flag(key: str, raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigError(f"{key} must be a boolean, got {raw!r}", key)


def _number(key: str, raw, kind):
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be {kind.__name__}, got {raw!r}", key)


def _resolve(base: Path, raw) -> Path:
    p = Path(str(raw)).expanduser()
    return p if p.is_absolute() else base / p


_FIELDS = {
    "K": ("k", int), "DIM": ("dim", int), "SEED": ("seed", int), "WORKERS": ("workers", int),
    "LEAF_SIZE": ("leaf_size", int), "MAX_ITERS": ("max_iters", int),
    "LEARNING_RATE": ("learning_rate", float), "ADAGRAD_EPSILON": ("adagrad_epsilon", float),
    "TOLERANCE": ("tolerance", float), "CONC_EMPHASIS": ("conc_emphasis", float),
}
_FLAGS = {
    "INCLUDE_SELF": "include_self", "ROW_NORMALIZE": "row_normalize", "PROJECTED_SGD": "projected_sgd",
    "SVD_SCALED": "svd_scaled", "SVD_WEIGHTED": "svd_weighted", "EVALUATE_SOURCES": "evaluate_sources",
}


def _scalar(key: str, raw, base: Path) -> Dict[str, Any]:
    if key in _FIELDS:
        name, kind = _FIELDS[key]
        return {name: _number(key, raw, kind)}
    if key in _FLAGS:
        return {_FLAGS[key]: _flag(key, raw)}
    if key in ("OUTPUT_DIR", "CACHE_DIR"):
        return {key.lower(): _resolve(base, raw)}
    return {{"SOLVER": "solver", "METHOD": "method", "CONC_POLICY": "conc_policy"}[key]: str(raw).strip().lower()}


def _source_entry(i: int, fields: Dict[str, str], base: Path) -> SourceEntry:
    if "PATH" not in fields:
        raise ConfigError(f"SOURCE_{i}_PATH is missing", f"SOURCE_{i}_PATH")
    path = _resolve(base, fields["PATH"])
    scale = None
    if "SCALE" in fields:
        scale = _number(f"SOURCE_{i}_SCALE", fields["SCALE"], float)
        if scale <= 0:
            raise ConfigError(f"SOURCE_{i}_SCALE must be positive", f"SOURCE_{i}_SCALE")
    return SourceEntry(
        name=fields.get("NAME", path.stem),
        path=path,
        format=fields.get("FORMAT", "glove-text"),
        scale=scale,
        emphasise=_flag(f"SOURCE_{i}_EMPHASISE", fields.get("EMPHASISE", "false")),
    )


def _eval_entry(i: int, fields: Dict[str, str], base: Path) -> EvalEntry:
    for part in ("TASK", "PATH"):
        if part not in fields:
            raise ConfigError(f"EVAL_{i}_{part} is missing", f"EVAL_{i}_{part}")
    path = _resolve(base, fields["PATH"])
    return EvalEntry(
        task=fields["TASK"].strip().lower(),
        path=path,
        name=fields.get("NAME", path.stem),
        test_path=_resolve(base, fields["TEST_PATH"]) if "TEST_PATH" in fields else None,
    )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """What run() produced: the meta-embedding, report records and written files."""
    meta: MetaEmbedding
    records: List[Dict[str, Any]]
    outputs: Dict[str, Path] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)


def _stage(name: str):
    """Re-raise anything a stage throws as StageError(name, cause)."""
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                logger.error(f"[Pipeline] stage '{name}' failed: {e}")
                raise StageError(name, e) from e
        return inner
    return wrap


def _stored(meta: MetaEmbedding, emb: EmbeddingSet) -> MetaEmbedding:
    return MetaEmbedding(
        vocab=emb.vocab, vectors=emb.vectors, provenance=meta.provenance,
        eigenvalues=meta.eigenvalues, metadata=meta.metadata,
    )


class Pipeline:
    """
    Stage runner bound to one config and one artifact cache.

    Every stage method returns its result together with its cache key so
    callers (the CLI) can chain stages and report artifact paths.
    """

    def __init__(self, config: PipelineConfig, cache: ArtifactCache = None):
        self.config = config
        self.cache = cache or ArtifactCache(config.cache_dir)

    def artifact_path(self, stage: str, key: str) -> Path:
        return self.cache.path_for(stage, key)

    @_stage("ingest")
    def ingest(self) -> Tuple[List[EmbeddingSet], List[str]]:
        """Load and l2-normalise every source (cached as cache-binary)."""
        sets, keys = [], []
        for entry in self.config.sources:
            params = {"name": entry.name, "format": entry.format, "normalize": True}
            key = cache_key("ingest", params, [content_digest(entry.path)])
            hit = self.cache.lookup("ingest", key)
            if hit is not None:
                emb = load_embeddings(hit, "cache-binary", name=entry.name)
            else:
                emb = l2_normalize(load_embeddings(entry.path, entry.format, name=entry.name))
                self.cache.store("ingest", key, lambda tmp, e=emb: save_cache(e, tmp), params=params)
            logger.info(f"[Pipeline] source '{entry.name}': {len(emb)} words, dim {emb.dim}")
            sets.append(emb)
            keys.append(key)
        return sets, keys

    @_stage("knn")
    def knn(self, sets: Sequence[EmbeddingSet], ingest_keys: Sequence[str]) -> Tuple[NeighbourhoodGraph, str]:
        cfg = self.config
        vocab, membership = union_vocab(sets)
        params = {"k": cfg.k, "include_self": cfg.include_self, "leaf_size": cfg.leaf_size}
        key = cache_key("knn", params, list(ingest_keys))
        hit = self.cache.lookup("knn", key)
        if hit is not None:
            return load_graph(hit, vocab, membership), key
        graph = build_graph(sets, vocab, membership, k=cfg.k, include_self=cfg.include_self,
                            leaf_size=cfg.leaf_size, workers=cfg.workers)
        self.cache.store("knn", key, lambda tmp: save_graph(graph, tmp), params=params)
        return graph, key

    @_stage("weights")
    def weights(self, sets: Sequence[EmbeddingSet], graph: NeighbourhoodGraph, knn_key: str) -> Tuple[SparseWeights, str]:
        cfg = self.config
        params = {"solver": cfg.solver}
        if cfg.solver == "sgd":
            solver = cfg.solver_config()
            params.update({
                "learning_rate": solver.learning_rate, "max_iters": solver.max_iters,
                "adagrad_epsilon": solver.adagrad_epsilon, "tolerance": solver.tolerance,
                "projected": solver.projected, "seed": solver.seed,
            })
        key = cache_key("weights", params, [knn_key])
        hit = self.cache.lookup("weights", key)
        if hit is not None:
            return load_weights(hit), key
        if cfg.solver == "exact":
            W = fit_weights_exact(sets, graph, workers=cfg.workers)
        else:
            W = fit_weights_sgd(sets, graph, cfg.solver_config(), workers=cfg.workers)
        self.cache.store("weights", key, lambda tmp: save_weights(W, tmp), params=params)
        return W, key

    @_stage("project")
    def project(self, W: SparseWeights, graph: NeighbourhoodGraph, weights_key: str) -> Tuple[MetaEmbedding, str]:
        cfg = self.config
        params = {"dim": cfg.dim, "row_normalize": cfg.row_normalize, "eigen_tol": cfg.eigen_tol}
        key = cache_key("project", params, [weights_key])
        return self._meta("project", key, params, lambda: project(
            combine_weights(W, graph, row_normalize=cfg.row_normalize), cfg.dim, tol=cfg.eigen_tol,
        )), key

    @_stage("conc")
    def conc(self, sets: Sequence[EmbeddingSet], ingest_keys: Sequence[str]) -> Tuple[MetaEmbedding, str]:
        conc_cfg = self.config.conc_config()
        params = {"scales": {s.name: conc_cfg.scale_for(s.name) for s in sets}, "policy": conc_cfg.vocab_policy}
        key = cache_key("conc", params, list(ingest_keys))
        return self._meta("conc", key, params, lambda: concat(sets, conc_cfg)), key

    @_stage("svd")
    def svd(self, sets: Sequence[EmbeddingSet], ingest_keys: Sequence[str]) -> Tuple[MetaEmbedding, str]:
        cfg = self.config
        conc_cfg = cfg.conc_config()
        params = {
            "dim": cfg.dim, "scaled": cfg.svd_scaled, "weighted": cfg.svd_weighted,
            "scales": {s.name: conc_cfg.scale_for(s.name) for s in sets},
        }
        key = cache_key("svd", params, list(ingest_keys))
        return self._meta("svd", key, params, lambda: svd_meta(
            sets, cfg.dim, conc_cfg, scaled=cfg.svd_scaled, weight_by_singular_values=cfg.svd_weighted,
        )), key

    def _meta(self, stage: str, key: str, params: Dict[str, Any], compute) -> MetaEmbedding:
        provenance = "lle" if stage == "project" else stage
        hit = self.cache.lookup(stage, key)
        if hit is not None:
            emb = load_embeddings(hit, "cache-binary")
            return MetaEmbedding(vocab=emb.vocab, vectors=emb.vectors, provenance=provenance)
        meta = compute()
        emb = meta.to_embedding_set(f"meta-{provenance}")
        self.cache.store(stage, key, lambda tmp: save_cache(emb, tmp), params=params)
        # downstream always sees the float32 values that were cached
        return _stored(meta, emb)

    def build_meta(self) -> Tuple[MetaEmbedding, List[EmbeddingSet]]:
        """Run every stage up to the configured method's meta-embedding."""
        sets, ingest_keys = self.ingest()
        if self.config.method == "conc":
            meta, _ = self.conc(sets, ingest_keys)
        elif self.config.method == "svd":
            meta, _ = self.svd(sets, ingest_keys)
        else:
            graph, knn_key = self.knn(sets, ingest_keys)
            W, weights_key = self.weights(sets, graph, knn_key)
            meta, _ = self.project(W, graph, weights_key)
        return meta, sets

    @_stage("evaluate")
    def evaluate(self, emb, label: str, ablation: str = None) -> List[Dict[str, Any]]:
        """One report record per configured evaluation for ``emb``."""
        records = []
        for entry in self.config.evaluations:
            record = {
                "method": self.config.method, "embedding": label, "ablation": ablation,
                "task": entry.task, "dataset": entry.name,
                "score": None, "coverage": 0.0, "evaluated": 0, "total": 0, "error": None,
            }
            try:
                result = _evaluate_one(emb, entry, self.config)
            except (InsufficientCoverageError, UndefinedCorrelationError) as e:
                logger.warning(f"[Pipeline] {label} on {entry.name}: {e}")
                record["error"] = f"{type(e).__name__}: {e}"
            else:
                record.update({
                    "score": None if result.score is None else result.score * SCORE_SCALE,
                    "coverage": result.coverage,
                    "evaluated": result.evaluated,
                    "total": result.total,
                    "details": result.details,
                })
            records.append(record)
        return records


_PARSERS = {
    "similarity": lambda e: parse_similarity(e.path, e.name),
    "analogy": lambda e: parse_analogy(e.path, e.name),
    "relation": lambda e: parse_relation(e.path, e.name),
    "text": lambda e: parse_text(e.path, e.test_path, e.name),
}


def _evaluate_one(emb, entry: EvalEntry, config: PipelineConfig):
    ds = _PARSERS[entry.task](entry)
    if entry.task == "similarity":
        return eval_similarity(emb, ds)
    if entry.task == "analogy":
        return eval_analogy(emb, ds)
    if entry.task == "relation":
        return eval_relation(emb, ds)
    return eval_text(emb, ds, folds=config.cv_folds, reg_grid=config.reg_grid, seed=config.seed)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _sort_records(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return sorted(records, key=lambda r: (
        str(r.get("ablation") or ""), r["embedding"], r["task"], r["dataset"],
    ))


def _csv_text(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in columns})
    return buf.getvalue()


def write_report(records: List[Dict[str, Any]], summary: Dict[str, Any], out_dir: Path) -> Dict[str, Path]:
    """report.json (sorted, no timestamps) and report.csv."""
    out_dir = Path(out_dir)
    json_path, csv_path = out_dir / "report.json", out_dir / "report.csv"
    payload = {"summary": summary, "records": records}
    atomic_write_text(json_path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    atomic_write_text(csv_path, _csv_text(records, REPORT_COLUMNS))
    return {"report.json": json_path, "report.csv": csv_path}


def run(config: PipelineConfig, cache: ArtifactCache = None, ablation: str = None) -> RunResult:
    """
    Run the configured method end to end and write outputs.

    Args:
        config: Experiment config
        cache: Artifact cache (defaults to one at config.cache_dir)
        ablation: Name of a held-out source, recorded on every report row

    Returns:
        RunResult

    Raises:
        StageError: A stage failed; ``stage`` names it
    """
    config.validate()
    pipeline = Pipeline(config, cache)
    meta, sets = pipeline.build_meta()

    records = pipeline.evaluate(meta, config.method, ablation)
    if config.evaluate_sources:
        for emb in sets:
            records += pipeline.evaluate(emb, emb.name, ablation)
    records = _sort_records(records)

    _, membership = union_vocab(sets)
    summary = {
        "method": config.method,
        "dim": meta.dim,
        "n_words": len(meta),
        "k": config.k if config.method == "lle" else None,
        "solver": config.solver if config.method == "lle" else None,
        "seed": config.seed,
        "ablation": ablation,
        "sources": {
            e.name: {"words": len(e), "dim": e.dim, "coverage": membership.coverage()[e.name]} for e in sets
        },
    }

    out = Path(config.output_dir)
    outputs = {"meta.txt": out / "meta.txt", "meta.bin": out / "meta.bin"}
    try:
        save_meta(meta, outputs["meta.txt"], "glove-text")
        save_meta(meta, outputs["meta.bin"], "cache-binary")
        outputs.update(write_report(records, summary, out))
    except OSError as e:
        raise StageError("write", e) from e

    stats = pipeline.cache.get_stats()
    logger.info(
        f"[Pipeline] ✓ {config.method} done: {len(meta)} words x {meta.dim} dims, "
        f"{len(records)} report rows (cache hits {stats['hits']}, misses {stats['misses']})"
    )
    return RunResult(meta=meta, records=records, outputs=outputs, summary=summary)


def _check_values(values: Sequence[float]) -> None:
    if not values:
        raise ValueError("sweep needs at least one value")
    if any(v <= 0 for v in values):
        raise ValueError(f"sweep values must be positive, got {list(values)}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"sweep values must be strictly ascending, got {list(values)}")


def _at(config: PipelineConfig, axis: str, value) -> PipelineConfig:
    out = Path(config.output_dir) / f"{axis}-{value:g}"
    if axis == "dimension":
        return replace(config, dim=int(value), output_dir=out)
    if axis == "neighbourhood":
        return replace(config, k=int(value), output_dir=out)
    return replace(config, conc_emphasis=float(value), output_dir=out)


def sweep(config: PipelineConfig, axis: str, values: Sequence[float], cache: ArtifactCache = None) -> List[Dict[str, Any]]:
    """
    Run the pipeline once per value of ``axis``, other settings unchanged.

    A failing point produces a row carrying the error and the sweep moves on.
    Rows are also written to <output_dir>/sweep-<axis>.csv.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got '{axis}'")
    _check_values(values)
    cache = cache or ArtifactCache(config.cache_dir)

    rows: List[Dict[str, Any]] = []
    for value in values:
        point = _at(config, axis, value)
        try:
            result = run(point, cache)
        except (StageError, ConfigError, ValueError) as e:
            logger.error(f"[Pipeline] sweep {axis}={value} failed: {e}")
            rows.append({"axis": axis, "value": value, "embedding": None, "task": None,
                         "dataset": None, "score": None, "coverage": None, "error": str(e)})
            continue
        for r in result.records:
            rows.append({"axis": axis, "value": value, "embedding": r["embedding"], "task": r["task"],
                         "dataset": r["dataset"], "score": r["score"], "coverage": r["coverage"],
                         "error": r["error"]})

    atomic_write_text(Path(config.output_dir) / f"sweep-{axis}.csv", _csv_text(rows, SWEEP_COLUMNS))
    return rows


def ablate(config: PipelineConfig, hold_out: str, cache: ArtifactCache = None) -> RunResult:
    """
    Run with one source removed; every report row carries ``ablation``.

    Raises:
        ConfigError: Fewer than 3 sources, or no source named ``hold_out``
    """
    names = [s.name for s in config.sources]
    if len(names) < 3:
        raise ConfigError(f"ablation needs at least 3 sources, got {len(names)}", "SOURCE_NAME")
    if hold_out not in names:
        raise ConfigError(f"unknown source '{hold_out}', configured: {names}", "SOURCE_NAME")
    kept = tuple(s for s in config.sources if s.name != hold_out)
    held = replace(config, sources=kept, output_dir=Path(config.output_dir) / f"ablate-{hold_out}")
    logger.info(f"[Pipeline] ablation: holding out '{hold_out}', running on {[s.name for s in kept]}")
    return run(held, cache, ablation=hold_out)


@dataclass(frozen=True)
class TuneResult:
    axis: str
    validation: str
    best_value: float
    scores: Dict[float, Optional[float]]


def tune(
    config: PipelineConfig,
    axis: str,
    values: Sequence[float],
    validation: str,
    cache: ArtifactCache = None,
) -> TuneResult:
    """
    Sweep ``axis`` and pick the value with the best meta-embedding score on
    the evaluation named ``validation`` (first value wins ties).
    """
    if validation not in {e.name for e in config.evaluations}:
        raise ConfigError(f"no evaluation named '{validation}'", "EVAL_NAME")
    rows = sweep(config, axis, values, cache)
    scores: Dict[float, Optional[float]] = {v: None for v in values}
    for r in rows:
        if r["dataset"] == validation and r["embedding"] == config.method and r["score"] is not None:
            scores[r["value"]] = r["score"]

    scored = [(s, v) for v, s in scores.items() if s is not None]
    if not scored:
        raise StageError("tune", ValueError(f"no sweep point produced a '{validation}' score"))
    best_score = max(s for s, _ in scored)
    best_value = next(v for v in values if scores[v] == best_score)
    logger.info(f"[Pipeline] ✓ tuned {axis} on '{validation}': {best_value} (score {best_score:.2f})")
    return TuneResult(axis=axis, validation=validation, best_value=best_value, scores=scores)
