"""Benchmark parsers, evaluators and synthetic fixtures."""

from .datasets import (
    AnalogyDataset,
    DatasetFormatError,
    InvalidDatasetError,
    RelationDataset,
    SimilarityDataset,
    TextDataset,
    parse_analogy,
    parse_relation,
    parse_similarity,
    parse_text,
    tokenize,
)
from .synthetic import SourceSpec, make_synthetic
from .tasks import (
    InsufficientCoverageError,
    OutOfVocabularyError,
    TaskResult,
    UndefinedCorrelationError,
    cosadd,
    eval_analogy,
    eval_relation,
    eval_similarity,
    eval_text,
    neighbour_overlap,
    spearman,
)

__all__ = [
    "AnalogyDataset",
    "DatasetFormatError",
    "InvalidDatasetError",
    "RelationDataset",
    "SimilarityDataset",
    "TextDataset",
    "parse_analogy",
    "parse_relation",
    "parse_similarity",
    "parse_text",
    "tokenize",
    "SourceSpec",
    "make_synthetic",
    "InsufficientCoverageError",
    "OutOfVocabularyError",
    "TaskResult",
    "UndefinedCorrelationError",
    "cosadd",
    "eval_analogy",
    "eval_relation",
    "eval_similarity",
    "eval_text",
    "neighbour_overlap",
    "spearman",
]
