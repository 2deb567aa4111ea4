"""
Benchmark dataset types and parsers.

Formats:
    similarity  "w1 w2 score" per line, whitespace separated, "#" comments
    analogy     Google questions-words (": section" headers, 4 tokens a line)
    relation    CSV "relation,word1,word2"
    text        "label<TAB>text" per line, labels 0/1, train and test files
"""

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")


class DatasetFormatError(ValueError):
    """Malformed benchmark file; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int = None, path=None):
        self.line_number = line_number
        self.path = str(path) if path is not None else None
        where = ""
        if path is not None:
            where = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class InvalidDatasetError(ValueError):
    pass


def tokenize(text: str) -> Tuple[str, ...]:
    """Lowercase, then split on runs of non-alphanumeric characters."""
    return tuple(_TOKEN.findall(text.lower()))


@dataclass(frozen=True)
class SimilarityDataset:
    name: str
    pairs: Tuple[Tuple[str, str, float], ...]

    def __post_init__(self):
        if len(self.pairs) < 2:
            raise InvalidDatasetError(f"'{self.name}': need at least 2 pairs, got {len(self.pairs)}")
        for w1, w2, score in self.pairs:
            if not math.isfinite(score):
                raise InvalidDatasetError(f"'{self.name}': non-finite score for ({w1}, {w2})")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class AnalogyDataset:
    """Questions "a is to b as c is to d"; ``sections[i]`` labels ``questions[i]``."""
    name: str
    questions: Tuple[Tuple[str, str, str, str], ...]
    sections: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.sections:
            object.__setattr__(self, "sections", ("",) * len(self.questions))
        if len(self.sections) != len(self.questions):
            raise InvalidDatasetError(f"'{self.name}': {len(self.sections)} labels for {len(self.questions)} questions")
        for q in self.questions:
            if len(q) != 4 or any(not t for t in q) or len(set(q)) != 4:
                raise InvalidDatasetError(f"'{self.name}': question {q} needs four distinct non-empty tokens")

    def __len__(self) -> int:
        return len(self.questions)


@dataclass(frozen=True)
class RelationDataset:
    name: str
    triples: Tuple[Tuple[str, str, str], ...]

    def __post_init__(self):
        if len(self.triples) < 2:
            raise InvalidDatasetError(f"'{self.name}': need at least 2 triples, got {len(self.triples)}")
        labels = [t[0] for t in self.triples]
        if all(labels.count(label) < 2 for label in set(labels)):
            raise InvalidDatasetError(f"'{self.name}': no relation has two members")

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class TextDataset:
    name: str
    train: Tuple[Tuple[int, Tuple[str, ...]], ...]
    test: Tuple[Tuple[int, Tuple[str, ...]], ...]

    def __post_init__(self):
        labels = {label for label, _ in self.train}
        if labels != {0, 1}:
            raise InvalidDatasetError(f"'{self.name}': train split must contain both classes, got {sorted(labels)}")


def _lines(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield line_no, line


def parse_similarity(path, name: str = None, lowercase: bool = False) -> SimilarityDataset:
    """
    Parse a word-similarity file.

    Raises:
        DatasetFormatError: Wrong field count or unparsable score
    """
    path = Path(path)
    pairs: List[Tuple[str, str, float]] = []
    for line_no, line in _lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise DatasetFormatError(f"expected 'word1 word2 score', got {len(parts)} fields", line_no, path)
        try:
            score = float(parts[2])
        except ValueError:
            raise DatasetFormatError(f"unparsable score {parts[2]!r}", line_no, path)
        if not math.isfinite(score):
            raise DatasetFormatError(f"non-finite score {parts[2]!r}", line_no, path)
        w1, w2 = (parts[0].lower(), parts[1].lower()) if lowercase else (parts[0], parts[1])
        pairs.append((w1, w2, score))
    logger.debug(f"[Datasets] {path.name}: {len(pairs)} similarity pairs")
    return SimilarityDataset(name=name or path.stem, pairs=tuple(pairs))


def parse_analogy(path, name: str = None, lowercase: bool = False) -> AnalogyDataset:
    """Parse a questions-words analogy file; ": label" lines open a section."""
    path = Path(path)
    questions: List[Tuple[str, str, str, str]] = []
    sections: List[str] = []
    section = ""
    for line_no, line in _lines(path):
        if line.startswith(":"):
            section = line[1:].strip()
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetFormatError(f"expected 4 tokens, got {len(parts)}", line_no, path)
        if lowercase:
            parts = [p.lower() for p in parts]
        if len(set(parts)) != 4:
            raise DatasetFormatError(f"question tokens are not distinct: {line!r}", line_no, path)
        questions.append(tuple(parts))
        sections.append(section)
    return AnalogyDataset(name=name or path.stem, questions=tuple(questions), sections=tuple(sections))


def parse_relation(path, name: str = None, lowercase: bool = False) -> RelationDataset:
    """Parse "relation,word1,word2" rows."""
    path = Path(path)
    triples: List[Tuple[str, str, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 3:
                raise DatasetFormatError(f"expected 'relation,word1,word2', got {len(row)} fields", line_no, path)
            relation, w1, w2 = (c.strip() for c in row)
            if not relation or not w1 or not w2:
                raise DatasetFormatError("empty field", line_no, path)
            if lowercase:
                w1, w2 = w1.lower(), w2.lower()
            triples.append((relation, w1, w2))
    return RelationDataset(name=name or path.stem, triples=tuple(triples))


def _parse_text_split(path: Path) -> Tuple[Tuple[int, Tuple[str, ...]], ...]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise DatasetFormatError("expected 'label<TAB>text'", line_no, path)
            if label.strip() not in ("0", "1"):
                raise DatasetFormatError(f"label must be 0 or 1, got {label!r}", line_no, path)
            docs.append((int(label), tokenize(text)))
    return tuple(docs)


def parse_text(train_path, test_path: Optional[str] = None, name: str = None) -> TextDataset:
    """
    Parse a short-text classification dataset.

    Args:
        train_path: Training split
        test_path: Test split (defaults to the training file)
        name: Dataset name (defaults to the training file stem)
    """
    train_path = Path(train_path)
    test_path = Path(test_path) if test_path is not None else train_path
    return TextDataset(
        name=name or train_path.stem,
        train=_parse_text_split(train_path),
        test=_parse_text_split(test_path),
    )
