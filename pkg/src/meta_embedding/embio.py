"""
Embedding I/O

Loads, normalises, caches and aligns source embedding sets.

Supported formats:
- word2vec-text: header line "count dim", then "token f1 ... fd" per line
- glove-text: headerless "token f1 ... fd" lines, dim taken from the first line
- cache-binary: self-describing binary cache written by save_cache()

Tables are held in float32. Solvers promote to float64 themselves.
Tokens are compared byte-exactly (undecodable bytes survive through
surrogateescape), no case folding.
"""

import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .artifact_cache import atomic_writer

logger = logging.getLogger(__name__)

FORMATS = ("word2vec-text", "glove-text", "cache-binary")

CACHE_MAGIC = b"MEMBCACH"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<IQQBI")  # version, n, dim, unit flag, name length

_ENCODING = "utf-8"
_ERRORS = "surrogateescape"
UNIT_NORM_TOL = 1e-6


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file cannot be parsed."""

    def __init__(self, message: str, line_number: int = None, path=None):
        self.line_number = line_number
        self.path = str(path) if path is not None else None
        where = ""
        if self.path is not None:
            where = f"{self.path}:"
        if line_number is not None:
            where += f"line {line_number}:"
        super().__init__(f"{where} {message}" if where else message)


class DimensionMismatchError(EmbeddingFormatError):
    """Raised when rows disagree on dimensionality."""
    pass


class CacheVersionError(ValueError):
    """Raised when a binary cache has the wrong magic bytes or version."""
    pass


class ZeroNormError(ValueError):
    """Raised when a row cannot be length-normalised."""

    def __init__(self, token: str, source: str = None):
        self.token = token
        self.source = source
        src = f" in '{source}'" if source else ""
        super().__init__(f"Zero-norm vector for token {token!r}{src}")


class VocabularyError(ValueError):
    """Raised for duplicate tokens or empty vocabulary inputs."""
    pass


class InvalidEmbeddingError(ValueError):
    """Raised when an EmbeddingSet violates its invariants."""
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Ordered unique tokens with a dense 0-based id map."""
    words: Tuple[str, ...]
    index: Dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocabulary":
        words = tuple(words)
        index = {w: i for i, w in enumerate(words)}
        if len(index) != len(words):
            seen = set()
            dup = next(w for w in words if w in seen or seen.add(w))
            raise VocabularyError(f"Duplicate token in vocabulary: {dup!r}")
        return cls(words=words, index=index)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, token) -> bool:
        return token in self.index

    def __iter__(self):
        return iter(self.words)

    def lookup(self, token: str) -> int:
        """Id of ``token``; KeyError when absent."""
        return self.index[token]

    def get(self, token: str, default: int = -1) -> int:
        return self.index.get(token, default)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """
    One source embedding: vocabulary plus an n x dim float32 table.

    The table is made read-only on construction so a set can be shared
    across workers.
    """
    name: str
    vocab: Vocabulary
    vectors: np.ndarray
    unit_normalized: bool = False
    duplicates_dropped: int = 0

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors is self.vectors and vectors.flags.writeable:
            vectors = vectors.copy()
        if vectors.ndim != 2:
            raise InvalidEmbeddingError(f"'{self.name}': vectors must be 2-d, got shape {vectors.shape}")
        if vectors.shape[0] != len(self.vocab):
            raise InvalidEmbeddingError(
                f"'{self.name}': {vectors.shape[0]} rows for {len(self.vocab)} tokens"
            )
        if vectors.shape[1] < 1:
            raise InvalidEmbeddingError(f"'{self.name}': dimensionality must be positive")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.nonzero(~np.all(np.isfinite(vectors), axis=1))[0][0])
            raise InvalidEmbeddingError(
                f"'{self.name}': non-finite entry in row for token {self.vocab.words[bad]!r}"
            )
        if self.unit_normalized and len(self.vocab):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0) > UNIT_NORM_TOL
            if np.any(off):
                bad = int(np.nonzero(off)[0][0])
                raise InvalidEmbeddingError(
                    f"'{self.name}': row for {self.vocab.words[bad]!r} has norm {norms[bad]:.8f}, expected 1"
                )
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.vocab)

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self.vocab.lookup(token)]

    def equals(self, other: "EmbeddingSet") -> bool:
        """Exact equality: tokens, order, flag and bitwise-equal vectors."""
        return (
            self.name == other.name
            and self.vocab.words == other.vocab.words
            and self.unit_normalized == other.unit_normalized
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass(frozen=True, eq=False)
class SourceMembership:
    """
    Which union-vocabulary words each source covers.

    ``rows[s, v]`` is the row of union word ``v`` in source ``s``, or -1.
    """
    names: Tuple[str, ...]
    rows: np.ndarray

    @property
    def masks(self) -> np.ndarray:
        return self.rows >= 0

    @property
    def n_sources(self) -> int:
        return len(self.names)

    @property
    def n_words(self) -> int:
        return int(self.rows.shape[1])

    def covers(self, source: int, word_id: int) -> bool:
        return bool(self.rows[source, word_id] >= 0)

    def covered_ids(self, source: int) -> np.ndarray:
        return np.nonzero(self.rows[source] >= 0)[0]

    def coverage(self) -> Dict[str, float]:
        n = max(self.n_words, 1)
        return {name: float(np.count_nonzero(self.rows[s] >= 0)) / n for s, name in enumerate(self.names)}

    def intersection_size(self) -> int:
        return int(np.count_nonzero(np.all(self.masks, axis=0)))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _parse_row(parts: List[str], line_no: int, path) -> np.ndarray:
    try:
        row = np.array(parts, dtype=np.float64)
    except ValueError:
        raise EmbeddingFormatError("unparsable float", line_no, path)
    if not np.all(np.isfinite(row)):
        raise EmbeddingFormatError("non-finite value", line_no, path)
    return row


def _load_text(path: Path, fmt: str, name: str) -> EmbeddingSet:
    tokens: List[str] = []
    rows: List[np.ndarray] = []
    seen = set()
    duplicates = 0
    dim = None
    declared_count = None
    header_pending = fmt == "word2vec-text"

    with open(path, "r", encoding=_ENCODING, errors=_ERRORS) as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue

            if header_pending:
                header_pending = False
                if len(parts) != 2:
                    raise EmbeddingFormatError("word2vec header must be 'count dim'", line_no, path)
                try:
                    declared_count, dim = int(parts[0]), int(parts[1])
                except ValueError:
                    raise EmbeddingFormatError("word2vec header must be two integers", line_no, path)
                if dim < 1:
                    raise EmbeddingFormatError(f"invalid dimensionality {dim}", line_no, path)
                continue

            if len(parts) < 2:
                raise EmbeddingFormatError("expected a token followed by floats", line_no, path)
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                if fmt == "glove-text":
                    raise DimensionMismatchError(
                        f"inconsistent dimensionality: {len(parts) - 1} values, expected {dim}", line_no, path
                    )
                raise EmbeddingFormatError(
                    f"wrong field count: {len(parts)} fields, expected {dim + 1}", line_no, path
                )

            row = _parse_row(parts[1:], line_no, path)
            token = parts[0]
            if token in seen:
                duplicates += 1
                continue
            seen.add(token)
            tokens.append(token)
            rows.append(row)

    if not tokens:
        raise EmbeddingFormatError("empty file: no embedding rows", None, path)

    if declared_count is not None and declared_count != len(tokens) + duplicates:
        logger.warning(
            f"[EmbIO] {path}: header declares {declared_count} rows, found {len(tokens) + duplicates}"
        )
    if duplicates:
        logger.warning(f"[EmbIO] {path}: {duplicates} duplicate tokens dropped (first occurrence kept)")

    vectors = np.vstack(rows).astype(np.float32)
    logger.info(f"[EmbIO] loaded '{name}': n={len(tokens)} dim={dim} from {path}")
    return EmbeddingSet(
        name=name,
        vocab=Vocabulary.from_words(tokens),
        vectors=vectors,
        duplicates_dropped=duplicates,
    )


def _load_cache(path: Path, name: str = None) -> EmbeddingSet:
    data = path.read_bytes()
    if len(data) < len(CACHE_MAGIC) + _CACHE_HEADER.size or data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheVersionError(f"{path}: not an embedding cache (bad magic bytes)")
    pos = len(CACHE_MAGIC)
    version, n, dim, unit, name_len = _CACHE_HEADER.unpack_from(data, pos)
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    pos += _CACHE_HEADER.size

    try:
        stored_name = data[pos:pos + name_len].decode(_ENCODING, _ERRORS)
        pos += name_len
        lengths = np.frombuffer(data, dtype="<u4", count=n, offset=pos)
        pos += 4 * n
        tokens = []
        for length in lengths.tolist():
            tokens.append(data[pos:pos + length].decode(_ENCODING, _ERRORS))
            pos += length
        vectors = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim)
    except ValueError as e:
        raise CacheVersionError(f"{path}: truncated or corrupt cache ({e})")

    return EmbeddingSet(
        name=name or stored_name,
        vocab=Vocabulary.from_words(tokens),
        vectors=vectors.astype(np.float32),
        unit_normalized=bool(unit),
    )


def load_embeddings(path, format: str = "glove-text", name: str = None) -> EmbeddingSet:
    """
    Load an embedding set.

    Args:
        path: File path
        format: One of word2vec-text, glove-text, cache-binary
        name: Label for the set (defaults to the file stem, or the cached name)

    Returns:
        EmbeddingSet with rows in file order; duplicate tokens keep their
        first occurrence and are counted in ``duplicates_dropped``.

    Raises:
        EmbeddingFormatError: Malformed line (with line number) or empty file
        CacheVersionError: Binary cache with wrong magic or version
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"Unknown embedding format '{format}', expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")
    if format == "cache-binary":
        return _load_cache(path, name)
    return _load_text(path, format, name or path.stem)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _cache_bytes(emb: EmbeddingSet) -> bytes:
    encoded = [w.encode(_ENCODING, _ERRORS) for w in emb.vocab.words]
    name = emb.name.encode(_ENCODING, _ERRORS)
    parts = [
        CACHE_MAGIC,
        _CACHE_HEADER.pack(CACHE_VERSION, len(emb), emb.dim, int(emb.unit_normalized), len(name)),
        name,
        np.asarray([len(b) for b in encoded], dtype="<u4").tobytes(),
        b"".join(encoded),
        np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def save_cache(emb: EmbeddingSet, path) -> None:
    """Write ``emb`` as a cache-binary file (atomic)."""
    payload = _cache_bytes(emb)
    atomic_writer(path, lambda tmp: tmp.write_bytes(payload))
    logger.debug(f"[EmbIO] cached '{emb.name}' ({len(emb)} x {emb.dim}) to {path}")


def _write_text(emb: EmbeddingSet, tmp: Path, header: bool) -> None:
    with open(tmp, "w", encoding=_ENCODING, errors=_ERRORS, newline="\n") as f:
        if header:
            f.write(f"{len(emb)} {emb.dim}\n")
        for token, row in zip(emb.vocab.words, emb.vectors):
            f.write(token)
            f.write(" ")
            f.write(" ".join(format(float(x), ".9g") for x in row))
            f.write("\n")


def save_embeddings(emb: EmbeddingSet, path, format: str = "glove-text") -> None:
    """
    Write ``emb`` in any supported format.

    Text formats use 9 significant digits, enough to round-trip float32.
    """
    if format == "cache-binary":
        save_cache(emb, path)
    elif format in ("glove-text", "word2vec-text"):
        atomic_writer(path, lambda tmp: _write_text(emb, tmp, header=format == "word2vec-text"))
    else:
        raise ValueError(f"Unknown embedding format '{format}', expected one of {FORMATS}")


# ---------------------------------------------------------------------------
# Normalisation and alignment
# ---------------------------------------------------------------------------

def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """
    Divide every row by its l2 norm.

    Raises:
        ZeroNormError: A row has zero norm (names the token)
    """
    if emb.unit_normalized:
        return emb
    vectors = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        raise ZeroNormError(emb.vocab.words[int(np.nonzero(zero)[0][0])], emb.name)
    return EmbeddingSet(
        name=emb.name,
        vocab=emb.vocab,
        vectors=(vectors / norms[:, None]).astype(np.float32),
        unit_normalized=True,
        duplicates_dropped=emb.duplicates_dropped,
    )


def align_rows(emb: EmbeddingSet, vocab: Vocabulary) -> np.ndarray:
    """Map each union id to the row of that word in ``emb`` (-1 if absent)."""
    rows = np.full(len(vocab), -1, dtype=np.int64)
    for r, token in enumerate(emb.vocab.words):
        v = vocab.get(token)
        if v >= 0:
            rows[v] = r
    return rows


def union_vocab(sets: Sequence[EmbeddingSet]) -> Tuple[Vocabulary, SourceMembership]:
    """
    Union vocabulary ordered by first appearance across ``sets``.

    Returns:
        (Vocabulary, SourceMembership) with one row map per source
    """
    if not sets:
        raise VocabularyError("union_vocab needs at least one embedding set")

    index: Dict[str, int] = {}
    words: List[str] = []
    for emb in sets:
        for token in emb.vocab.words:
            if token not in index:
                index[token] = len(words)
                words.append(token)

    vocab = Vocabulary(words=tuple(words), index=index)
    rows = np.vstack([align_rows(emb, vocab) for emb in sets])
    membership = SourceMembership(names=tuple(e.name for e in sets), rows=rows)
    logger.info(
        f"[EmbIO] union vocabulary: {len(vocab)} words over {len(sets)} sources "
        f"(intersection {membership.intersection_size()})"
    )
    return vocab, membership
