"""
Reconstruction Weights

Fits the sparse weights W that reconstruct every word from its neighbours in
all source spaces at once:

    Phi(W) = sum_i sum_v || v_i - sum_{u in N_i(v)} w_vu u_i ||^2

Phi is separable per word, so each row of W is an independent problem.
For one word, the covering sources are stacked along the feature axis into a
single matrix B (one row per union neighbour u). Row u carries u's vector in
source i only where u is in N_i(v) and zeros elsewhere, which is exactly the
indicator structure of the objective.

Two solvers:
- fit_weights_sgd: AdaGrad from a random start, then rows normalised to sum 1
- fit_weights_exact: constrained least squares through the local Gram system
"""

import struct
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .artifact_cache import atomic_writer
from .core.config import (
    DEFAULT_ADAGRAD_EPSILON,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_ITERS,
    DEFAULT_TOLERANCE,
    MAX_EXACT_NEIGHBOURHOOD,
)
from .embio import EmbeddingSet, Vocabulary
from .neighbours import NeighbourhoodGraph

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MEMBWGHT"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<IQQB")  # version, n, nnz, finalized

_SGD_STREAM = 0x5347  # substream tag for per-word SGD initialisation
_MONITOR_AFTER = 10
_MONITOR_SLACK = 1e-9
_TIKHONOV = 1e-8
_WORD_CHUNK = 512


class ReconstructionError(RuntimeError):
    """Base class for weight-fitting failures tied to one word."""

    def __init__(self, message: str, word: str = None):
        self.word = word
        super().__init__(message)


class NonFiniteObjectiveError(ReconstructionError):
    pass


class SingularSystemError(ReconstructionError):
    pass


class NeighbourhoodTooLargeError(ReconstructionError):
    pass


class EmptyNeighbourhoodError(ReconstructionError):
    pass


class NotInNeighbourhoodError(ValueError):
    """Raised when a gradient is requested for u outside N_1(v) u N_2(v)."""
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """SGD settings. learning_rate and max_iters default to 0.01 and 100."""
    learning_rate: float = DEFAULT_LEARNING_RATE
    max_iters: int = DEFAULT_MAX_ITERS
    adagrad_epsilon: float = DEFAULT_ADAGRAD_EPSILON
    seed: int = 0
    tolerance: float = DEFAULT_TOLERANCE
    projected: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.adagrad_epsilon < 0:
            raise ValueError(f"adagrad_epsilon must be >= 0, got {self.adagrad_epsilon}")


@dataclass(frozen=True, eq=False)
class SparseWeights:
    """
    Row-compressed weights over the union vocabulary.

    Row v lists the sorted union neighbourhood of v and one weight per entry.
    """
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    finalized: bool = True

    @property
    def n_words(self) -> int:
        return int(self.indptr.shape[0] - 1)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row(self, v: int) -> Tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[v], self.indptr[v + 1]
        return self.indices[s:e], self.data[s:e]

    def row_sums(self) -> np.ndarray:
        owner = np.repeat(np.arange(self.n_words), np.diff(self.indptr))
        return np.bincount(owner, weights=self.data, minlength=self.n_words)

    def weight(self, v: int, u: int) -> float:
        ids, w = self.row(v)
        pos = np.searchsorted(ids, u)
        if pos < len(ids) and ids[pos] == u:
            return float(w[pos])
        return 0.0

    def with_data(self, data: np.ndarray, finalized: bool = None) -> "SparseWeights":
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ValueError("replacement data must match the sparsity pattern")
        return replace(self, data=data, finalized=self.finalized if finalized is None else finalized)

    def to_csr(self) -> sp.csr_matrix:
        n = self.n_words
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(n, n))

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[np.ndarray, np.ndarray]], finalized: bool = True) -> "SparseWeights":
        lengths = np.array([len(ids) for ids, _ in rows], dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        if len(rows) and indptr[-1]:
            indices = np.concatenate([np.asarray(ids, dtype=np.int64) for ids, _ in rows])
            data = np.concatenate([np.asarray(w, dtype=np.float64) for _, w in rows])
        else:
            indices = np.empty(0, dtype=np.int64)
            data = np.empty(0, dtype=np.float64)
        return cls(indptr=indptr, indices=indices, data=data, finalized=finalized)


class _WordProblem:
    """Phi restricted to one word: || x - B^T w ||^2 over the stacked sources."""

    def __init__(self, v: int, sets: Sequence[EmbeddingSet], graph: NeighbourhoodGraph):
        self.v = v
        self.ids = graph.union_neighbours(v)
        xs, blocks = [], []
        for s in graph.sources_covering(v):
            rows = graph.membership.rows[s]
            vectors = sets[s].vectors
            in_source = np.isin(self.ids, graph.source_neighbours(s, v))
            block = np.zeros((len(self.ids), vectors.shape[1]), dtype=np.float64)
            block[in_source] = vectors[rows[self.ids[in_source]]]
            blocks.append(block)
            xs.append(np.asarray(vectors[rows[v]], dtype=np.float64))
        self.x = np.concatenate(xs) if xs else np.empty(0)
        self.B = np.hstack(blocks) if blocks else np.empty((len(self.ids), 0))

    @property
    def size(self) -> int:
        return len(self.ids)

    def residual(self, w: np.ndarray) -> np.ndarray:
        return self.x - self.B.T @ w

    def phi(self, w: np.ndarray) -> float:
        r = self.residual(w)
        return float(r @ r)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return -2.0 * (self.B @ self.residual(w))

    def gram(self) -> np.ndarray:
        Z = self.x[None, :] - self.B
        return Z @ Z.T


def _check_sources(sets: Sequence[EmbeddingSet], graph: NeighbourhoodGraph) -> None:
    if tuple(e.name for e in sets) != graph.names:
        raise ValueError("sets do not match the sources the graph was built from")


def _row_for(W: SparseWeights, problem: _WordProblem, vocab: Vocabulary) -> np.ndarray:
    ids, w = W.row(problem.v)
    if not np.array_equal(ids, problem.ids):
        raise ValueError(f"weights support for {vocab.words[problem.v]!r} does not match the graph")
    return w


def reconstruction_error(W: SparseWeights, sets: Sequence[EmbeddingSet], graph: NeighbourhoodGraph) -> float:
    """Phi(W), summed over words and the sources covering each word."""
    _check_sources(sets, graph)
    total = 0.0
    for v in range(graph.n_words):
        problem = _WordProblem(v, sets, graph)
        total += problem.phi(_row_for(W, problem, graph.vocab))
    return total


def error_gradient(
    W: SparseWeights,
    sets: Sequence[EmbeddingSet],
    graph: NeighbourhoodGraph,
    v: int,
    u: int,
) -> float:
    """
    dPhi/dw_vu = -2 sum_i (v_i - sum_x w_vx x_i)^T u_i [u in N_i(v)].

    Raises:
        NotInNeighbourhoodError: u is not in any N_i(v)
    """
    _check_sources(sets, graph)
    problem = _WordProblem(v, sets, graph)
    pos = np.searchsorted(problem.ids, u)
    if pos >= problem.size or problem.ids[pos] != u:
        raise NotInNeighbourhoodError(
            f"{graph.vocab.words[u]!r} is not a neighbour of {graph.vocab.words[v]!r} in any source"
        )
    w = _row_for(W, problem, graph.vocab)
    return float(problem.grad(w)[pos])


def _map_words(fn, n: int, workers: int) -> List:
    out: List = [None] * n

    def run(chunk: range) -> None:
        for v in chunk:
            out[v] = fn(v)

    chunks = [range(s, min(s + _WORD_CHUNK, n)) for s in range(0, n, _WORD_CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for chunk in chunks:
            run(chunk)
    return out


def _require_neighbours(problem: _WordProblem, graph: NeighbourhoodGraph) -> None:
    if problem.size == 0:
        word = graph.vocab.words[problem.v]
        raise EmptyNeighbourhoodError(f"{word!r} has no neighbours in any source", word)


def _sgd_word(problem: _WordProblem, config: SolverConfig, graph: NeighbourhoodGraph) -> Tuple[np.ndarray, int, bool]:
    word = graph.vocab.words[problem.v]
    rng = np.random.default_rng([config.seed, _SGD_STREAM, problem.v])
    w = rng.uniform(0.0, 1.0, problem.size)
    w /= w.sum()
    accum = np.zeros(problem.size)
    phi_prev = problem.phi(w)
    diverged = False
    iters = 0

    for iters in range(1, config.max_iters + 1):
        g = problem.grad(w)
        accum += g * g
        scale = 1.0 / (np.sqrt(accum) + config.adagrad_epsilon)
        if config.projected:
            # projection onto sum(w) = const in the AdaGrad metric
            g = g - (scale @ g) / scale.sum()
        w = w - config.learning_rate * scale * g

        phi = problem.phi(w)
        if not np.isfinite(phi):
            raise NonFiniteObjectiveError(f"Phi became non-finite while fitting {word!r} (iteration {iters})", word)
        if iters > _MONITOR_AFTER and phi > phi_prev + _MONITOR_SLACK:
            diverged = True
        decrease = phi_prev - phi
        phi_prev = phi
        if phi == 0.0 or 0.0 <= decrease < config.tolerance * (phi + decrease):
            break

    total = w.sum()
    if abs(total) < 1e-12:
        logger.warning(f"[Recon] weights of {word!r} sum to ~0 after SGD, falling back to uniform")
        w = np.full(problem.size, 1.0 / problem.size)
    else:
        w = w / total
    return w, iters, diverged


def fit_weights_sgd(
    sets: Sequence[EmbeddingSet],
    graph: NeighbourhoodGraph,
    config: SolverConfig = SolverConfig(),
    workers: int = 1,
) -> SparseWeights:
    """
    Fit W by per-word AdaGrad, then normalise every row to sum 1.

    Args:
        sets: Source sets, normalised the same way as for graph construction
        graph: Neighbourhood graph
        config: Solver settings; the result is a function of config.seed only
        workers: Threads (result does not depend on it)

    Raises:
        NonFiniteObjectiveError: Phi overflowed for a word
        EmptyNeighbourhoodError: A word has no neighbours at all
    """
    _check_sources(sets, graph)

    def solve(v: int):
        problem = _WordProblem(v, sets, graph)
        _require_neighbours(problem, graph)
        w, iters, diverged = _sgd_word(problem, config, graph)
        return problem.ids, w, iters, diverged

    results = _map_words(solve, graph.n_words, workers)
    diverged = sum(1 for r in results if r[3])
    mean_iters = float(np.mean([r[2] for r in results])) if results else 0.0
    if diverged:
        logger.warning(f"[Recon] Phi increased after iteration {_MONITOR_AFTER} for {diverged} words")
    logger.info(f"[Recon] SGD fitted {len(results)} words, mean iterations {mean_iters:.1f}")
    return SparseWeights.from_rows([(r[0], r[1]) for r in results], finalized=True)


def _exact_word(problem: _WordProblem, graph: NeighbourhoodGraph) -> np.ndarray:
    word = graph.vocab.words[problem.v]
    if problem.size > MAX_EXACT_NEIGHBOURHOOD:
        raise NeighbourhoodTooLargeError(
            f"{word!r} has {problem.size} union neighbours, exact solve is limited to {MAX_EXACT_NEIGHBOURHOOD}",
            word,
        )
    G = problem.gram()
    trace = float(np.trace(G))
    reg = _TIKHONOV * trace / problem.size if trace > 0 else 1.0
    G[np.diag_indices_from(G)] += reg
    try:
        w = scipy.linalg.solve(G, np.ones(problem.size), assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"Gram system for {word!r} is singular after regularisation: {e}", word)
    if not np.all(np.isfinite(w)) or w.sum() == 0.0:
        raise SingularSystemError(f"Gram system for {word!r} produced unusable weights", word)
    return w / w.sum()


def fit_weights_exact(
    sets: Sequence[EmbeddingSet],
    graph: NeighbourhoodGraph,
    workers: int = 1,
) -> SparseWeights:
    """
    Exact per-word minimiser of Phi subject to sum(w) = 1.

    Solves (G + lambda I) w = 1 with lambda = 1e-8 trace(G) / |N| and
    rescales w to sum 1. Where |N(v)| exceeds the summed dimension of the
    sources covering v, G is singular and the minimiser is not unique; such
    words are counted and logged, and SGD usually gives more useful weights.

    Raises:
        EmptyNeighbourhoodError: A word has no neighbours in any source
        NeighbourhoodTooLargeError: |N_1(v) u N_2(v)| above the dense-solve guard
        SingularSystemError: The regularised system could not be solved
    """
    _check_sources(sets, graph)

    def solve(v: int):
        problem = _WordProblem(v, sets, graph)
        _require_neighbours(problem, graph)
        return problem.ids, _exact_word(problem, graph), problem.size > problem.x.shape[0]

    results = _map_words(solve, graph.n_words, workers)
    underdetermined = sum(1 for r in results if r[2])
    if underdetermined:
        logger.warning(
            f"[Recon] {underdetermined} of {len(results)} words have more neighbours than summed source "
            f"dimensions; their exact weights are underdetermined (use a smaller k or the sgd solver)"
        )
    logger.info(f"[Recon] exact solve for {len(results)} words")
    return SparseWeights.from_rows([(r[0], r[1]) for r in results], finalized=True)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_weights(W: SparseWeights, path) -> None:
    """Binary sparse-row file: header, indptr, indices, float64 weights."""
    payload = b"".join([
        WEIGHTS_MAGIC,
        _WEIGHTS_HEADER.pack(WEIGHTS_VERSION, W.n_words, W.nnz, int(W.finalized)),
        np.ascontiguousarray(W.indptr, dtype="<i8").tobytes(),
        np.ascontiguousarray(W.indices, dtype="<i8").tobytes(),
        np.ascontiguousarray(W.data, dtype="<f8").tobytes(),
    ])
    atomic_writer(path, lambda tmp: tmp.write_bytes(payload))


def load_weights(path) -> SparseWeights:
    data = Path(path).read_bytes()
    if data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file")
    pos = len(WEIGHTS_MAGIC)
    version, n, nnz, finalized = _WEIGHTS_HEADER.unpack_from(data, pos)
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: weights version {version}, expected {WEIGHTS_VERSION}")
    pos += _WEIGHTS_HEADER.size
    indptr = np.frombuffer(data, dtype="<i8", count=n + 1, offset=pos).astype(np.int64)
    pos += 8 * (n + 1)
    indices = np.frombuffer(data, dtype="<i8", count=nnz, offset=pos).astype(np.int64)
    pos += 8 * nnz
    weights = np.frombuffer(data, dtype="<f8", count=nnz, offset=pos).astype(np.float64)
    return SparseWeights(indptr=indptr, indices=indices, data=weights, finalized=bool(finalized))


def dump_weights_text(W: SparseWeights, vocab: Vocabulary, path) -> None:
    """Text triples "word neighbour weight", one per non-zero."""
    words = vocab.words

    def write(tmp: Path) -> None:
        with open(tmp, "w", encoding="utf-8", errors="surrogateescape", newline="\n") as f:
            for v in range(W.n_words):
                ids, w = W.row(v)
                for u, x in zip(ids.tolist(), w.tolist()):
                    f.write(f"{words[v]} {words[u]} {x!r}\n")

    atomic_writer(path, write)
