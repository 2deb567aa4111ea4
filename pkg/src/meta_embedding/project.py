"""
Projection to the meta-embedding space.

Weights from all sources are merged by neighbourhood multiplicity,

    w'_vu = w_vu * #{i : u in N_i(v)},

and the meta-embedding is spanned by the bottom eigenvectors of

    M = (I - W')^T (I - W'),

skipping the lowest one. M is never formed for large vocabularies; every
solver reaches it through apply_m(), two sparse passes per product.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .core.config import DEFAULT_DIM, DEFAULT_EIGEN_TOL
from .embio import EmbeddingSet, Vocabulary, save_embeddings
from .neighbours import NeighbourhoodGraph
from .recon import SparseWeights

logger = logging.getLogger(__name__)

PROVENANCES = ("lle", "conc", "svd", "source")

_NULL_TOL = 1e-9
_START_SEED = 0x4D45


class ProjectionError(RuntimeError):
    pass


class DimensionMismatchError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """Raised when a combined weight row sums to zero and cannot be renormalised."""
    pass


class EigenNonConvergenceError(ProjectionError):
    """Raised when eigenpairs miss the residual contract; carries what was reached."""

    def __init__(self, message: str, residuals: Optional[np.ndarray] = None):
        self.residuals = residuals
        super().__init__(message)


@dataclass(frozen=True)
class EigenConfig:
    """
    Eigensolver settings.

    Problems with n <= dense_threshold use a dense symmetric solve. Larger
    ones run ARPACK against the operator with a budget of
    ops_factor * count operator applications per restart cycle and
    max_restarts cycles.
    """
    tol: float = DEFAULT_EIGEN_TOL
    ops_factor: int = 50
    max_restarts: int = 30
    dense_threshold: int = 2000


@dataclass(frozen=True, eq=False)
class CombinedWeights:
    """W' over the union vocabulary (CSR), plus its transpose for the second pass."""
    vocab: Vocabulary
    matrix: sp.csr_matrix
    row_normalized: bool
    matrix_t: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        if self.matrix_t is None:
            object.__setattr__(self, "matrix_t", self.matrix.T.tocsr())

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    @classmethod
    def from_dense(cls, vocab: Vocabulary, dense: np.ndarray, row_normalized: bool = False) -> "CombinedWeights":
        return cls(vocab=vocab, matrix=sp.csr_matrix(np.asarray(dense, dtype=np.float64)), row_normalized=row_normalized)


@dataclass(frozen=True, eq=False)
class MetaEmbedding:
    """Union vocabulary with n x d_P float64 vectors."""
    vocab: Vocabulary
    vectors: np.ndarray
    provenance: str
    eigenvalues: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.vocab):
            raise ValueError(f"meta-embedding has shape {vectors.shape} for {len(self.vocab)} words")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("meta-embedding contains non-finite values")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{self.provenance}'")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.vocab)

    def to_embedding_set(self, name: str = None) -> EmbeddingSet:
        return EmbeddingSet(
            name=name or f"meta-{self.provenance}",
            vocab=self.vocab,
            vectors=self.vectors.astype(np.float32),
        )


@dataclass(frozen=True, eq=False)
class EigenPairs:
    """Ascending eigenvalues with orthonormal eigenvectors as columns."""
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __iter__(self) -> Iterator[Tuple[float, np.ndarray]]:
        for j in range(len(self)):
            yield float(self.values[j]), self.vectors[:, j]


def combine_weights(W: SparseWeights, graph: NeighbourhoodGraph, row_normalize: bool = True) -> CombinedWeights:
    """
    Merge per-source reconstruction by multiplicity.

    Args:
        W: Finalised weights (rows sum to 1)
        graph: Graph the weights were fitted on
        row_normalize: Rescale each row of W' to sum 1 (keeps M's null space)

    Returns:
        CombinedWeights
    """
    if not W.finalized:
        raise ValueError("combine_weights needs finalised weights")
    if W.n_words != graph.n_words:
        raise DimensionMismatchError(f"weights cover {W.n_words} words, graph {graph.n_words}")

    data = np.empty_like(W.data)
    for v in range(graph.n_words):
        ids, w = W.row(v)
        g_ids, counts = graph.multiplicity(v)
        if not np.array_equal(ids, g_ids):
            raise ValueError(f"weights support for {graph.vocab.words[v]!r} does not match the graph")
        row = w * counts
        if row_normalize and len(row):
            total = row.sum()
            if total == 0.0:
                raise DegenerateRowError(f"combined weights of {graph.vocab.words[v]!r} sum to zero")
            row = row / total
        data[W.indptr[v]:W.indptr[v + 1]] = row

    n = graph.n_words
    matrix = sp.csr_matrix((data, W.indices.copy(), W.indptr.copy()), shape=(n, n))
    return CombinedWeights(vocab=graph.vocab, matrix=matrix, row_normalized=row_normalize)


def apply_m(Wp: CombinedWeights, x: np.ndarray) -> np.ndarray:
    """
    (I - W')^T ((I - W') x) via two sparse passes. ``x`` may be a vector or
    an n x m block.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != Wp.n:
        raise DimensionMismatchError(f"operand has {x.shape[0]} rows, operator is {Wp.n} x {Wp.n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("apply_m operand contains non-finite values")
    y = x - Wp.matrix @ x
    return y - Wp.matrix_t @ y


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    if vectors.size == 0:
        return vectors
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _residuals(Wp: CombinedWeights, values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return np.linalg.norm(apply_m(Wp, vectors) - vectors * values, axis=0)


def _dense_pairs(Wp: CombinedWeights, count: int) -> Tuple[np.ndarray, np.ndarray]:
    M = apply_m(Wp, np.eye(Wp.n))
    M = 0.5 * (M + M.T)
    return scipy.linalg.eigh(M, subset_by_index=[0, count - 1])


def _iterative_pairs(Wp: CombinedWeights, count: int, config: EigenConfig) -> Tuple[np.ndarray, np.ndarray]:
    n = Wp.n
    op = LinearOperator(
        (n, n),
        matvec=lambda x: apply_m(Wp, x),
        matmat=lambda X: apply_m(Wp, X),
        rmatvec=lambda x: apply_m(Wp, x),
        dtype=np.float64,
    )
    ncv = min(n, max(2 * count + 1, count + 32))
    per_cycle = max(1, config.ops_factor * count // max(ncv - count, 1))
    v0 = np.random.default_rng(_START_SEED).uniform(-1.0, 1.0, n)
    try:
        values, vectors = eigsh(
            op, k=count, which="SA", tol=config.tol * 1e-2, ncv=ncv,
            maxiter=per_cycle * config.max_restarts, v0=v0,
        )
    except ArpackNoConvergence as e:
        partial = _residuals(Wp, e.eigenvalues, e.eigenvectors) if len(e.eigenvalues) else np.empty(0)
        raise EigenNonConvergenceError(
            f"ARPACK converged {len(e.eigenvalues)} of {count} eigenpairs; residuals {partial.tolist()}",
            partial,
        )

    # Rayleigh-Ritz on the returned basis restores exact orthonormality
    Q, _ = np.linalg.qr(vectors)
    H = Q.T @ apply_m(Wp, Q)
    theta, S = scipy.linalg.eigh(0.5 * (H + H.T))
    return theta, Q @ S


def smallest_eigenpairs(
    Wp: CombinedWeights,
    count: int,
    tol: float = DEFAULT_EIGEN_TOL,
    config: EigenConfig = None,
) -> EigenPairs:
    """
    The ``count`` smallest eigenpairs of M, ascending.

    Every pair satisfies ||Mx - lambda x|| <= tol * max(1, lambda); vectors are
    orthonormal and sign-fixed (largest-magnitude entry positive).

    Raises:
        EigenNonConvergenceError: Residual contract not met within the budget
    """
    config = config or EigenConfig(tol=tol)
    n = Wp.n
    if not 1 <= count < n:
        raise ValueError(f"need 1 <= count < n, got count={count}, n={n}")

    if n <= config.dense_threshold:
        values, vectors = _dense_pairs(Wp, count)
        route = "dense"
    else:
        values, vectors = _iterative_pairs(Wp, count, config)
        route = "iterative"

    vectors = _fix_signs(vectors)
    residuals = _residuals(Wp, values, vectors)
    limit = tol * np.maximum(1.0, values)
    if np.any(residuals > limit):
        raise EigenNonConvergenceError(
            f"eigen residuals above tolerance ({route}): max {residuals.max():.3e}", residuals
        )
    logger.info(
        f"[Project] {count} eigenpairs via {route} solve, lambda range "
        f"[{values[0]:.3e}, {values[-1]:.3e}], max residual {residuals.max():.2e}"
    )
    return EigenPairs(values=np.asarray(values), vectors=vectors, residuals=residuals)


def _pin_constant(values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Within the numerical null space, make the first column the constant vector."""
    null = int(np.count_nonzero(values < _NULL_TOL))
    if null == 0:
        return vectors
    n = vectors.shape[0]
    e = np.full(n, 1.0 / np.sqrt(n))
    block = vectors[:, :null]
    rest = block - np.outer(e, e @ block)
    pinned = [e[:, None]]
    if null > 1:
        U, _, _ = np.linalg.svd(rest, full_matrices=False)
        pinned.append(U[:, :null - 1])
    out = vectors.copy()
    out[:, :null] = _fix_signs(np.hstack(pinned))
    return out


def project(
    Wp: CombinedWeights,
    dim: int = DEFAULT_DIM,
    tol: float = DEFAULT_EIGEN_TOL,
    config: EigenConfig = None,
) -> MetaEmbedding:
    """
    Meta-embedding from the bottom dim + 1 eigenvectors of M, dropping the lowest.

    Args:
        Wp: Combined weights
        dim: d_P
        tol: Eigen residual tolerance
        config: Eigensolver settings

    Returns:
        MetaEmbedding with provenance "lle"; row v is v's meta vector
    """
    if dim < 1 or dim + 1 > Wp.n:
        raise ValueError(f"need 1 <= dim and dim + 1 <= n, got dim={dim}, n={Wp.n}")
    pairs = smallest_eigenpairs(Wp, dim + 1, tol=tol, config=config)
    vectors = pairs.vectors
    if Wp.row_normalized:
        vectors = _pin_constant(pairs.values, vectors)

    retained = vectors[:, 1:]
    if Wp.row_normalized:
        drift = np.abs(retained.sum(axis=0)).max() / np.sqrt(Wp.n)
        if drift > 1e-6:
            logger.warning(f"[Project] retained columns not orthogonal to the constant vector (max {drift:.2e})")

    return MetaEmbedding(
        vocab=Wp.vocab,
        vectors=retained,
        provenance="lle",
        eigenvalues=pairs.values[1:].copy(),
        metadata={
            "discarded_eigenvalue": float(pairs.values[0]),
            "row_normalized": Wp.row_normalized,
        },
    )


def projection_cost(P: MetaEmbedding, Wp: CombinedWeights) -> float:
    """Psi(P) = sum_v || v_P - sum_u w'_vu u_P ||^2."""
    if P.vocab.words != Wp.vocab.words:
        raise DimensionMismatchError("meta-embedding and weights are over different vocabularies")
    R = P.vectors - Wp.matrix @ P.vectors
    return float(np.sum(R * R))


def save_meta(meta: MetaEmbedding, path, format: str = "glove-text", name: str = None) -> None:
    """Write a meta-embedding in any embio format (vectors cast to float32)."""
    save_embeddings(meta.to_embedding_set(name), path, format)
