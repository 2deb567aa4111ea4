"""
Baseline meta-embeddings.

CONC concatenates the l2-normalised sources, each block multiplied by a
per-source scale. SVD takes the top-d left singular vectors of the
zero-filled CONC matrix over the union vocabulary.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .core.config import DEFAULT_CONC_EMPHASIS, DEFAULT_SVD_DIM
from .embio import EmbeddingSet, Vocabulary, l2_normalize, union_vocab
from .neighbours import NeighbourhoodGraph
from .project import MetaEmbedding
from .recon import SparseWeights

logger = logging.getLogger(__name__)

VOCAB_POLICIES = ("intersection", "union-zero-fill")

GRAM_LIMIT = 2000


class EmptyIntersectionError(ValueError):
    pass


@dataclass(frozen=True)
class ConcConfig:
    """
    Per-source scaling for CONC (and the SVD input).

    ``scales`` sets factors explicitly by source name; sources listed in
    ``emphasised`` otherwise get ``emphasis``; everything else gets 1.0.
    """
    scales: Mapping[str, float] = field(default_factory=dict)
    emphasised: Tuple[str, ...] = ()
    emphasis: float = DEFAULT_CONC_EMPHASIS
    vocab_policy: str = "intersection"

    def __post_init__(self):
        if self.vocab_policy not in VOCAB_POLICIES:
            raise ValueError(f"vocab_policy must be one of {VOCAB_POLICIES}, got '{self.vocab_policy}'")
        if self.emphasis <= 0:
            raise ValueError(f"emphasis must be positive, got {self.emphasis}")
        for name, scale in self.scales.items():
            if scale <= 0:
                raise ValueError(f"scale for '{name}' must be positive, got {scale}")

    def scale_for(self, name: str) -> float:
        if name in self.scales:
            return float(self.scales[name])
        return float(self.emphasis) if name in self.emphasised else 1.0


def _concat_matrix(
    sets: Sequence[EmbeddingSet],
    config: ConcConfig,
    policy: str,
    scaled: bool = True,
) -> Tuple[Vocabulary, np.ndarray, Dict[str, float]]:
    units = [l2_normalize(e) for e in sets]
    vocab, membership = union_vocab(units)
    ids = np.arange(len(vocab))
    if policy == "intersection":
        ids = np.nonzero(np.all(membership.masks, axis=0))[0]
        if len(ids) == 0:
            raise EmptyIntersectionError("no word is covered by every source")
        vocab = Vocabulary.from_words([vocab.words[i] for i in ids])

    scales = {e.name: (config.scale_for(e.name) if scaled else 1.0) for e in units}
    blocks = []
    for s, emb in enumerate(units):
        rows = membership.rows[s, ids]
        present = rows >= 0
        block = np.zeros((len(ids), emb.dim), dtype=np.float64)
        block[present] = scales[emb.name] * emb.vectors[rows[present]].astype(np.float64)
        blocks.append(block)
    return vocab, np.hstack(blocks), scales


def concat(sets: Sequence[EmbeddingSet], config: ConcConfig = None) -> MetaEmbedding:
    """
    CONC meta-embedding.

    Args:
        sets: Two or more source sets (normalised here)
        config: Scales and vocabulary policy

    Returns:
        MetaEmbedding of dimensionality sum(d_i), provenance "conc"

    Raises:
        EmptyIntersectionError: intersection policy and no word in every source
    """
    config = config or ConcConfig()
    if len(sets) < 2:
        raise ValueError(f"concat needs at least 2 sources, got {len(sets)}")
    vocab, C, scales = _concat_matrix(sets, config, config.vocab_policy)
    logger.info(f"[Baselines] CONC: {len(vocab)} words x {C.shape[1]} dims ({config.vocab_policy})")
    return MetaEmbedding(
        vocab=vocab,
        vectors=C,
        provenance="conc",
        metadata={"scales": scales, "vocab_policy": config.vocab_policy},
    )


def _sign_fix(U: np.ndarray, Vt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def truncated_svd(C, d: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rank-d truncated SVD of an n x D matrix, singular values descending.

    When D <= 2000 the right singular basis comes from the D x D Gram matrix
    and a thin SVD of C V gives U exactly orthonormal. Larger D goes through
    ARPACK ``svds``.

    Returns:
        (U n x d, s length d, Vt d x D)
    """
    n, D = C.shape
    if not 1 <= d <= min(n, D):
        raise ValueError(f"need 1 <= d <= min(n, D) = {min(n, D)}, got {d}")

    if D <= GRAM_LIMIT:
        dense = C.toarray() if sp.issparse(C) else np.asarray(C, dtype=np.float64)
        G = dense.T @ dense
        _, V = scipy.linalg.eigh(0.5 * (G + G.T), subset_by_index=[D - d, D - 1])
        V = V[:, ::-1]
        U, s, Rt = np.linalg.svd(dense @ V, full_matrices=False)
        Vt = Rt @ V.T
    else:
        if d >= min(n, D):
            raise ValueError(f"sparse route needs d < min(n, D), got {d}")
        U, s, Vt = svds(sp.csr_matrix(C) if not sp.issparse(C) else C, k=d, v0=np.ones(min(n, D)))
        order = np.argsort(-s, kind="stable")
        U, s, Vt = U[:, order], s[order], Vt[order]

    U, Vt = _sign_fix(U, Vt)
    return U, s, Vt


def svd_meta(
    sets: Sequence[EmbeddingSet],
    d: int = DEFAULT_SVD_DIM,
    config: ConcConfig = None,
    scaled: bool = True,
    weight_by_singular_values: bool = False,
) -> MetaEmbedding:
    """
    SVD meta-embedding over the union vocabulary (missing words zero-filled).

    Args:
        sets: Source sets
        d: Output dimensionality, at most sum(d_i)
        config: CONC scales applied to the input when ``scaled``
        scaled: Apply CONC scaling before factorising
        weight_by_singular_values: Return U D instead of U

    Returns:
        MetaEmbedding with provenance "svd". Columns whose singular value is
        below tolerance are zeroed and listed in metadata["below_tolerance"].
    """
    config = config or ConcConfig()
    vocab, C, scales = _concat_matrix(sets, config, "union-zero-fill", scaled=scaled)
    if d > C.shape[1]:
        raise ValueError(f"d={d} exceeds the concatenated dimensionality {C.shape[1]}")
    if d > C.shape[0]:
        raise ValueError(f"d={d} exceeds the vocabulary size {C.shape[0]}")

    U, s, _ = truncated_svd(C, d)
    tol = max(C.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    below: List[int] = [int(j) for j in np.nonzero(s <= tol)[0]]
    if below:
        logger.warning(
            f"[Baselines] SVD: {len(below)} of {d} singular values below tolerance {tol:.2e}, "
            f"columns {below[0]}..{below[-1]} zeroed"
        )
        U = U.copy()
        U[:, below] = 0.0
    vectors = U * s if weight_by_singular_values else U
    logger.info(f"[Baselines] SVD: {len(vocab)} words, d={d}, s[0]={s[0]:.4f}")
    return MetaEmbedding(
        vocab=vocab,
        vectors=vectors,
        provenance="svd",
        metadata={
            "singular_values": s.tolist(),
            "below_tolerance": below,
            "scales": scales,
            "weighted": weight_by_singular_values,
        },
    )


def conc_reconstruction_error(
    W: SparseWeights,
    sets: Sequence[EmbeddingSet],
    graph: NeighbourhoodGraph,
) -> float:
    """
    Reconstruction error measured in the concatenated space.

    For each word v the CONC vector of v is reconstructed from the CONC vectors
    of its union neighbours, keeping only the blocks of sources that cover v.
    With one shared neighbourhood per word this equals Phi for the same W.
    """
    if tuple(e.name for e in sets) != graph.names:
        raise ValueError("sets do not match the sources the graph was built from")
    rows = graph.membership.rows
    offsets = np.cumsum([0] + [e.dim for e in sets])
    C = np.zeros((graph.n_words, int(offsets[-1])), dtype=np.float64)
    for s, emb in enumerate(sets):
        covered = rows[s] >= 0
        C[covered, offsets[s]:offsets[s + 1]] = emb.vectors[rows[s, covered]]

    total = 0.0
    for v in range(graph.n_words):
        ids, w = W.row(v)
        cols = np.concatenate(
            [np.arange(offsets[s], offsets[s + 1]) for s in graph.sources_covering(v)]
        ).astype(np.int64)
        r = C[v, cols] - w @ C[np.ix_(ids, cols)]
        total += float(r @ r)
    return total
