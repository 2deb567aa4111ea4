"""
Synthetic multi-source fixtures with a known latent embedding.

Each source is a noisy linear view of a shared latent table:
source_i = Z A_i + noise, where A_i has orthonormal rows (so latent inner
products survive the map) and every source keeps only a random subset of
the words.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from ..embio import EmbeddingSet, Vocabulary

logger = logging.getLogger(__name__)

_LATENT_STREAM = 0x4C54
_SOURCE_STREAM = 0x5352


@dataclass(frozen=True)
class SourceSpec:
    dim: int
    noise: float = 0.0
    coverage: float = 1.0
    name: str = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError(f"coverage must be in (0, 1], got {self.coverage}")


def word_list(n: int) -> Tuple[str, ...]:
    width = max(len(str(n - 1)), 1)
    return tuple(f"w{i:0{width}d}" for i in range(n))


def orthonormal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with orthonormal rows (rows <= cols)."""
    Q, R = np.linalg.qr(rng.standard_normal((cols, rows)))
    Q = Q * np.sign(np.diag(R))
    return Q.T


def make_synthetic(
    n: int,
    latent_dim: int,
    sources: Sequence[Union[SourceSpec, Tuple[int, float, float]]],
    seed: int = 0,
) -> Tuple[EmbeddingSet, List[EmbeddingSet]]:
    """
    Generate a latent table and noisy partial views of it.

    Args:
        n: Number of words
        latent_dim: Latent dimensionality (each source dim must be >= this)
        sources: SourceSpec or (dim, noise sigma, coverage fraction) per source
        seed: Root seed; the output is a function of it only

    Returns:
        (latent EmbeddingSet, source EmbeddingSets named src1, src2, ...)
    """
    specs = [s if isinstance(s, SourceSpec) else SourceSpec(*s) for s in sources]
    if not specs:
        raise ValueError("need at least one source spec")
    for spec in specs:
        if spec.dim < latent_dim:
            raise ValueError(f"source dim {spec.dim} is below latent_dim {latent_dim}")

    words = word_list(n)
    Z = np.random.default_rng([seed, _LATENT_STREAM]).standard_normal((n, latent_dim))

    keep: List[np.ndarray] = []
    for i, spec in enumerate(specs):
        rng = np.random.default_rng([seed, _SOURCE_STREAM, i, 0])
        size = max(1, int(round(spec.coverage * n)))
        keep.append(np.sort(rng.choice(n, size=size, replace=False)))

    covered = np.zeros(n, dtype=bool)
    for ids in keep:
        covered[ids] = True
    orphans = np.nonzero(~covered)[0]
    if len(orphans):
        owner = np.random.default_rng([seed, _SOURCE_STREAM, len(specs)]).integers(0, len(specs), len(orphans))
        for i in range(len(specs)):
            keep[i] = np.union1d(keep[i], orphans[owner == i])

    out: List[EmbeddingSet] = []
    for i, spec in enumerate(specs):
        rng = np.random.default_rng([seed, _SOURCE_STREAM, i, 1])
        A = orthonormal_rows(rng, latent_dim, spec.dim)
        X = Z[keep[i]] @ A
        if spec.noise > 0:
            X = X + rng.normal(0.0, spec.noise, X.shape)
        name = spec.name or f"src{i + 1}"
        out.append(EmbeddingSet(
            name=name,
            vocab=Vocabulary.from_words([words[v] for v in keep[i]]),
            vectors=X.astype(np.float32),
        ))
        logger.debug(f"[Synthetic] {name}: {len(keep[i])} words, dim {spec.dim}, sigma {spec.noise}")

    latent = EmbeddingSet(name="latent", vocab=Vocabulary.from_words(words), vectors=Z.astype(np.float32))
    return latent, out
