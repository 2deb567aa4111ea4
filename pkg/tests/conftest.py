"""
Pytest configuration for meta-embedding tests.

This file ensures that the src directory is in the Python path so that
tests can import from meta_embedding, and provides small factories for
embedding sets and neighbourhood graphs.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src directory to Python path
src_path = Path(__file__).parent.parent / "src"
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))

from meta_embedding.embio import EmbeddingSet, Vocabulary, l2_normalize, union_vocab  # noqa: E402
from meta_embedding.neighbours import build_graph  # noqa: E402


@pytest.fixture
def make_set():
    """EmbeddingSet from a name, a word list and a matrix."""
    def factory(name, words, vectors, unit=False):
        return EmbeddingSet(
            name=name,
            vocab=Vocabulary.from_words(words),
            vectors=np.asarray(vectors, dtype=np.float32),
            unit_normalized=unit,
        )
    return factory


@pytest.fixture
def random_sources(make_set):
    """
    Random unit-normalised sources over words w0..w{n-1}.

    ``coverage`` drops words per source (the union still covers every word).
    """
    def factory(n, dims, seed=0, coverage=1.0):
        rng = np.random.default_rng(seed)
        words = [f"w{i}" for i in range(n)]
        sets = []
        for s, dim in enumerate(dims):
            keep = np.arange(n)
            if coverage < 1.0:
                keep = np.sort(rng.choice(n, size=int(coverage * n), replace=False))
                if s == 0:
                    keep = np.arange(n)
            X = rng.standard_normal((len(keep), dim))
            sets.append(l2_normalize(make_set(f"s{s + 1}", [words[i] for i in keep], X)))
        return sets
    return factory


@pytest.fixture
def graph_for():
    """Union vocabulary plus neighbourhood graph over the given sets."""
    def factory(sets, k, include_self=False, leaf_size=8, workers=1):
        vocab, membership = union_vocab(sets)
        return build_graph(sets, vocab, membership, k=k, include_self=include_self,
                           leaf_size=leaf_size, workers=workers)
    return factory


@pytest.fixture
def experiment(tmp_path):
    """
    A small on-disk experiment: three synthetic sources, a similarity set
    scored by latent cosine, and an exp.env pointing at them.
    """
    from meta_embedding.embio import save_embeddings
    from meta_embedding.evalsuite.synthetic import make_synthetic

    latent, sources = make_synthetic(120, 3, [(5, 0.05, 0.9), (6, 0.05, 0.9), (4, 0.05, 0.9)], seed=0)
    lines = []
    for i, emb in enumerate(sources, start=1):
        save_embeddings(emb, tmp_path / f"src{i}.txt", "glove-text")
        lines += [f"SOURCE_{i}_NAME=src{i}", f"SOURCE_{i}_PATH=src{i}.txt"]

    Z = latent.vectors.astype(np.float64)
    Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(40):
        i, j = rng.choice(len(Z), size=2, replace=False)
        pairs.append(f"{latent.vocab.words[i]} {latent.vocab.words[j]} {10 * (Z[i] @ Z[j]):.4f}")
    (tmp_path / "sim.txt").write_text("\n".join(pairs) + "\n", encoding="utf-8")

    lines += [
        "EVAL_1_TASK=similarity",
        "EVAL_1_PATH=sim.txt",
        "EVAL_1_NAME=synsim",
        "K=10",
        "DIM=3",
        "SOLVER=exact",
        "OUTPUT_DIR=out",
        "CACHE_DIR=cache",
    ]
    path = tmp_path / "exp.env"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
