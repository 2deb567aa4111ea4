"""
Tests for the CONC and SVD baselines.
"""

import numpy as np
import pytest

from meta_embedding.baselines import (
    ConcConfig,
    EmptyIntersectionError,
    concat,
    conc_reconstruction_error,
    svd_meta,
    truncated_svd,
)
from meta_embedding.neighbours import common_neighbourhoods
from meta_embedding.recon import fit_weights_exact, reconstruction_error


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestConcConfig:
    """Test per-source scaling rules"""

    def test_scale_precedence(self):
        """Test explicit scale, then emphasis, then 1.0"""
        config = ConcConfig(scales={"glove": 2.0}, emphasised=("glove", "hlbl"), emphasis=8.0)
        assert config.scale_for("glove") == 2.0
        assert config.scale_for("hlbl") == 8.0
        assert config.scale_for("cw") == 1.0

    @pytest.mark.parametrize("kwargs", [
        {"vocab_policy": "everything"},
        {"emphasis": 0.0},
        {"scales": {"glove": -1.0}},
    ])
    def test_invalid(self, kwargs):
        """Test unknown policy and non-positive factors are rejected"""
        with pytest.raises(ValueError):
            ConcConfig(**kwargs)


class TestConcat:
    """Test CONC"""

    def test_dimension_is_sum(self, random_sources):
        """Test d = d_1 + d_2 + d_3 and unit blocks"""
        sets = random_sources(25, (3, 5, 7), seed=0)
        meta = concat(sets)

        assert meta.dim == 15
        assert meta.provenance == "conc"
        assert len(meta) == 25
        np.testing.assert_allclose(np.linalg.norm(meta.vectors[:, :3], axis=1), 1.0, rtol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(meta.vectors, axis=1), np.sqrt(3.0), rtol=1e-6)

    def test_cosine_is_mean_of_source_cosines(self, make_set):
        """Test cos(CONC u, CONC v) averages the per-source cosines"""
        rng = np.random.default_rng(1)
        words = ["u", "v", "x"]
        s1 = make_set("s1", words, rng.standard_normal((3, 4)))
        s2 = make_set("s2", words, rng.standard_normal((3, 6)))
        meta = concat([s1, s2])

        expected = 0.5 * (cosine(s1.vector("u"), s1.vector("v")) + cosine(s2.vector("u"), s2.vector("v")))
        assert cosine(meta.vectors[0], meta.vectors[1]) == pytest.approx(expected, rel=1e-5)

    def test_emphasis_scales_block(self, make_set):
        """Test an emphasised source is multiplied by 8"""
        s1 = make_set("s1", ["a", "b"], [[3.0, 4.0], [1.0, 0.0]])
        s2 = make_set("s2", ["a", "b"], [[0.0, 2.0], [0.0, 1.0]])
        meta = concat([s1, s2], ConcConfig(emphasised=("s2",)))

        np.testing.assert_allclose(meta.vectors[0], [0.6, 0.8, 0.0, 8.0], rtol=1e-6)
        assert meta.metadata["scales"] == {"s1": 1.0, "s2": 8.0}

    def test_intersection_policy(self, make_set):
        """Test only shared words survive, in first-appearance order"""
        s1 = make_set("s1", ["a", "b", "c"], np.eye(3))
        s2 = make_set("s2", ["c", "d", "a"], np.eye(3))
        meta = concat([s1, s2])
        assert meta.vocab.words == ("a", "c")

    def test_union_zero_fill(self, make_set):
        """Test missing blocks are zero under union-zero-fill"""
        s1 = make_set("s1", ["a", "b"], [[1.0, 0.0], [0.0, 1.0]])
        s2 = make_set("s2", ["b", "c"], [[1.0], [2.0]])
        meta = concat([s1, s2], ConcConfig(vocab_policy="union-zero-fill"))

        assert meta.vocab.words == ("a", "b", "c")
        np.testing.assert_allclose(meta.vectors, [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]])

    def test_empty_intersection(self, make_set):
        """Test disjoint vocabularies under the intersection policy"""
        s1 = make_set("s1", ["a"], [[1.0]])
        s2 = make_set("s2", ["b"], [[1.0]])
        with pytest.raises(EmptyIntersectionError):
            concat([s1, s2])

    def test_needs_two_sources(self, random_sources):
        """Test a single source is refused"""
        with pytest.raises(ValueError):
            concat(random_sources(5, (3,)))


class TestTruncatedSVD:
    """Test the factorisation"""

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_numpy(self, seed):
        """Test singular values and vectors against np.linalg.svd"""
        rng = np.random.default_rng(seed)
        C = rng.standard_normal((60, 12))
        U, s, Vt = truncated_svd(C, 5)
        U_ref, s_ref, _ = np.linalg.svd(C, full_matrices=False)

        np.testing.assert_allclose(s, s_ref[:5], rtol=1e-10)
        for j in range(5):
            assert abs(U[:, j] @ U_ref[:, j]) == pytest.approx(1.0, abs=1e-8)

    def test_full_rank_reconstruction(self):
        """Test d = D reproduces C"""
        C = np.random.default_rng(4).standard_normal((30, 8))
        U, s, Vt = truncated_svd(C, 8)
        np.testing.assert_allclose(U @ np.diag(s) @ Vt, C, atol=1e-10)

    def test_orthonormal_and_signed(self):
        """Test U^T U = I, descending s, largest entry of each column positive"""
        C = np.random.default_rng(5).standard_normal((40, 10))
        U, s, _ = truncated_svd(C, 6)

        np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-12)
        assert np.all(np.diff(s) <= 0)
        for j in range(6):
            assert U[np.argmax(np.abs(U[:, j])), j] > 0

    def test_bounds(self):
        """Test d outside [1, min(n, D)]"""
        C = np.ones((5, 3))
        with pytest.raises(ValueError):
            truncated_svd(C, 0)
        with pytest.raises(ValueError):
            truncated_svd(C, 4)


class TestSvdMeta:
    """Test the SVD baseline"""

    def test_union_vocabulary_and_shape(self, random_sources):
        """Test n x d over the union, orthonormal columns"""
        sets = random_sources(50, (6, 9), seed=2, coverage=0.7)
        meta = svd_meta(sets, d=5)

        assert meta.provenance == "svd"
        assert meta.vectors.shape == (50, 5)
        np.testing.assert_allclose(meta.vectors.T @ meta.vectors, np.eye(5), atol=1e-10)
        assert meta.metadata["below_tolerance"] == []

    def test_weighted(self, random_sources):
        """Test U D has column norms equal to the singular values"""
        sets = random_sources(40, (4, 4), seed=3)
        meta = svd_meta(sets, d=3, weight_by_singular_values=True)
        np.testing.assert_allclose(np.linalg.norm(meta.vectors, axis=0), meta.metadata["singular_values"],
                                   rtol=1e-10)

    def test_rank_deficient_columns_zeroed(self, make_set):
        """Test duplicated sources leave half the spectrum at zero"""
        X = np.random.default_rng(6).standard_normal((200, 3))
        words = [f"w{i}" for i in range(200)]
        meta = svd_meta([make_set("s1", words, X), make_set("s2", words, X)], d=6)

        assert meta.metadata["below_tolerance"] == [3, 4, 5]
        assert np.all(meta.vectors[:, 3:] == 0.0)
        assert np.all(np.linalg.norm(meta.vectors[:, :3], axis=0) > 0.99)

    def test_scaling_flag(self, random_sources):
        """Test scaled=False ignores CONC emphasis"""
        sets = random_sources(30, (4, 4), seed=4)
        config = ConcConfig(emphasised=("s2",))
        assert svd_meta(sets, d=2, config=config).metadata["scales"] == {"s1": 1.0, "s2": 8.0}
        assert svd_meta(sets, d=2, config=config, scaled=False).metadata["scales"] == {"s1": 1.0, "s2": 1.0}

    def test_d_too_large(self, random_sources):
        """Test d above sum(d_i) is refused"""
        with pytest.raises(ValueError):
            svd_meta(random_sources(30, (3, 4), seed=0), d=8)


class TestConcReconstruction:
    """Test the concatenated-space objective"""

    def test_equals_phi_on_common_neighbourhoods(self, make_set, graph_for):
        """Test the CONC error equals Phi when every source shares N(v)"""
        rng = np.random.default_rng(7)
        words = [f"w{i}" for i in range(60)]
        X = rng.standard_normal((60, 4))
        s1 = make_set("s1", words, X)
        Q, _ = np.linalg.qr(rng.standard_normal((6, 4)))
        s2 = make_set("s2", words, X @ Q.T + 0.01 * rng.standard_normal((60, 6)))
        graph = common_neighbourhoods(graph_for([s1, s2], k=10))
        W = fit_weights_exact([s1, s2], graph)

        assert conc_reconstruction_error(W, [s1, s2], graph) == pytest.approx(
            reconstruction_error(W, [s1, s2], graph), rel=1e-10
        )
