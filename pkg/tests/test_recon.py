"""
Reconstruction weight tests.

Objective and gradient against independent recomputation, both solvers,
and the weights file format.
"""

import logging

import numpy as np
import pytest

from meta_embedding.neighbours import common_neighbourhoods
from meta_embedding.recon import (
    EmptyNeighbourhoodError,
    NonFiniteObjectiveError,
    NotInNeighbourhoodError,
    SolverConfig,
    SparseWeights,
    WeightsFormatError,
    dump_weights_text,
    error_gradient,
    fit_weights_exact,
    fit_weights_sgd,
    load_weights,
    reconstruction_error,
    save_weights,
)


def support_of(graph):
    return [graph.union_neighbours(v) for v in range(graph.n_words)]


def random_weights(graph, seed=0, normalise=False):
    rng = np.random.default_rng(seed)
    rows = []
    for ids in support_of(graph):
        w = rng.standard_normal(len(ids))
        if normalise and len(ids):
            w = w / w.sum()
        rows.append((ids, w))
    return SparseWeights.from_rows(rows, finalized=normalise)


def dense_phi(W, sets, graph):
    """Phi straight from its definition, looping over sources and neighbours."""
    total = 0.0
    rows = graph.membership.rows
    for s, emb in enumerate(sets):
        X = emb.vectors.astype(np.float64)
        for v in range(graph.n_words):
            if rows[s, v] < 0:
                continue
            recon = np.zeros(emb.dim)
            for u in graph.source_neighbours(s, v):
                recon += W.weight(v, u) * X[rows[s, u]]
            r = X[rows[s, v]] - recon
            total += r @ r
    return total


def phi_of_row(v, w, sets, graph):
    """Phi restricted to word v, for a candidate row w over its union neighbours."""
    weights = dict(zip(graph.union_neighbours(v).tolist(), w))
    total = 0.0
    rows = graph.membership.rows
    for s, emb in enumerate(sets):
        if rows[s, v] < 0:
            continue
        X = emb.vectors.astype(np.float64)
        r = X[rows[s, v]].copy()
        for u in graph.source_neighbours(s, v).tolist():
            r -= weights[u] * X[rows[s, u]]
        total += r @ r
    return total


class TestSolverConfig:
    """Test solver settings"""

    def test_defaults(self):
        """Test learning rate 0.01, 100 iterations, AdaGrad epsilon 1e-8"""
        config = SolverConfig()
        assert config.learning_rate == 0.01
        assert config.max_iters == 100
        assert config.adagrad_epsilon == 1e-8
        assert config.projected is False

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"max_iters": 0}, {"adagrad_epsilon": -1.0}])
    def test_invalid(self, kwargs):
        """Test invalid settings are rejected"""
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestSparseWeights:
    """Test the row-compressed container"""

    def test_rows_and_sums(self):
        """Test row access, lookups and row sums"""
        W = SparseWeights.from_rows([
            (np.array([1, 2]), np.array([0.25, 0.75])),
            (np.array([], dtype=np.int64), np.array([])),
            (np.array([0]), np.array([1.0])),
        ])
        assert W.n_words == 3
        assert W.nnz == 3
        np.testing.assert_allclose(W.row_sums(), [1.0, 0.0, 1.0])
        assert W.weight(0, 2) == 0.75
        assert W.weight(0, 0) == 0.0
        assert W.to_csr().toarray()[2, 0] == 1.0

    def test_with_data_checks_shape(self):
        """Test replacement data must match the pattern"""
        W = SparseWeights.from_rows([(np.array([1]), np.array([1.0])), (np.array([0]), np.array([1.0]))])
        with pytest.raises(ValueError):
            W.with_data(np.ones(3))


class TestObjective:
    """Test Phi"""

    def test_exact_single_neighbour(self, make_set, graph_for):
        """Test u identical to v with w_vu = 1 contributes 0"""
        emb = make_set("s", ["v", "u"], [[1.0, 0.0], [1.0, 0.0]])
        graph = graph_for([emb], k=1)
        W = SparseWeights.from_rows([(np.array([1]), np.array([1.0])), (np.array([0]), np.array([1.0]))])
        assert reconstruction_error(W, [emb], graph) == 0.0

    def test_zero_weights(self, random_sources, graph_for):
        """Test W = 0 gives the sum of squared norms over covered words"""
        sets = random_sources(20, (4, 6), seed=1, coverage=0.8)
        graph = graph_for(sets, k=3)
        W = random_weights(graph).with_data(np.zeros(random_weights(graph).nnz))

        expected = sum(float((e.vectors.astype(np.float64) ** 2).sum()) for e in sets)
        assert reconstruction_error(W, sets, graph) == pytest.approx(expected, rel=1e-12)

    def test_matches_dense_recomputation(self, random_sources, graph_for):
        """Test Phi against a direct loop over sources and neighbours"""
        sets = random_sources(20, (4, 6), seed=2, coverage=0.7)
        graph = graph_for(sets, k=4)
        W = random_weights(graph, seed=5)
        assert reconstruction_error(W, sets, graph) == pytest.approx(dense_phi(W, sets, graph), rel=1e-10)

    def test_source_scaling(self, make_set, graph_for):
        """Test scaling a source by c scales Phi by c^2"""
        rng = np.random.default_rng(3)
        words = [f"w{i}" for i in range(15)]
        X = rng.standard_normal((15, 5))
        base = make_set("s", words, X)
        scaled = make_set("s", words, 3.0 * X)
        graph = graph_for([base], k=4)
        W = random_weights(graph, seed=1)

        assert reconstruction_error(W, [scaled], graph) == pytest.approx(
            9.0 * reconstruction_error(W, [base], graph), rel=1e-5
        )


class TestGradient:
    """Test the analytic gradient"""

    def test_zero_at_perfect_reconstruction(self, make_set, graph_for):
        """Test the gradient vanishes when residuals are zero"""
        s1 = make_set("s1", ["v", "u"], [[0.6, 0.8], [0.6, 0.8]])
        s2 = make_set("s2", ["v", "u"], [[1.0, 0.0], [1.0, 0.0]])
        graph = graph_for([s1, s2], k=1)
        W = SparseWeights.from_rows([(np.array([1]), np.array([1.0])), (np.array([0]), np.array([1.0]))])
        assert error_gradient(W, [s1, s2], graph, 0, 1) == pytest.approx(0.0, abs=1e-12)

    def test_single_source_term(self, make_set, graph_for):
        """Test u in N_1(v) only picks up the first source's term"""
        s1 = make_set("s1", ["v", "a", "b"], [[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
        s2 = make_set("s2", ["v", "a", "b"], [[0.0, 0.0], [5.0, 0.0], [1.0, 0.0]])
        graph = graph_for([s1, s2], k=1)
        assert graph.source_neighbours(0, 0).tolist() == [1]
        assert graph.source_neighbours(1, 0).tolist() == [2]

        W = SparseWeights.from_rows([
            (np.array([1, 2]), np.array([0.5, 0.5])),
            (graph.union_neighbours(1), np.ones(len(graph.union_neighbours(1)))),
            (graph.union_neighbours(2), np.ones(len(graph.union_neighbours(2)))),
        ], finalized=False)
        # r_1 = v_1 - 0.5 a_1 = (-0.5, 0); dPhi/dw_va = -2 r_1 . a_1 = 1
        assert error_gradient(W, [s1, s2], graph, 0, 1) == pytest.approx(1.0)

    def test_not_a_neighbour(self, random_sources, graph_for):
        """Test u outside every N_i(v) is an error"""
        sets = random_sources(30, (3,), seed=0)
        graph = graph_for(sets, k=2)
        W = random_weights(graph)
        outside = next(u for u in range(30) if u not in graph.union_neighbours(0) and u != 0)
        with pytest.raises(NotInNeighbourhoodError):
            error_gradient(W, sets, graph, 0, outside)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed, random_sources, graph_for):
        """Test analytic gradient vs central differences (h = 1e-6)"""
        sets = random_sources(50, (5, 8), seed=seed)
        graph = graph_for(sets, k=5)
        W = random_weights(graph, seed=seed)
        h = 1e-6
        rng = np.random.default_rng(seed)

        for v in rng.choice(50, size=2, replace=False):
            ids, w = W.row(int(v))
            analytic, numeric = [], []
            for pos, u in enumerate(ids.tolist()):
                plus, minus = w.copy(), w.copy()
                plus[pos] += h
                minus[pos] -= h
                numeric.append((phi_of_row(int(v), plus, sets, graph) - phi_of_row(int(v), minus, sets, graph)) / (2 * h))
                analytic.append(error_gradient(W, sets, graph, int(v), u))
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-7)


class TestExactSolver:
    """Test the constrained least-squares solver"""

    def test_midpoint(self, make_set, graph_for):
        """Test v at the midpoint of its two neighbours -> (0.5, 0.5)"""
        emb = make_set("s", ["v", "a", "b", "far"], [[0.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 9.0]])
        graph = graph_for([emb], k=2)
        W = fit_weights_exact([emb], graph)

        ids, w = W.row(0)
        assert ids.tolist() == [1, 2]
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-9)

    def test_duplicate_neighbours_split_evenly(self, make_set, graph_for):
        """Test identical neighbours share the weight equally"""
        emb = make_set("s", ["v", "a", "b", "far"], [[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [9.0, 9.0]])
        graph = graph_for([emb], k=2)
        ids, w = fit_weights_exact([emb], graph).row(0)
        assert ids.tolist() == [1, 2]
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-9)

    def test_single_neighbour_weight_one(self, make_set, graph_for):
        """Test a lone neighbour gets weight exactly 1"""
        emb = make_set("s", ["v", "u"], [[0.0, 1.0], [1.0, 0.0]])
        graph = graph_for([emb], k=1)
        W = fit_weights_exact([emb], graph)
        assert W.row(0)[1].tolist() == [1.0]

    @pytest.mark.parametrize("seed", range(3))
    def test_beats_random_feasible_points(self, seed, random_sources, graph_for):
        """Test Phi(exact) <= Phi(w) for random rows summing to 1"""
        sets = random_sources(10, (4, 6), seed=seed)
        graph = graph_for(sets, k=3)
        W = fit_weights_exact(sets, graph)
        rng = np.random.default_rng(seed)

        for v in range(10):
            ids, w_star = W.row(v)
            best = phi_of_row(v, w_star, sets, graph)
            for _ in range(100):
                w = rng.standard_normal(len(ids))
                w = w / w.sum()
                assert best <= phi_of_row(v, w, sets, graph) + 1e-7

    def test_rows_sum_to_one(self, random_sources, graph_for):
        """Test every finalised row sums to 1"""
        sets = random_sources(40, (5, 7), seed=4, coverage=0.75)
        graph = graph_for(sets, k=6)
        W = fit_weights_exact(sets, graph)
        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-10)

    def test_scale_invariant_single_source(self, make_set, graph_for):
        """Test scaling the only source leaves the minimiser unchanged"""
        rng = np.random.default_rng(9)
        words = [f"w{i}" for i in range(25)]
        X = rng.standard_normal((25, 4))
        base, scaled = make_set("s", words, X), make_set("s", words, 4.0 * X)
        graph = graph_for([base], k=6)

        np.testing.assert_allclose(
            fit_weights_exact([base], graph).data, fit_weights_exact([scaled], graph).data, atol=1e-6
        )

    def test_empty_neighbourhood(self, make_set, graph_for):
        """Test a word with no neighbours anywhere is an error"""
        emb = make_set("s", ["alone"], [[1.0, 0.0]])
        other = make_set("t", ["x", "y"], [[1.0, 0.0], [0.0, 1.0]])
        graph = graph_for([emb, other], k=1)
        with pytest.raises(EmptyNeighbourhoodError):
            fit_weights_exact([emb, other], graph)

    def test_underdetermined_words_are_logged(self, caplog, random_sources, graph_for):
        """Test a warning when neighbourhoods outgrow the stacked source dimension"""
        sets = random_sources(40, (3, 4), seed=5)
        graph = graph_for(sets, k=10)
        with caplog.at_level(logging.WARNING, logger="meta_embedding.recon"):
            W = fit_weights_exact(sets, graph)

        assert any("underdetermined" in r.getMessage() for r in caplog.records)
        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-10)

    def test_no_warning_when_determined(self, caplog, random_sources, graph_for):
        """Test small neighbourhoods in wide sources stay quiet"""
        sets = random_sources(40, (8, 10), seed=5)
        graph = graph_for(sets, k=3)
        with caplog.at_level(logging.WARNING, logger="meta_embedding.recon"):
            fit_weights_exact(sets, graph)
        assert not any("underdetermined" in r.getMessage() for r in caplog.records)

    def test_independent_of_word_order(self, make_set, graph_for):
        """Test permuting the vocabulary gives the same per-word weights"""
        rng = np.random.default_rng(4)
        words = [f"w{i}" for i in range(30)]
        X = rng.standard_normal((30, 5))
        order = rng.permutation(30)

        forward = make_set("s", words, X)
        shuffled = make_set("s", [words[i] for i in order], X[order])
        g1, g2 = graph_for([forward], k=4), graph_for([shuffled], k=4)
        W1, W2 = fit_weights_exact([forward], g1), fit_weights_exact([shuffled], g2)

        for new_id, old_id in enumerate(order):
            ids1, w1 = W1.row(int(old_id))
            ids2, w2 = W2.row(new_id)
            by_word1 = dict(zip((words[i] for i in ids1), w1))
            by_word2 = dict(zip((g2.vocab.words[i] for i in ids2), w2))
            assert by_word1.keys() == by_word2.keys()
            for word in by_word1:
                assert by_word1[word] == pytest.approx(by_word2[word], abs=1e-9)


class TestSGDSolver:
    """Test the AdaGrad solver"""

    def test_rows_sum_to_one(self, random_sources, graph_for):
        """Test finalised SGD rows sum to 1 and respect the support"""
        sets = random_sources(40, (5, 7), seed=1, coverage=0.8)
        graph = graph_for(sets, k=5)
        W = fit_weights_sgd(sets, graph)

        assert W.finalized
        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-10)
        for v in range(40):
            np.testing.assert_array_equal(W.row(v)[0], graph.union_neighbours(v))

    def test_single_neighbour_weight_one(self, make_set, graph_for):
        """Test a lone neighbour ends at weight 1 after normalisation"""
        emb = make_set("s", ["v", "u"], [[0.0, 1.0], [1.0, 0.0]])
        graph = graph_for([emb], k=1)
        W = fit_weights_sgd([emb], graph)
        assert W.row(0)[1].tolist() == [1.0]

    def test_deterministic_across_workers(self, random_sources, graph_for):
        """Test the result depends on the seed only, not on threads"""
        sets = random_sources(600, (4, 6), seed=2)
        graph = graph_for(sets, k=4)
        config = SolverConfig(seed=7)
        W1 = fit_weights_sgd(sets, graph, config, workers=1)
        W4 = fit_weights_sgd(sets, graph, config, workers=4)
        assert W1.data.tobytes() == W4.data.tobytes()

    def test_seed_changes_start(self, random_sources, graph_for):
        """Test a different seed gives different (unconverged) weights"""
        sets = random_sources(30, (4, 6), seed=3)
        graph = graph_for(sets, k=4)
        W1 = fit_weights_sgd(sets, graph, SolverConfig(seed=1, max_iters=1))
        W2 = fit_weights_sgd(sets, graph, SolverConfig(seed=2, max_iters=1))
        assert not np.array_equal(W1.data, W2.data)

    def test_overflow_is_reported(self, random_sources, graph_for):
        """Test a runaway learning rate raises instead of returning garbage"""
        sets = random_sources(20, (4,), seed=0)
        graph = graph_for(sets, k=3)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteObjectiveError) as exc_info:
                fit_weights_sgd(sets, graph, SolverConfig(learning_rate=1e300, max_iters=50))
        assert exc_info.value.word is not None

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_projected_close_to_exact_optimum(self, seed, random_sources, graph_for):
        """Test projected AdaGrad reaches Phi within 1% of the exact solver"""
        sets = random_sources(100, (20, 30), seed=seed)
        graph = graph_for(sets, k=10)
        config = SolverConfig(learning_rate=0.05, max_iters=1500, tolerance=0.0, projected=True, seed=seed)

        phi_sgd = reconstruction_error(fit_weights_sgd(sets, graph, config), sets, graph)
        phi_exact = reconstruction_error(fit_weights_exact(sets, graph), sets, graph)

        assert phi_exact <= phi_sgd * (1 + 1e-9)
        assert phi_sgd <= 1.01 * phi_exact

    @pytest.mark.parametrize("seed", range(10))
    def test_default_improves_on_start_and_stays_near_optimum(self, seed, random_sources, graph_for):
        """Test default optimise-then-normalise: rows sum to 1, Phi drops, within 25% of exact"""
        sets = random_sources(100, (20, 30), seed=seed)
        graph = graph_for(sets, k=10)

        W = fit_weights_sgd(sets, graph, SolverConfig(seed=seed))
        # a single negligible step is the normalised random start
        start = fit_weights_sgd(sets, graph, SolverConfig(seed=seed, max_iters=1, learning_rate=1e-12))
        phi_sgd = reconstruction_error(W, sets, graph)
        phi_start = reconstruction_error(start, sets, graph)
        phi_exact = reconstruction_error(fit_weights_exact(sets, graph), sets, graph)

        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-10)
        assert phi_sgd < phi_start
        assert phi_exact <= phi_sgd * (1 + 1e-9)
        assert phi_sgd <= 1.25 * phi_exact


class TestCommonNeighbourhoodWeights:
    """Test fitting on a shared-neighbourhood graph"""

    def test_support_is_common(self, make_set, graph_for):
        """Test exact weights live on N_1(v) n N_2(v)"""
        rng = np.random.default_rng(8)
        words = [f"w{i}" for i in range(50)]
        X = rng.standard_normal((50, 5))
        s1 = make_set("s1", words, X)
        s2 = make_set("s2", words, X + 0.01 * rng.standard_normal((50, 5)))
        graph = graph_for([s1, s2], k=8)
        common = common_neighbourhoods(graph)

        W = fit_weights_exact([s1, s2], common)
        for v in range(50):
            expected = np.intersect1d(graph.source_neighbours(0, v), graph.source_neighbours(1, v))
            np.testing.assert_array_equal(W.row(v)[0], expected)
        np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-10)


class TestWeightsFile:
    """Test persistence"""

    def test_round_trip(self, tmp_path, random_sources, graph_for):
        """Test saved weights reload bit for bit"""
        sets = random_sources(30, (4, 4), seed=0)
        graph = graph_for(sets, k=3)
        W = fit_weights_exact(sets, graph)
        path = tmp_path / "w.bin"
        save_weights(W, path)

        loaded = load_weights(path)
        assert loaded.finalized
        assert loaded.indptr.tobytes() == W.indptr.tobytes()
        assert loaded.indices.tobytes() == W.indices.tobytes()
        assert loaded.data.tobytes() == W.data.tobytes()

    def test_bad_magic(self, tmp_path):
        """Test a foreign file is rejected"""
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTWEIGHTS" + b"\x00" * 40)
        with pytest.raises(WeightsFormatError):
            load_weights(path)

    def test_text_dump(self, tmp_path, make_set, graph_for):
        """Test 'word neighbour weight' lines"""
        emb = make_set("s", ["v", "u"], [[0.0, 1.0], [1.0, 0.0]])
        graph = graph_for([emb], k=1)
        path = tmp_path / "w.txt"
        dump_weights_text(fit_weights_exact([emb], graph), graph.vocab, path)
        assert path.read_text(encoding="utf-8").splitlines() == ["v u 1.0", "u v 1.0"]
