"""
Embedding I/O tests.

Loading the text formats, the binary cache, normalisation and the union
vocabulary.
"""

import logging

import numpy as np
import pytest

from meta_embedding.embio import (
    CACHE_MAGIC,
    CacheVersionError,
    DimensionMismatchError,
    EmbeddingFormatError,
    EmbeddingSet,
    InvalidEmbeddingError,
    Vocabulary,
    VocabularyError,
    ZeroNormError,
    align_rows,
    l2_normalize,
    load_embeddings,
    save_cache,
    save_embeddings,
    union_vocab,
)


class TestVocabulary:
    """Test the ordered token <-> id map"""

    def test_ids_are_contiguous(self):
        """Test lookup(words[i]) == i for every token"""
        vocab = Vocabulary.from_words(["the", "cat", "sat"])
        assert [vocab.lookup(w) for w in vocab.words] == [0, 1, 2]
        assert len(vocab) == 3
        assert "cat" in vocab
        assert "dog" not in vocab

    def test_get_missing_returns_default(self):
        """Test get() on an absent token"""
        vocab = Vocabulary.from_words(["a"])
        assert vocab.get("b") == -1
        with pytest.raises(KeyError):
            vocab.lookup("b")

    def test_duplicates_rejected(self):
        """Test duplicate tokens raise VocabularyError"""
        with pytest.raises(VocabularyError, match="'a'"):
            Vocabulary.from_words(["a", "b", "a"])


class TestEmbeddingSet:
    """Test EmbeddingSet invariants"""

    def test_vectors_are_read_only_float32(self, make_set):
        """Test the table is stored as read-only float32"""
        emb = make_set("x", ["a", "b"], [[1.0, 2.0], [3.0, 4.0]])
        assert emb.vectors.dtype == np.float32
        assert not emb.vectors.flags.writeable
        assert emb.dim == 2

    def test_rejects_non_finite(self, make_set):
        """Test NaN rows are refused"""
        with pytest.raises(InvalidEmbeddingError, match="'b'"):
            make_set("x", ["a", "b"], [[1.0, 0.0], [np.nan, 0.0]])

    def test_rejects_row_count_mismatch(self, make_set):
        """Test rows must match vocabulary size"""
        with pytest.raises(InvalidEmbeddingError):
            make_set("x", ["a", "b"], [[1.0, 0.0]])

    def test_unit_flag_checked(self, make_set):
        """Test unit_normalized=True requires unit rows"""
        with pytest.raises(InvalidEmbeddingError):
            make_set("x", ["a"], [[3.0, 4.0]], unit=True)


class TestLoadEmbeddings:
    """Test text loaders"""

    def test_glove_two_rows(self, tmp_path):
        """Test smallest well-formed glove file"""
        path = tmp_path / "tiny.txt"
        path.write_text("a 1.0 0.0\nb 0.0 1.0\n", encoding="utf-8")

        emb = load_embeddings(path, "glove-text")

        assert emb.name == "tiny"
        assert emb.dim == 2
        assert len(emb) == 2
        np.testing.assert_array_equal(emb.vector("b"), [0.0, 1.0])

    def test_word2vec_header_drives_dim(self, tmp_path):
        """Test word2vec-text header 'count dim'"""
        path = tmp_path / "w2v.txt"
        path.write_text("2 3\na 1 2 3\nb 4 5 6\n", encoding="utf-8")

        emb = load_embeddings(path, "word2vec-text", name="w2v")

        assert emb.dim == 3
        assert emb.vocab.words == ("a", "b")

    def test_word2vec_bad_header(self, tmp_path):
        """Test a header with the wrong field count is rejected with its line number"""
        path = tmp_path / "bad.txt"
        path.write_text("2 3 4\na 1 2 3\n", encoding="utf-8")

        with pytest.raises(EmbeddingFormatError) as exc:
            load_embeddings(path, "word2vec-text")
        assert exc.value.line_number == 1

    def test_glove_inconsistent_dim(self, tmp_path):
        """Test glove rows with differing widths raise DimensionMismatchError"""
        path = tmp_path / "ragged.txt"
        path.write_text("a 1 2\nb 1 2 3\n", encoding="utf-8")

        with pytest.raises(DimensionMismatchError) as exc:
            load_embeddings(path)
        assert exc.value.line_number == 2

    def test_unparsable_float(self, tmp_path):
        """Test a non-numeric value reports its line"""
        path = tmp_path / "nan.txt"
        path.write_text("a 1 2\n\nb x 2\n", encoding="utf-8")

        with pytest.raises(EmbeddingFormatError) as exc:
            load_embeddings(path)
        assert exc.value.line_number == 3

    def test_empty_file(self, tmp_path):
        """Test an empty file is an error"""
        path = tmp_path / "empty.txt"
        path.write_text("\n\n", encoding="utf-8")

        with pytest.raises(EmbeddingFormatError, match="empty"):
            load_embeddings(path)

    def test_duplicates_keep_first(self, tmp_path, caplog):
        """Test duplicate tokens keep the first row and log a warning"""
        path = tmp_path / "dup.txt"
        path.write_text("a 1 0\nb 0 1\na 5 5\n", encoding="utf-8")

        with caplog.at_level(logging.WARNING):
            emb = load_embeddings(path)

        assert len(emb) == 2
        assert emb.duplicates_dropped == 1
        np.testing.assert_array_equal(emb.vector("a"), [1.0, 0.0])
        assert "duplicate" in caplog.text

    def test_tokens_are_case_sensitive(self, tmp_path):
        """Test no case folding on load"""
        path = tmp_path / "case.txt"
        path.write_text("Apple 1 0\napple 0 1\n", encoding="utf-8")

        emb = load_embeddings(path)
        assert emb.vocab.words == ("Apple", "apple")

    def test_unknown_format(self, tmp_path):
        """Test an unknown format name"""
        path = tmp_path / "x.txt"
        path.write_text("a 1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="format"):
            load_embeddings(path, "fasttext-bin")


class TestCache:
    """Test the binary cache format"""

    def test_round_trip_bitwise(self, tmp_path, make_set):
        """Test a 10k-word random set survives save/load bit for bit"""
        rng = np.random.default_rng(7)
        words = [f"tok{i}" for i in range(10_000)]
        emb = make_set("big", words, rng.standard_normal((10_000, 16)))

        path = tmp_path / "big.bin"
        save_cache(emb, path)
        loaded = load_embeddings(path, "cache-binary")

        assert loaded.equals(emb)

    def test_unit_flag_and_unicode_survive(self, tmp_path, make_set):
        """Test the unit flag and non-ASCII tokens are preserved"""
        emb = l2_normalize(make_set("uni", ["café", "naïve"], [[3.0, 4.0], [0.0, 2.0]]))
        path = tmp_path / "uni.bin"
        save_embeddings(emb, path, "cache-binary")

        loaded = load_embeddings(path, "cache-binary")
        assert loaded.unit_normalized
        assert loaded.vocab.words == ("café", "naïve")

    def test_bad_magic(self, tmp_path, make_set):
        """Test corrupted magic bytes raise CacheVersionError"""
        path = tmp_path / "c.bin"
        save_cache(make_set("c", ["a"], [[1.0]]), path)
        data = bytearray(path.read_bytes())
        data[0:len(CACHE_MAGIC)] = b"XXXXXXXX"
        path.write_bytes(bytes(data))

        with pytest.raises(CacheVersionError):
            load_embeddings(path, "cache-binary")

    def test_glove_text_round_trip(self, tmp_path, make_set):
        """Test glove-text writing keeps float32 values exactly"""
        rng = np.random.default_rng(3)
        emb = make_set("t", ["a", "b", "c"], rng.standard_normal((3, 5)))
        path = tmp_path / "t.txt"
        save_embeddings(emb, path, "glove-text")

        loaded = load_embeddings(path, "glove-text", name="t")
        assert loaded.equals(emb)

    def test_word2vec_text_has_header(self, tmp_path, make_set):
        """Test word2vec-text output starts with 'count dim'"""
        emb = make_set("w", ["a", "b"], [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        path = tmp_path / "w.txt"
        save_embeddings(emb, path, "word2vec-text")

        assert path.read_text(encoding="utf-8").splitlines()[0] == "2 3"
        assert load_embeddings(path, "word2vec-text", name="w").equals(emb)


class TestNormalize:
    """Test l2 normalisation"""

    def test_three_four_five(self, make_set):
        """Test (3, 4) -> (0.6, 0.8)"""
        emb = l2_normalize(make_set("x", ["a"], [[3.0, 4.0]]))
        np.testing.assert_allclose(emb.vectors[0], [0.6, 0.8], rtol=1e-6)
        assert emb.unit_normalized

    def test_sign_preserved(self, make_set):
        """Test (-2, 0, 0) -> (-1, 0, 0)"""
        emb = l2_normalize(make_set("x", ["a"], [[-2.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(emb.vectors[0], [-1.0, 0.0, 0.0])

    def test_idempotent(self, make_set):
        """Test normalising twice changes nothing"""
        rng = np.random.default_rng(0)
        once = l2_normalize(make_set("x", list("abcde"), rng.standard_normal((5, 4))))
        twice = l2_normalize(once)
        np.testing.assert_array_equal(once.vectors, twice.vectors)

    def test_preserves_cosine_order(self, make_set):
        """Test cosine ranking against a query row is unchanged"""
        rng = np.random.default_rng(1)
        X = rng.standard_normal((20, 6)) * rng.uniform(0.5, 3.0, (20, 1))
        emb = make_set("x", [f"w{i}" for i in range(20)], X)
        unit = l2_normalize(emb)

        X64 = X.astype(np.float32).astype(np.float64)
        cos = X64 @ X64[0] / (np.linalg.norm(X64, axis=1) * np.linalg.norm(X64[0]))
        dots = unit.vectors.astype(np.float64) @ unit.vectors[0].astype(np.float64)
        assert list(np.argsort(-cos)[:5]) == list(np.argsort(-dots)[:5])

    def test_zero_row_names_token(self, make_set):
        """Test zero vectors raise ZeroNormError naming the token"""
        with pytest.raises(ZeroNormError) as exc:
            l2_normalize(make_set("src", ["ok", "zero"], [[1.0, 0.0], [0.0, 0.0]]))
        assert exc.value.token == "zero"
        assert exc.value.source == "src"


class TestUnionVocab:
    """Test the union vocabulary and source membership"""

    def test_three_word_union(self, make_set):
        """Test {a,b} u {b,c} = (a,b,c) with b covered twice"""
        s1 = make_set("s1", ["a", "b"], np.eye(2))
        s2 = make_set("s2", ["b", "c"], np.eye(2))

        vocab, membership = union_vocab([s1, s2])

        assert vocab.words == ("a", "b", "c")
        assert membership.covers(0, 1) and membership.covers(1, 1)
        assert not membership.covers(1, 0)
        assert membership.intersection_size() == 1
        assert membership.coverage() == {"s1": pytest.approx(2 / 3), "s2": pytest.approx(2 / 3)}

    def test_identical_vocabs(self, make_set):
        """Test identical vocabularies give full masks"""
        s1 = make_set("s1", ["a", "b", "c"], np.eye(3))
        s2 = make_set("s2", ["a", "b", "c"], np.eye(3))

        vocab, membership = union_vocab([s1, s2])

        assert vocab.words == s1.vocab.words
        assert membership.masks.all()

    def test_membership_independent_of_order(self, make_set):
        """Test covered word sets do not depend on source order"""
        s1 = make_set("s1", ["a", "b"], np.eye(2))
        s2 = make_set("s2", ["c", "b", "d"], np.eye(3))

        v12, m12 = union_vocab([s1, s2])
        v21, m21 = union_vocab([s2, s1])

        assert set(v12.words) == set(v21.words)
        covered = {name: {v12.words[i] for i in m12.covered_ids(s)} for s, name in enumerate(m12.names)}
        covered_rev = {name: {v21.words[i] for i in m21.covered_ids(s)} for s, name in enumerate(m21.names)}
        assert covered == covered_rev

    def test_align_rows(self, make_set):
        """Test union id -> source row mapping with -1 for absent words"""
        s1 = make_set("s1", ["b", "a"], np.eye(2))
        vocab = Vocabulary.from_words(["a", "b", "z"])
        assert align_rows(s1, vocab).tolist() == [1, 0, -1]

    def test_empty_input(self):
        """Test union of nothing is an error"""
        with pytest.raises(VocabularyError):
            union_vocab([])
