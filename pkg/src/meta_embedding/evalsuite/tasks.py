"""
Evaluation protocols: word similarity, CosAdd analogies, relation
classification by 1-NN over vector offsets, and short-text classification
with a cross-validated l2 logistic regression. Also neighbour_overlap for
comparing an embedding's k-NN structure against a reference.

Every evaluator accepts anything with ``vocab`` and ``vectors`` (an
EmbeddingSet or a MetaEmbedding) and skips out-of-vocabulary items,
reporting coverage instead.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from ..core.config import DEFAULT_CV_FOLDS, DEFAULT_REG_GRID
from .datasets import AnalogyDataset, RelationDataset, SimilarityDataset, TextDataset

logger = logging.getLogger(__name__)

_CHUNK = 1024
_TIE_TOL = 1e-12
_GD_TOL = 1e-6
_GD_EPOCHS = 5000


class UndefinedCorrelationError(ValueError):
    pass


class InsufficientCoverageError(ValueError):
    pass


class OutOfVocabularyError(ValueError):
    def __init__(self, token: str):
        self.token = token
        super().__init__(f"{token!r} is not in the vocabulary")


@dataclass(frozen=True)
class TaskResult:
    """One evaluation outcome. ``score`` is None when nothing could be evaluated."""
    task: str
    dataset: str
    score: Optional[float]
    coverage: float
    evaluated: int
    total: int
    skipped: int = 0
    details: Dict[str, Any] = field(default_factory=dict)


def _table(emb) -> np.ndarray:
    return np.asarray(emb.vectors, dtype=np.float64)


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.where(norms > 0.0, norms, 1.0)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError(f"need two equal-length sequences of at least 2 values, got {x.shape} and {y.shape}")
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x @ x) * (y @ y))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined: zero variance")
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    Spearman's rho: Pearson correlation of average-tie ranks.

    Raises:
        UndefinedCorrelationError: Either input has zero rank variance
    """
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError(f"need equal lengths >= 2, got {len(xs)} and {len(ys)}")
    return pearson(rankdata(xs, method="average"), rankdata(ys, method="average"))


def eval_similarity(emb, ds: SimilarityDataset) -> TaskResult:
    """
    Spearman correlation between cosine similarity and human scores.

    Raises:
        InsufficientCoverageError: Fewer than 2 pairs have both words in vocab
    """
    X = _table(emb)
    cosines, human = [], []
    for w1, w2, score in ds.pairs:
        i, j = emb.vocab.get(w1), emb.vocab.get(w2)
        if i < 0 or j < 0:
            continue
        a, b = X[i], X[j]
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        cosines.append(float(a @ b / denom) if denom > 0 else 0.0)
        human.append(score)

    if len(cosines) < 2:
        raise InsufficientCoverageError(f"'{ds.name}': {len(cosines)} of {len(ds)} pairs covered, need 2")
    rho = spearman(cosines, human)
    return TaskResult(
        task="similarity", dataset=ds.name, score=rho,
        coverage=len(cosines) / len(ds), evaluated=len(cosines), total=len(ds),
    )


def _cosadd_batch(U: np.ndarray, X: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """Answer ids for (a, b, c) id rows; U is the row-normalised table."""
    query = X[triples[:, 1]] - X[triples[:, 0]] + X[triples[:, 2]]
    sims = _unit_rows(query) @ U.T
    rows = np.arange(len(triples))[:, None]
    sims[rows, triples] = -np.inf
    return np.argmax(sims, axis=1)


def cosadd(emb, a: str, b: str, c: str) -> str:
    """
    "a is to b as c is to ?": argmax over the vocabulary minus {a, b, c} of
    cos(b - a + c, d). Ties go to the lowest id.

    Raises:
        OutOfVocabularyError: a, b or c is missing
    """
    ids = []
    for token in (a, b, c):
        i = emb.vocab.get(token)
        if i < 0:
            raise OutOfVocabularyError(token)
        ids.append(i)
    if len(emb.vocab) - len(set(ids)) < 1:
        raise ValueError("no candidate words left after excluding the query words")
    X = _table(emb)
    answer = _cosadd_batch(_unit_rows(X), X, np.array([ids], dtype=np.int64))
    return emb.vocab.words[int(answer[0])]


def eval_analogy(emb, ds: AnalogyDataset) -> TaskResult:
    """CosAdd accuracy over questions whose four words are all in vocabulary."""
    ids, keep = [], []
    for qi, q in enumerate(ds.questions):
        row = [emb.vocab.get(t) for t in q]
        if min(row) >= 0:
            ids.append(row)
            keep.append(qi)

    per_section: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    correct = 0
    if ids:
        X = _table(emb)
        U = _unit_rows(X)
        ids_arr = np.asarray(ids, dtype=np.int64)
        for start in range(0, len(ids_arr), _CHUNK):
            chunk = ids_arr[start:start + _CHUNK]
            hits = _cosadd_batch(U, X, chunk[:, :3]) == chunk[:, 3]
            for offset, hit in enumerate(hits):
                section = per_section[ds.sections[keep[start + offset]]]
                section[0] += int(hit)
                section[1] += 1
            correct += int(hits.sum())

    evaluated = len(ids)
    if not evaluated:
        logger.warning(f"[Eval] '{ds.name}': no analogy question fully covered")
    return TaskResult(
        task="analogy", dataset=ds.name,
        score=correct / evaluated if evaluated else None,
        coverage=evaluated / len(ds) if len(ds) else 0.0,
        evaluated=evaluated, total=len(ds), skipped=len(ds) - evaluated,
        details={
            "sections": {
                name: {"correct": c, "total": t, "accuracy": c / t}
                for name, (c, t) in sorted(per_section.items())
            }
        },
    )


def eval_relation(emb, ds: RelationDataset) -> TaskResult:
    """
    Leave-one-out 1-NN relation classification on offsets word2 - word1.

    Triples with an OOV word or a zero offset are skipped and counted.
    Returns micro-averaged accuracy over evaluated triples.
    """
    X = _table(emb)
    offsets, labels, keys = [], [], []
    oov = zero = 0
    for relation, w1, w2 in ds.triples:
        i, j = emb.vocab.get(w1), emb.vocab.get(w2)
        if i < 0 or j < 0:
            oov += 1
            continue
        d = X[j] - X[i]
        if not np.any(d):
            zero += 1
            continue
        offsets.append(d)
        labels.append(relation)
        keys.append((w1, w2, relation))

    m = len(offsets)
    details = {"oov": oov, "zero_offset": zero}
    if m < 2:
        logger.warning(f"[Eval] '{ds.name}': {m} relation triples usable, need 2")
        return TaskResult(
            task="relation", dataset=ds.name, score=None, coverage=m / len(ds),
            evaluated=m, total=len(ds), skipped=oov + zero, details=details,
        )

    O = _unit_rows(np.vstack(offsets))
    labels_arr = np.asarray(labels, dtype=object)
    # candidates ordered by (word1, word2, relation) so ties never depend on file order
    order = np.array(sorted(range(m), key=keys.__getitem__), dtype=np.int64)
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m)
    candidates = O[order]
    correct = 0
    for start in range(0, m, _CHUNK):
        stop = min(start + _CHUNK, m)
        sims = O[start:stop] @ candidates.T
        sims[np.arange(stop - start), rank[start:stop]] = -np.inf
        best = sims.max(axis=1, keepdims=True)
        nearest = order[np.argmax(sims >= best - _TIE_TOL, axis=1)]
        correct += int(np.sum(labels_arr[nearest] == labels_arr[start:stop]))

    return TaskResult(
        task="relation", dataset=ds.name, score=correct / m, coverage=m / len(ds),
        evaluated=m, total=len(ds), skipped=oov + zero, details=details,
    )


# ---------------------------------------------------------------------------
# Short-text classification
# ---------------------------------------------------------------------------

def _centroids(emb, X: np.ndarray, docs) -> Tuple[np.ndarray, np.ndarray]:
    feats = np.zeros((len(docs), X.shape[1]), dtype=np.float64)
    labels = np.empty(len(docs), dtype=np.float64)
    for r, (label, tokens) in enumerate(docs):
        ids = [i for i in (emb.vocab.get(t) for t in tokens) if i >= 0]
        if ids:
            feats[r] = X[ids].mean(axis=0)
        labels[r] = label
    return feats, labels


class LogisticRegression:
    """
    Binary l2-regularised logistic regression by full-batch gradient descent.

    Minimises mean log-loss + reg/2 ||w||^2 (intercept unregularised) with a
    fixed step of 1/L, L the gradient Lipschitz constant; stops once the
    gradient norm drops below ``tol`` or after ``max_epochs``.
    """

    def __init__(self, reg: float, tol: float = _GD_TOL, max_epochs: int = _GD_EPOCHS):
        self.reg = reg
        self.tol = tol
        self.max_epochs = max_epochs
        self.w: Optional[np.ndarray] = None
        self.epochs = 0

    @staticmethod
    def _add_intercept(X: np.ndarray) -> np.ndarray:
        return np.hstack([np.ones((X.shape[0], 1)), X])

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticRegression":
        Xb = self._add_intercept(X)
        m = Xb.shape[0]
        smax = np.linalg.norm(Xb, ord=2) if Xb.size else 0.0
        step = 1.0 / (0.25 * smax * smax / m + self.reg)
        mask = np.ones(Xb.shape[1])
        mask[0] = 0.0
        w = np.zeros(Xb.shape[1])
        for epoch in range(1, self.max_epochs + 1):
            grad = Xb.T @ (expit(Xb @ w) - y) / m + self.reg * mask * w
            self.epochs = epoch
            if np.linalg.norm(grad) < self.tol:
                break
            w -= step * grad
        self.w = w
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self._add_intercept(X) @ self.w >= 0.0).astype(np.float64)


def _cv_accuracy(X: np.ndarray, y: np.ndarray, reg: float, folds: List[np.ndarray], name: str) -> Optional[float]:
    scores = []
    for k, test_idx in enumerate(folds):
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        if len(np.unique(y[train_mask])) < 2:
            logger.warning(f"[Eval] '{name}': fold {k} has a single-class train split, skipped")
            continue
        model = LogisticRegression(reg).fit(X[train_mask], y[train_mask])
        scores.append(float(np.mean(model.predict(X[test_idx]) == y[test_idx])))
    return float(np.mean(scores)) if scores else None


def eval_text(
    emb,
    ds: TextDataset,
    folds: int = DEFAULT_CV_FOLDS,
    reg_grid: Sequence[float] = DEFAULT_REG_GRID,
    seed: int = 0,
) -> TaskResult:
    """
    Centroid features + cross-validated logistic regression; test accuracy.

    Args:
        emb: Embedding (documents are averaged over in-vocabulary tokens)
        ds: Text dataset
        folds: Cross-validation folds on the train split
        reg_grid: Candidate l2 strengths
        seed: Fold shuffling seed
    """
    if not reg_grid:
        raise ValueError("reg_grid must not be empty")
    X = _table(emb)
    X_train, y_train = _centroids(emb, X, ds.train)
    X_test, y_test = _centroids(emb, X, ds.test)

    order = np.random.default_rng(seed).permutation(len(y_train))
    splits = [s for s in np.array_split(order, min(folds, len(y_train))) if len(s)]

    best_reg, best_score = None, -1.0
    cv_scores: Dict[str, Optional[float]] = {}
    for reg in reg_grid:
        score = _cv_accuracy(X_train, y_train, float(reg), splits, ds.name)
        cv_scores[repr(float(reg))] = score
        if score is not None and score > best_score:
            best_reg, best_score = float(reg), score
    if best_reg is None:
        best_reg = float(reg_grid[len(reg_grid) // 2])
        logger.warning(f"[Eval] '{ds.name}': every CV fold was degenerate, using reg={best_reg}")

    model = LogisticRegression(best_reg).fit(X_train, y_train)
    accuracy = float(np.mean(model.predict(X_test) == y_test)) if len(y_test) else None
    covered = sum(1 for _, tokens in ds.test if any(t in emb.vocab for t in tokens))
    return TaskResult(
        task="text", dataset=ds.name, score=accuracy,
        coverage=covered / len(ds.test) if ds.test else 0.0,
        evaluated=len(ds.test), total=len(ds.test),
        details={"reg": best_reg, "cv_accuracy": cv_scores, "epochs": model.epochs},
    )


# ---------------------------------------------------------------------------
# Neighbourhood agreement
# ---------------------------------------------------------------------------

def _cosine_knn(X: np.ndarray, k: int) -> np.ndarray:
    U = _unit_rows(X)
    n = len(U)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        sims = U[start:stop] @ U.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        out[start:stop] = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return out


def neighbour_overlap(emb, reference, k: int = 10) -> float:
    """
    Mean |kNN_emb(v) n kNN_ref(v)| / k over the words both share, with
    cosine neighbours among the shared words (ties by position).
    """
    shared = [t for t in emb.vocab.words if t in reference.vocab]
    if len(shared) <= k:
        raise InsufficientCoverageError(f"{len(shared)} shared words, need more than k={k}")
    a = _table(emb)[[emb.vocab.lookup(t) for t in shared]]
    b = _table(reference)[[reference.vocab.lookup(t) for t in shared]]
    na, nb = _cosine_knn(a, k), _cosine_knn(b, k)
    overlap = [len(np.intersect1d(na[i], nb[i], assume_unique=True)) for i in range(len(shared))]
    return float(np.mean(overlap)) / k
