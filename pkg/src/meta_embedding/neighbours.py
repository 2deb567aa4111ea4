"""
Nearest Neighbours

Array-backed ball tree with exact pruned k-NN search, and the per-source
neighbourhood graph N_i(v) over union-vocabulary ids.

Tree storage follows the usual "structure of arrays" layout: one index
permutation plus per-node start/end ranges, centers, radii and child links.
Nodes split on the coordinate of largest spread at the median, so
construction is O(n log n).

The metric is Euclidean on whatever vectors the tree is given. The pipeline
hands it unit-normalised tables, which makes the ranking cosine-equivalent.
"""

import heapq
import struct
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .artifact_cache import atomic_writer
from .core.config import DEFAULT_K, DEFAULT_LEAF_SIZE
from .embio import EmbeddingSet, SourceMembership, Vocabulary

logger = logging.getLogger(__name__)

GRAPH_MAGIC = b"MEMBGRPH"
GRAPH_VERSION = 1
_GRAPH_HEADER = struct.Struct("<IQIQB")  # version, k, sources, n, include_self

# Lower bounds within this of the current k-th distance are still searched,
# so rounding in ||q - c|| - r never drops an exact tie.
_PRUNE_SLACK = 1e-12
_QUERY_CHUNK = 256


class GraphFormatError(ValueError):
    """Raised when a graph file does not match the expected layout."""
    pass


@dataclass(frozen=True, eq=False)
class BallTree:
    """Ball tree over the rows of ``data``. Immutable after build."""
    data: np.ndarray
    idx: np.ndarray
    node_start: np.ndarray
    node_end: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    leaf_size: int

    @property
    def n_points(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.node_start.shape[0])

    def is_leaf(self, node: int) -> bool:
        return self.node_left[node] < 0

    def points(self, node: int) -> np.ndarray:
        """Point ids held by ``node`` (and all of its descendants)."""
        return self.idx[self.node_start[node]:self.node_end[node]]

    def leaves(self) -> List[int]:
        return [i for i in range(self.n_nodes) if self.is_leaf(i)]

    def query_point(self, q: np.ndarray, k: int, exclude: int = -1) -> List[Tuple[int, float]]:
        """
        Exact k nearest rows to ``q``, ascending by (distance, id).

        Args:
            q: Query vector
            k: Number of neighbours (truncated to what is available)
            exclude: Row id to skip (-1 for none)
        """
        q = np.asarray(q, dtype=np.float64)
        heap: List[Tuple[float, int]] = []  # (-dist, -id): heap[0] is the worst kept
        stack = [(0.0, 0)]

        while stack:
            lower, node = stack.pop()
            if len(heap) == k and lower - (-heap[0][0]) > _PRUNE_SLACK:
                continue

            if self.is_leaf(node):
                ids = self.points(node)
                dist = np.sqrt(((self.data[ids] - q) ** 2).sum(axis=1))
                if len(heap) == k:
                    keep = dist <= -heap[0][0]
                    ids, dist = ids[keep], dist[keep]
                for i, d in zip(ids.tolist(), dist.tolist()):
                    if i == exclude:
                        continue
                    key = (-d, -i)
                    if len(heap) < k:
                        heapq.heappush(heap, key)
                    elif key > heap[0]:
                        heapq.heapreplace(heap, key)
                continue

            children = []
            for child in (self.node_left[node], self.node_right[node]):
                gap = np.sqrt(((self.centers[child] - q) ** 2).sum()) - self.radii[child]
                children.append((max(0.0, float(gap)), int(child)))
            children.sort(reverse=True)  # nearer child popped first
            stack.extend(children)

        return sorted(((-ni, -nd) for nd, ni in heap), key=lambda t: (t[1], t[0]))


def build_balltree(emb, leaf_size: int = DEFAULT_LEAF_SIZE) -> BallTree:
    """
    Build a ball tree over the rows of an EmbeddingSet (or a plain matrix).

    Args:
        emb: EmbeddingSet or n x d array
        leaf_size: Maximum points per leaf (>= 1)

    Returns:
        BallTree over all rows
    """
    vectors = emb.vectors if isinstance(emb, EmbeddingSet) else emb
    data = np.array(vectors, dtype=np.float64, order="C")
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("build_balltree needs a non-empty 2-d point set")
    if leaf_size < 1:
        raise ValueError(f"leaf_size must be >= 1, got {leaf_size}")

    n = data.shape[0]
    idx = np.arange(n, dtype=np.int64)
    start: List[int] = [0]
    end: List[int] = [n]
    left: List[int] = [-1]
    right: List[int] = [-1]
    centers: List[np.ndarray] = [None]
    radii: List[float] = [0.0]

    pending = [0]
    while pending:
        node = pending.pop()
        s, e = start[node], end[node]
        pts = data[idx[s:e]]
        center = pts.mean(axis=0)
        radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
        centers[node] = center
        radii[node] = radius

        if e - s <= leaf_size or radius == 0.0:
            continue

        spread = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spread))
        mid = (e - s) // 2
        order = np.argpartition(pts[:, axis], mid, kind="introselect")
        idx[s:e] = idx[s:e][order]

        for cs, ce in ((s, s + mid), (s + mid, e)):
            child = len(start)
            start.append(cs)
            end.append(ce)
            left.append(-1)
            right.append(-1)
            centers.append(None)
            radii.append(0.0)
            if cs == s:
                left[node] = child
            else:
                right[node] = child
            pending.append(child)

    data.setflags(write=False)
    tree = BallTree(
        data=data,
        idx=idx,
        node_start=np.asarray(start, dtype=np.int64),
        node_end=np.asarray(end, dtype=np.int64),
        node_left=np.asarray(left, dtype=np.int64),
        node_right=np.asarray(right, dtype=np.int64),
        centers=np.vstack(centers),
        radii=np.asarray(radii, dtype=np.float64),
        leaf_size=leaf_size,
    )
    logger.debug(f"[Neighbours] ball tree: {n} points, {tree.n_nodes} nodes, leaf_size={leaf_size}")
    return tree


def query_knn(tree: BallTree, query_id: int, k: int, include_self: bool = False) -> List[Tuple[int, float]]:
    """
    Exact k-NN of an indexed point.

    Args:
        tree: BallTree
        query_id: Row id of the query point in the tree's data
        k: Number of neighbours (>= 1); silently truncated to available points
        include_self: Keep the query itself (it comes first, at distance 0)

    Returns:
        List of (row id, distance), ascending by distance, ties by ascending id
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    exclude = -1 if include_self else int(query_id)
    return tree.query_point(tree.data[query_id], k, exclude=exclude)


def knn_table(tree: BallTree, k: int, include_self: bool = False, workers: int = 1) -> np.ndarray:
    """
    k-NN row ids for every indexed point, as an n x width matrix.

    width = min(k, n - 1), or min(k, n) with include_self.
    """
    n = tree.n_points
    width = min(k, n if include_self else n - 1)
    table = np.full((n, max(width, 0)), -1, dtype=np.int64)
    if width <= 0:
        return table

    def run(chunk: range) -> None:
        for q in chunk:
            hits = query_knn(tree, q, k, include_self)
            table[q, :len(hits)] = [i for i, _ in hits]

    chunks = [range(s, min(s + _QUERY_CHUNK, n)) for s in range(0, n, _QUERY_CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for chunk in chunks:
            run(chunk)
    return table


@dataclass(frozen=True, eq=False)
class NeighbourhoodGraph:
    """
    Per-source neighbour lists over union ids.

    ``lists[s]`` is an n x width_s matrix; row v holds N_s(v) ascending by
    distance, padded with -1. Words source s does not cover have an all -1 row.
    """
    k: int
    include_self: bool
    vocab: Vocabulary
    membership: SourceMembership
    lists: Tuple[np.ndarray, ...]

    @property
    def n_words(self) -> int:
        return len(self.vocab)

    @property
    def n_sources(self) -> int:
        return len(self.lists)

    @property
    def names(self) -> Tuple[str, ...]:
        return self.membership.names

    def source_neighbours(self, source: int, v: int) -> np.ndarray:
        row = self.lists[source][v]
        return row[row >= 0]

    def union_neighbours(self, v: int) -> np.ndarray:
        """Sorted ids of N_1(v) u ... u N_S(v)."""
        parts = [self.source_neighbours(s, v) for s in range(self.n_sources)]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def multiplicity(self, v: int) -> Tuple[np.ndarray, np.ndarray]:
        """(union neighbour ids, number of sources whose N_i(v) holds each)."""
        ids = self.union_neighbours(v)
        counts = np.zeros(len(ids), dtype=np.int64)
        for s in range(self.n_sources):
            counts += np.isin(ids, self.source_neighbours(s, v))
        return ids, counts

    def sources_covering(self, v: int) -> List[int]:
        return [s for s in range(self.n_sources) if self.membership.rows[s, v] >= 0]


def _to_union(membership: SourceMembership, source: int, n_rows: int) -> np.ndarray:
    local_to_union = np.full(n_rows, -1, dtype=np.int64)
    covered = membership.covered_ids(source)
    local_to_union[membership.rows[source, covered]] = covered
    return local_to_union


def build_graph(
    sets: Sequence[EmbeddingSet],
    vocab: Vocabulary,
    membership: SourceMembership,
    k: int = DEFAULT_K,
    include_self: bool = False,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    workers: int = 1,
) -> NeighbourhoodGraph:
    """
    Build the k-NN graph of every source over the shared union vocabulary.

    Args:
        sets: Source sets, in the order membership was built from
        vocab: Union vocabulary
        membership: Per-source row maps from union_vocab()
        k: Neighbourhood size
        include_self: Keep each word in its own neighbourhood
        leaf_size: Ball tree leaf size
        workers: Threads for the query loop (result does not depend on it)

    Returns:
        NeighbourhoodGraph
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if tuple(e.name for e in sets) != membership.names:
        raise ValueError("sets do not match the membership the union vocabulary was built from")

    n = len(vocab)
    lists = []
    for s, emb in enumerate(sets):
        tree = build_balltree(emb, leaf_size)
        local = knn_table(tree, k, include_self, workers)
        local_to_union = _to_union(membership, s, len(emb))
        graph_rows = np.full((n, local.shape[1]), -1, dtype=np.int64)
        mapped = np.where(local >= 0, local_to_union[np.maximum(local, 0)], -1)
        graph_rows[local_to_union] = mapped
        graph_rows.setflags(write=False)
        lists.append(graph_rows)
        logger.info(f"[Neighbours] '{emb.name}': {len(emb)} words, {local.shape[1]} neighbours each")

    return NeighbourhoodGraph(
        k=k, include_self=include_self, vocab=vocab, membership=membership, lists=tuple(lists)
    )


def common_neighbourhoods(graph: NeighbourhoodGraph) -> NeighbourhoodGraph:
    """
    Restrict every word's per-source lists to N_1(v) n ... n N_S(v).

    Only sources covering v take part in the intersection. Under this graph
    all covering sources share one neighbourhood per word, the setting in
    which reconstruction in the concatenated space equals Phi.
    """
    n = graph.n_words
    common: List[np.ndarray] = []
    for v in range(n):
        covering = graph.sources_covering(v)
        ids: Optional[np.ndarray] = None
        for s in covering:
            nb = graph.source_neighbours(s, v)
            ids = nb if ids is None else ids[np.isin(ids, nb)]
        common.append(np.sort(ids) if ids is not None else np.empty(0, dtype=np.int64))

    width = max((len(c) for c in common), default=0)
    lists = []
    for s in range(graph.n_sources):
        rows = np.full((n, width), -1, dtype=np.int64)
        for v in range(n):
            if graph.membership.rows[s, v] >= 0:
                rows[v, :len(common[v])] = common[v]
        rows.setflags(write=False)
        lists.append(rows)
    return NeighbourhoodGraph(
        k=graph.k, include_self=graph.include_self, vocab=graph.vocab,
        membership=graph.membership, lists=tuple(lists),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _graph_bytes(graph: NeighbourhoodGraph) -> bytes:
    parts = [
        GRAPH_MAGIC,
        _GRAPH_HEADER.pack(GRAPH_VERSION, graph.k, graph.n_sources, graph.n_words, int(graph.include_self)),
    ]
    for name, rows in zip(graph.names, graph.lists):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<II", len(encoded), rows.shape[1]))
        parts.append(encoded)
        parts.append(np.ascontiguousarray(rows, dtype="<i8").tobytes())
    return b"".join(parts)


def save_graph(graph: NeighbourhoodGraph, path) -> None:
    """Binary adjacency file: header (k, source count, n), then per-source id blocks."""
    payload = _graph_bytes(graph)
    atomic_writer(path, lambda tmp: tmp.write_bytes(payload))


def load_graph(path, vocab: Vocabulary, membership: SourceMembership) -> NeighbourhoodGraph:
    """
    Read a graph written by save_graph() against its union vocabulary.

    Raises:
        GraphFormatError: bad magic/version, or sizes that do not match vocab
    """
    data = Path(path).read_bytes()
    if data[:len(GRAPH_MAGIC)] != GRAPH_MAGIC:
        raise GraphFormatError(f"{path}: not a neighbourhood graph file")
    pos = len(GRAPH_MAGIC)
    version, k, n_sources, n, include_self = _GRAPH_HEADER.unpack_from(data, pos)
    pos += _GRAPH_HEADER.size
    if version != GRAPH_VERSION:
        raise GraphFormatError(f"{path}: graph version {version}, expected {GRAPH_VERSION}")
    if n != len(vocab) or n_sources != membership.n_sources:
        raise GraphFormatError(f"{path}: graph is {n} words x {n_sources} sources, vocabulary does not match")

    lists = []
    for s in range(n_sources):
        name_len, width = struct.unpack_from("<II", data, pos)
        pos += 8
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name != membership.names[s]:
            raise GraphFormatError(f"{path}: source {s} is '{name}', expected '{membership.names[s]}'")
        rows = np.frombuffer(data, dtype="<i8", count=n * width, offset=pos).reshape(n, width).astype(np.int64)
        pos += 8 * n * width
        rows.setflags(write=False)
        lists.append(rows)

    return NeighbourhoodGraph(
        k=int(k), include_self=bool(include_self), vocab=vocab, membership=membership, lists=tuple(lists)
    )


def dump_graph_text(graph: NeighbourhoodGraph, path) -> None:
    """One line per (word, source): "word<TAB>source<TAB>nb1 nb2 ..."."""
    words = graph.vocab.words

    def write(tmp: Path) -> None:
        with open(tmp, "w", encoding="utf-8", errors="surrogateescape", newline="\n") as f:
            for v, word in enumerate(words):
                for s, name in enumerate(graph.names):
                    if graph.membership.rows[s, v] < 0:
                        continue
                    nbs = " ".join(words[u] for u in graph.source_neighbours(s, v).tolist())
                    f.write(f"{word}\t{name}\t{nbs}\n")

    atomic_writer(path, write)
