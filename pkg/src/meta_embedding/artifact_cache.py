"""
Artifact Cache Module

Content-addressed on-disk cache for pipeline intermediates (normalised source
tables, neighbour graphs, weights, meta-embeddings).

Layout:
    <root>/<stage>-<key><suffix>        # the artifact
    <root>/<stage>-<key><suffix>.json   # sidecar: {stage, key, digest, params}

Keys are SHA-256 digests of the stage name, its parameters and the keys (or
file digests) of everything upstream, so any upstream change produces a new
key. The sidecar digest is re-checked on every lookup; a mismatch means the
artifact was truncated or edited and the entry is treated as a miss.
"""

import os
import json
import hashlib
import tempfile
import threading
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

logger = logging.getLogger(__name__)

_CHUNK = 1 << 20


def content_digest(path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(_CHUNK)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def cache_key(stage: str, params: Dict[str, Any], upstream: Optional[list] = None) -> str:
    """
    Derive a cache key from a stage name, its parameters and upstream keys.

    Args:
        stage: Stage name (e.g. "knn")
        params: JSON-serialisable parameters of the stage
        upstream: Keys or file digests the stage depends on, in order

    Returns:
        64-char hex key
    """
    payload = {"stage": stage, "params": params, "upstream": list(upstream or [])}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes through a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_writer(path, write: Callable[[Path], None]) -> None:
    """
    Run ``write(tmp_path)`` against a temp file and rename it onto ``path``.

    For writers that need a real filename (numpy ``tofile`` and friends).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ArtifactCache:
    """
    Thread-safe on-disk artifact cache.

    Features:
    - Thread-safe bookkeeping using threading.RLock
    - Atomic writes (temp file + rename)
    - Digest verification on lookup, stale entries invalidated
    - Hit/miss statistics for reports and tests
    """

    def __init__(self, root):
        """
        Initialize the cache.

        Args:
            root: Directory holding artifacts (created on first store)
        """
        self.root = Path(root)
        self._lock = threading.RLock()
        self._hits = 0
        self._misses = 0
        self._stale = 0
        logger.info(f"[ArtifactCache] initialized at {self.root}")

    def path_for(self, stage: str, key: str, suffix: str = ".bin") -> Path:
        return self.root / f"{stage}-{key}{suffix}"

    def _sidecar(self, path: Path) -> Path:
        return path.with_name(path.name + ".json")

    def lookup(self, stage: str, key: str, suffix: str = ".bin") -> Optional[Path]:
        """
        Return the artifact path if present and intact, None otherwise.

        Args:
            stage: Stage name
            key: Cache key from cache_key()
            suffix: Artifact file suffix

        Returns:
            Path of the cached artifact, or None on a miss
        """
        path = self.path_for(stage, key, suffix)
        sidecar = self._sidecar(path)
        with self._lock:
            if not path.exists() or not sidecar.exists():
                self._misses += 1
                logger.debug(f"[ArtifactCache] miss {stage}:{key[:12]}")
                return None

            try:
                meta = json.loads(sidecar.read_text(encoding="utf-8"))
            except (OSError, ValueError) as e:
                logger.warning(f"[ArtifactCache] unreadable sidecar {sidecar}: {e}")
                meta = {}

            if meta.get("digest") != content_digest(path):
                logger.warning(
                    f"[ArtifactCache] stale artifact {path.name} (digest mismatch), recomputing"
                )
                self._stale += 1
                self._misses += 1
                self.invalidate(stage, key, suffix)
                return None

            self._hits += 1
            logger.info(f"[ArtifactCache] ✓ hit {stage}:{key[:12]}")
            return path

    def store(
        self,
        stage: str,
        key: str,
        writer: Callable[[Path], None],
        suffix: str = ".bin",
        params: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """
        Write an artifact atomically and record its sidecar.

        Args:
            stage: Stage name
            key: Cache key
            writer: Callable writing the artifact to the path it is given
            suffix: Artifact file suffix
            params: Stage parameters recorded in the sidecar for inspection

        Returns:
            Final artifact path
        """
        path = self.path_for(stage, key, suffix)
        with self._lock:
            atomic_writer(path, writer)
            meta = {
                "stage": stage,
                "key": key,
                "digest": content_digest(path),
                "params": params or {},
            }
            atomic_write_text(
                self._sidecar(path),
                json.dumps(meta, sort_keys=True, indent=2, default=str),
            )
            logger.debug(f"[ArtifactCache] stored {path.name}")
            return path

    def invalidate(self, stage: str, key: str, suffix: str = ".bin") -> bool:
        """
        Remove a specific entry.

        Returns:
            True if anything was removed
        """
        path = self.path_for(stage, key, suffix)
        removed = False
        with self._lock:
            for p in (path, self._sidecar(path)):
                if p.exists():
                    p.unlink()
                    removed = True
        if removed:
            logger.debug(f"[ArtifactCache] invalidated {path.name}")
        return removed

    def clear_all(self) -> int:
        """
        Remove every cached artifact.

        Returns:
            Number of artifacts removed
        """
        count = 0
        with self._lock:
            if not self.root.exists():
                return 0
            for p in self.root.iterdir():
                if p.is_file():
                    if not p.name.endswith(".json"):
                        count += 1
                    p.unlink()
        logger.info(f"[ArtifactCache] cleared all entries ({count} removed)")
        return count

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            entries = 0
            if self.root.exists():
                entries = sum(
                    1 for p in self.root.iterdir()
                    if p.is_file() and not p.name.endswith(".json") and not p.name.startswith(".")
                )
            return {
                "hits": self._hits,
                "misses": self._misses,
                "stale": self._stale,
                "entries": entries,
                "root": str(self.root),
            }
