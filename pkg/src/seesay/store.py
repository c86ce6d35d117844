"""Persistent observation store with exact embedding-based retrieval.

Observations (description, optional image, annotations, embedding) live in
memory and, when the store is attached to a directory, in an append-only
JSON Lines log plus content-addressed image files. Retrieval is an exact
linear scan over cosine similarity: correctness over speed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding import is_zero_vector

logger = logging.getLogger(__name__)

LOG_FILENAME = "observations.jsonl"
IMAGES_DIRNAME = "images"

# Stored non-zero embeddings must be unit length to within this bound.
NORM_TOLERANCE = 1e-9

_RECORD_FIELDS = ("id", "timestamp_ms", "image_ref", "description", "annotations", "embedding")


class StoreError(Exception):
    """Base class for store failures."""


class DimensionMismatchError(StoreError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"embedding dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class EmptyStoreError(StoreError):
    """Raised when an operation needs at least one observation."""


class StaleAnnotationError(StoreError):
    """The expected annotation target is no longer the latest observation."""


class CorruptLogError(StoreError):
    def __init__(self, path: Path, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: corrupt observation record: {reason}")
        self.path = path
        self.line_number = line_number
        self.reason = reason


@dataclass(frozen=True)
class Observation:
    """One remembered moment of the wearer's environment."""

    id: int
    timestamp_ms: int
    image_ref: str | None
    description: str
    annotations: tuple[str, ...]
    embedding: np.ndarray

    @property
    def pending(self) -> bool:
        """True when the description never arrived (zero embedding placeholder)."""
        return is_zero_vector(self.embedding)

    def combined_text(self) -> str:
        """Description plus annotations, the text the embedding corresponds to."""
        return " ".join([self.description, *self.annotations])


@dataclass(frozen=True)
class RetrievalHit:
    observation_id: int
    score: float


def content_digest(data: bytes) -> str:
    """SHA-256 hex digest used to content-address image bytes."""
    return hashlib.sha256(data).hexdigest()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, 0.0 if either is all-zero.

    Result is clamped to [-1, 1] so float rounding never leaks out of range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(a.shape[0] if a.ndim else 0, b.shape[0] if b.ndim else 0)
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


class _ReadWriteLock:
    """Many concurrent readers, one exclusive writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class MemoryStore:
    """Observation store shared between the ingestion and query paths.

    Construct detached for a purely in-memory store, or via :meth:`load` to
    attach to a directory where every mutation is appended to the log as it
    happens. Annotations append a full superseding record for the same id;
    the last record per id wins at load time.
    """

    def __init__(self, dim: int = 256, directory: str | Path | None = None):
        if dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self._lock = _ReadWriteLock()
        self._observations: dict[int, Observation] = {}
        self._images: dict[str, bytes] = {}
        self._next_id = 1
        self._directory: Path | None = None
        if directory is not None:
            self._attach(Path(directory))

    # ------------------------------------------------------------------
    # Construction / persistence

    @classmethod
    def load(cls, directory: str | Path, dim: int = 256) -> "MemoryStore":
        """Open a store attached to ``directory``, reading any existing log.

        A missing log means an empty store. A corrupt record aborts the load,
        except for a partial final line (crash artifact), which is skipped
        with a warning. Ids continue from the largest persisted id.
        """
        store = cls(dim=dim)
        store._attach(Path(directory), read_existing=True)
        return store

    def _attach(self, directory: Path, read_existing: bool = True) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / IMAGES_DIRNAME).mkdir(exist_ok=True)
        log_path = directory / LOG_FILENAME
        if read_existing and log_path.exists():
            records = _read_log(log_path, self.dim)
            for record in records.values():
                self._observations[record.id] = record
            self._observations = dict(sorted(self._observations.items()))
            if self._observations:
                self._next_id = max(self._observations) + 1
        self._directory = directory

    def persist(self, directory: str | Path) -> None:
        """Write the full store contents to ``directory``.

        The log is rewritten atomically (temp file + rename) and every image
        currently known is written content-addressed. Writes are excluded
        while persisting; concurrent reads proceed.
        """
        directory = Path(directory)
        with self._lock.read():
            directory.mkdir(parents=True, exist_ok=True)
            images_dir = directory / IMAGES_DIRNAME
            images_dir.mkdir(exist_ok=True)
            for obs in self._observations.values():
                if obs.image_ref is not None:
                    data = self._image_bytes_locked(obs.image_ref)
                    if data is not None:
                        target = images_dir / obs.image_ref
                        if not target.exists():
                            target.write_bytes(data)
            log_path = directory / LOG_FILENAME
            tmp_path = log_path.with_suffix(".jsonl.tmp")
            with tmp_path.open("w", encoding="utf-8") as fh:
                for obs in self._observations.values():
                    fh.write(_encode_record(obs) + "\n")
            tmp_path.replace(log_path)

    @property
    def directory(self) -> Path | None:
        return self._directory

    # ------------------------------------------------------------------
    # Mutations

    def insert(
        self,
        description: str,
        image_bytes: bytes | None,
        timestamp_ms: int,
        embedding: np.ndarray,
    ) -> int:
        """Append a new observation, returning its id."""
        embedding = self._checked_embedding(embedding)
        with self._lock.write():
            obs_id = self._next_id
            image_ref = None
            if image_bytes is not None:
                image_ref = content_digest(image_bytes)
            obs = Observation(
                id=obs_id,
                timestamp_ms=int(timestamp_ms),
                image_ref=image_ref,
                description=description,
                annotations=(),
                embedding=embedding,
            )
            # Disk first: a failed write must leave the store unchanged.
            if image_bytes is not None:
                self._write_image(image_ref, image_bytes)
            self._append_record(obs)
            if image_bytes is not None:
                self._images[image_ref] = bytes(image_bytes)
            self._observations[obs_id] = obs
            self._next_id += 1
            return obs_id

    def annotate_latest(
        self, text: str, new_embedding: np.ndarray, expected_id: int | None = None
    ) -> Observation:
        """Append annotation text to the newest observation and swap its embedding.

        Pass ``expected_id`` to guard against a racing insert: if the latest
        observation is no longer the one the embedding was computed for, the
        call fails with StaleAnnotationError instead of corrupting it.
        """
        new_embedding = self._checked_embedding(new_embedding)
        with self._lock.write():
            if not self._observations:
                raise EmptyStoreError("nothing to annotate: store is empty")
            obs_id = max(self._observations)
            if expected_id is not None and obs_id != expected_id:
                raise StaleAnnotationError(
                    f"latest observation is {obs_id}, expected {expected_id}"
                )
            old = self._observations[obs_id]
            updated = replace(
                old,
                annotations=old.annotations + (text,),
                embedding=new_embedding,
            )
            self._append_record(updated)
            self._observations[obs_id] = updated
            return updated

    # ------------------------------------------------------------------
    # Queries

    def latest(self) -> Observation | None:
        with self._lock.read():
            if not self._observations:
                return None
            return self._observations[max(self._observations)]

    def get(self, observation_id: int) -> Observation | None:
        with self._lock.read():
            return self._observations.get(observation_id)

    def recent(self, limit: int | None = None) -> list[Observation]:
        """Observations newest-first, optionally capped at ``limit``."""
        with self._lock.read():
            ordered = [self._observations[k] for k in sorted(self._observations, reverse=True)]
        if limit is not None:
            ordered = ordered[:limit]
        return ordered

    def __len__(self) -> int:
        with self._lock.read():
            return len(self._observations)

    def retrieve_top_k(self, query: np.ndarray, k: int) -> list[RetrievalHit]:
        """Exact top-k retrieval by cosine similarity.

        A zero query returns no hits, and observations flagged with a zero
        embedding (description pending) are never candidates. Ties break
        toward the larger (newer) observation id.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise DimensionMismatchError(self.dim, int(query.size))
        query_norm = float(np.linalg.norm(query))
        if query_norm == 0.0:
            return []
        with self._lock.read():
            candidates = [o for o in self._observations.values() if not o.pending]
            if not candidates:
                return []
            matrix = np.vstack([o.embedding for o in candidates])
            ids = [o.id for o in candidates]
        scores = np.clip(matrix @ (query / query_norm), -1.0, 1.0)
        ranked = sorted(zip(scores, ids), key=lambda pair: (-pair[0], -pair[1]))
        return [RetrievalHit(observation_id=i, score=float(s)) for s, i in ranked[:k]]

    def image_bytes(self, image_ref: str) -> bytes | None:
        """Raw bytes for a content-addressed image, or None if unknown."""
        with self._lock.read():
            return self._image_bytes_locked(image_ref)

    # ------------------------------------------------------------------
    # Internals

    def _checked_embedding(self, embedding: np.ndarray) -> np.ndarray:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.dim,):
            raise DimensionMismatchError(self.dim, int(embedding.size))
        norm = float(np.linalg.norm(embedding))
        if norm != 0.0 and abs(norm - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"embedding must be L2-normalized or all-zero, norm={norm!r}")
        return embedding.copy()

    def _image_bytes_locked(self, image_ref: str) -> bytes | None:
        data = self._images.get(image_ref)
        if data is not None:
            return data
        if self._directory is not None:
            path = self._directory / IMAGES_DIRNAME / image_ref
            if path.exists():
                data = path.read_bytes()
                self._images[image_ref] = data
                return data
        return None

    def _write_image(self, image_ref: str, data: bytes) -> None:
        if self._directory is None:
            return
        path = self._directory / IMAGES_DIRNAME / image_ref
        if not path.exists():  # content-addressed: identical bytes already stored
            path.write_bytes(data)

    def _append_record(self, obs: Observation) -> None:
        if self._directory is None:
            return
        path = self._directory / LOG_FILENAME
        with path.open("a", encoding="utf-8") as fh:
            fh.write(_encode_record(obs) + "\n")
            fh.flush()


def _encode_record(obs: Observation) -> str:
    record = {
        "id": obs.id,
        "timestamp_ms": obs.timestamp_ms,
        "image_ref": obs.image_ref,
        "description": obs.description,
        "annotations": list(obs.annotations),
        "embedding": [float(x) for x in obs.embedding],
    }
    return json.dumps(record, ensure_ascii=False)


def _decode_record(line: str, dim: int) -> Observation:
    data = json.loads(line)
    if not isinstance(data, dict):
        raise ValueError("record is not an object")
    missing = [f for f in _RECORD_FIELDS if f not in data]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    embedding = np.asarray(data["embedding"], dtype=np.float64)
    if embedding.shape != (dim,):
        raise ValueError(f"embedding has length {embedding.size}, store dimension is {dim}")
    obs_id = data["id"]
    if not isinstance(obs_id, int) or obs_id < 1:
        raise ValueError(f"invalid id: {obs_id!r}")
    image_ref = data["image_ref"]
    if image_ref is not None and not isinstance(image_ref, str):
        raise ValueError("image_ref must be a string or null")
    if not isinstance(data["description"], str):
        raise ValueError("description must be a string")
    annotations = data["annotations"]
    if not isinstance(annotations, list) or any(not isinstance(a, str) for a in annotations):
        raise ValueError("annotations must be an array of strings")
    return Observation(
        id=obs_id,
        timestamp_ms=int(data["timestamp_ms"]),
        image_ref=image_ref,
        description=data["description"],
        annotations=tuple(annotations),
        embedding=embedding,
    )


def _read_log(path: Path, dim: int) -> dict[int, Observation]:
    """Parse the observation log, last record per id winning.

    A partial final line (no terminating newline, or a final line that does
    not parse) is treated as a crash artifact: skipped with a warning. Any
    earlier bad line is a hard error naming the line number.
    """
    raw = path.read_bytes()
    records: dict[int, Observation] = {}
    lines = raw.split(b"\n")
    # A trailing newline produces one empty tail element; its absence means
    # the final line may be a truncated write.
    complete_count = len(lines) - 1
    for index, line_bytes in enumerate(lines):
        is_final_partial = index == complete_count and line_bytes != b""
        if line_bytes.strip() == b"":
            continue
        try:
            line = line_bytes.decode("utf-8")
            obs = _decode_record(line, dim)
        except (ValueError, UnicodeDecodeError) as exc:
            if is_final_partial:
                logger.warning(
                    "%s:%d: skipping partial trailing record (%s)", path, index + 1, exc
                )
                continue
            raise CorruptLogError(path, index + 1, str(exc)) from exc
        records[obs.id] = obs
    return records
