"""Cosine-similarity vector index with exact and partitioned (IVF) backends."""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

NORM_TOL = 1e-6
KMEANS_MAX_ITER = 20


class VectorIndexError(ValueError):
    pass


class IndexFileError(VectorIndexError):
    pass


class IndexVersionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SearchResult:
    table_id: str
    score: float
    rank: int

    def to_json(self) -> dict:
        return {"table_id": self.table_id, "score": self.score, "rank": self.rank}


@dataclass(frozen=True)
class Backend:
    kind: str = "exact"
    num_lists: int | None = None
    probes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "partitioned"):
            raise ValueError(f"unknown backend {self.kind!r}")

    @classmethod
    def partitioned(cls, num_lists=None, probes=None, seed=0) -> "Backend":
        return cls("partitioned", num_lists, probes, seed)


class VectorIndex:
    """Immutable after construction; ``search`` is safe to call from many threads."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray, backend: Backend = Backend(),
                 encoder_version: int = 0, corpus_hash: str = "",
                 centroids: np.ndarray | None = None, assignments: np.ndarray | None = None):
        self.ids = tuple(ids)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self.matrix.flags.writeable = False
        self.backend = backend
        self.encoder_version = encoder_version
        self.corpus_hash = corpus_hash
        self._scoring = self.matrix.astype(np.float64)
        # rank of each id in ascending string order, for tie-breaking
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self.centroids = centroids
        self.assignments = assignments
        self._lists = None
        if backend.kind == "partitioned":
            self._lists = [np.flatnonzero(assignments == c) for c in range(len(centroids))]

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_lists(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    @property
    def probes(self) -> int:
        if self.backend.kind != "partitioned":
            return 0
        return min(self.num_lists, self.backend.probes or math.ceil(self.num_lists / 4))

    def _rank_rows(self, rows: np.ndarray, scores: np.ndarray, n: int) -> list[SearchResult]:
        if n < len(rows):
            # keep everything tied with the n-th best score so tie-breaking stays exact
            kth = np.partition(scores, len(scores) - n)[len(scores) - n]
            mask = scores >= kth
            rows, scores = rows[mask], scores[mask]
        order = np.lexsort((self._id_rank[rows], -scores))[:n]
        return [SearchResult(self.ids[rows[i]], float(scores[i]), r + 1) for r, i in enumerate(order)]

    def search(self, q_emb, n: int) -> list[SearchResult]:
        if len(self.ids) == 0:
            raise VectorIndexError("index is empty")
        if n < 1:
            raise ValueError("n must be >= 1")
        q = np.asarray(q_emb, dtype=np.float32).astype(np.float64)
        if q.shape != (self.dim,):
            raise VectorIndexError(f"query dimension {q.shape} != index dimension {self.dim}")
        if self.backend.kind == "exact":
            rows = np.arange(len(self.ids))
        else:
            c_scores = self.centroids.astype(np.float64) @ q
            probe = np.lexsort((np.arange(len(c_scores)), -c_scores))[: self.probes]
            rows = np.sort(np.concatenate([self._lists[c] for c in probe]))
            if len(rows) == 0:
                return []
        scores = self._scoring[rows] @ q
        return self._rank_rows(rows, scores, n)


def _spherical_kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER):
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(len(x), size=k, replace=False)].copy()
    assign = np.full(len(x), -1)
    for _ in range(max_iter):
        new_assign = np.argmax(x @ centroids.T, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = x[assign == c]
            if len(members):
                s = members.sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 0:
                    centroids[c] = s / norm
    assign = np.argmax(x @ centroids.T, axis=1)
    return centroids, assign


def build(embeddings: Sequence[tuple[str, np.ndarray]], backend: Backend = Backend(),
          encoder_version: int = 0, corpus_hash: str = "") -> VectorIndex:
    if not embeddings:
        raise VectorIndexError("cannot build an index from no vectors")
    ids, seen = [], set()
    for tid, _ in embeddings:
        if tid in seen:
            raise VectorIndexError(f"duplicate table_id {tid!r}")
        seen.add(tid)
        ids.append(tid)
    dims = {np.shape(v) for _, v in embeddings}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise VectorIndexError(f"inconsistent embedding dimensions {sorted(dims)}")
    matrix = np.stack([np.asarray(v, dtype=np.float64) for _, v in embeddings])
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if len(bad):
        raise VectorIndexError(f"vector for {ids[bad[0]]!r} is not unit norm (|v| = {norms[bad[0]]:.8f})")
    if backend.kind == "exact":
        return VectorIndex(ids, matrix, backend, encoder_version, corpus_hash)
    num_lists = min(len(ids), backend.num_lists or math.ceil(math.sqrt(len(ids))))
    centroids, assign = _spherical_kmeans(matrix.astype(np.float32).astype(np.float64),
                                          num_lists, backend.seed)
    backend = Backend("partitioned", num_lists, backend.probes or math.ceil(num_lists / 4), backend.seed)
    return VectorIndex(ids, matrix, backend, encoder_version, corpus_hash,
                       centroids.astype(np.float32), assign.astype(np.int32))


# file layout: magic, format version, backend tag, encoder version, n, d,
# corpus hash (64 hex chars), id table (u32 length + utf-8 each), float32
# matrix, [num_lists, probes, seed, centroids, assignments], sha256
_MAGIC = b"TSIDX\x00"
_FORMAT = 1
_HEADER = struct.Struct("<6sIBqII64s")
_PART = struct.Struct("<IIq")


def save(index: VectorIndex, path: str | Path) -> None:
    tag = 0 if index.backend.kind == "exact" else 1
    chunks = [_HEADER.pack(_MAGIC, _FORMAT, tag, index.encoder_version, len(index), index.dim,
                           index.corpus_hash.encode("ascii").ljust(64, b"\0")[:64])]
    for tid in index.ids:
        raw = tid.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
    chunks.append(index.matrix.astype("<f4").tobytes())
    if tag == 1:
        chunks.append(_PART.pack(index.num_lists, index.probes, index.backend.seed))
        chunks.append(index.centroids.astype("<f4").tobytes())
        chunks.append(index.assignments.astype("<i4").tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load(path: str | Path, expected_encoder_version: int | None = None) -> VectorIndex:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"index file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 32:
        raise IndexFileError(f"{path}: checksum failure (file truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IndexFileError(f"{path}: checksum failure")
    magic, fmt, tag, enc_version, n, d, chash = _HEADER.unpack_from(body)
    if magic != _MAGIC:
        raise IndexFileError(f"{path}: not an index file")
    if fmt != _FORMAT:
        raise IndexFileError(f"{path}: unsupported index format version {fmt}")
    off = _HEADER.size
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", body, off)
        off += 4
        ids.append(body[off:off + length].decode("utf-8"))
        off += length
    matrix = np.frombuffer(body, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    backend, centroids, assign = Backend(), None, None
    if tag == 1:
        num_lists, probes, seed = _PART.unpack_from(body, off)
        off += _PART.size
        centroids = np.frombuffer(body, dtype="<f4", count=num_lists * d, offset=off).reshape(num_lists, d)
        off += 4 * num_lists * d
        assign = np.frombuffer(body, dtype="<i4", count=n, offset=off)
        off += 4 * n
        backend = Backend("partitioned", num_lists, probes, seed)
    if off != len(body):
        raise IndexFileError(f"{path}: unexpected trailing bytes")
    if expected_encoder_version is not None and expected_encoder_version != enc_version:
        warnings.warn(f"index built with encoder version {enc_version}, "
                      f"loaded against parameters version {expected_encoder_version}",
                      IndexVersionWarning, stacklevel=2)
    return VectorIndex(ids, matrix, backend, enc_version, chash.rstrip(b"\0").decode("ascii"),
                       centroids, assign)
