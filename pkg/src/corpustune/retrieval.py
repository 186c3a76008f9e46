"""Exact top-K retrieval over embedded chunks.

The index is a build-once, read-many structure: a float32 vector per chunk,
rows sorted by ascending chunk_id so that the stable distance sort breaks
ties by chunk_id without consulting the strings again. Scans run shard by
shard in a fixed order (optionally in parallel threads) and merge
deterministically, so results never depend on scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Chunk
from .errors import (
    CorpustuneError,
    IndexBuildError,
    PreconditionError,
    UnembeddableTextError,
    DegenerateEmbeddingError,
)
from .io_utils import dumps_canonical, read_binary_with_header, write_binary_with_header

_INDEX_MAGIC = b"CTIX"
_INDEX_VERSION = 1

_SHARD_ROWS = 65536


@dataclass(frozen=True)
class RetrievalResult:
    chunk_id: str
    rank: int  # 1-based
    distance: float


class ChunkIndex:
    """Immutable vector index over a chunk set under one model version."""

    def __init__(self, model, chunk_ids: Sequence[str], vectors: np.ndarray,
                 doc_of: Mapping[str, str], fold_of_doc: Mapping[str, str] | None = None,
                 warnings: Sequence[str] = (), scan_workers: int = 1):
        order = sorted(range(len(chunk_ids)), key=lambda i: chunk_ids[i])
        self.model = model
        self.chunk_ids = [chunk_ids[i] for i in order]
        self.vectors = np.ascontiguousarray(vectors[order], dtype=np.float32)
        self.doc_of = dict(doc_of)
        self.fold_of_doc = dict(fold_of_doc) if fold_of_doc else {}
        self.warnings = list(warnings)
        self.scan_workers = scan_workers
        self._doc_rows: dict[str, np.ndarray] = {}
        for row, cid in enumerate(self.chunk_ids):
            doc = self.doc_of.get(cid)
            self._doc_rows.setdefault(doc, []).append(row)  # type: ignore[arg-type]
        self._doc_rows = {d: np.asarray(rows, dtype=np.int64)
                          for d, rows in self._doc_rows.items()}
        self._row_of = {cid: row for row, cid in enumerate(self.chunk_ids)}
        self._row_fold = np.array(
            [self.fold_of_doc.get(self.doc_of.get(cid, ""), "") for cid in self.chunk_ids],
            dtype=object,
        )

    def __len__(self) -> int:
        return len(self.chunk_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def query_vector(self, q) -> np.ndarray:
        text = getattr(q, "text", q)
        return self.model.embed(text)

    def vectors_for(self, chunk_ids: Sequence[str]) -> np.ndarray:
        try:
            rows = [self._row_of[cid] for cid in chunk_ids]
        except KeyError as exc:
            raise CorpustuneError(f"chunk {exc.args[0]!r} not in index") from exc
        return self.vectors[np.asarray(rows, dtype=np.int64)]

    def distances(self, query_vec: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Cosine distances (float64) of the query to the given rows."""
        qv = query_vec.astype(np.float64)
        mat = self.vectors if rows is None else self.vectors[rows]
        if mat.shape[0] <= _SHARD_ROWS or self.scan_workers <= 1:
            return 1.0 - mat.astype(np.float64) @ qv
        shards = [mat[ofs:ofs + _SHARD_ROWS] for ofs in range(0, mat.shape[0], _SHARD_ROWS)]
        with ThreadPoolExecutor(max_workers=self.scan_workers) as pool:
            parts = list(pool.map(lambda shard: 1.0 - shard.astype(np.float64) @ qv, shards))
        return np.concatenate(parts)

    def save(self, path: str | Path) -> None:
        header = {"model": self.model.tag if self.model is not None else "",
                  "dim": int(self.dim), "count": len(self)}
        write_binary_with_header(
            path, _INDEX_MAGIC, _INDEX_VERSION, header,
            [self.vectors.astype("<f4").tobytes(),
             dumps_canonical(self.chunk_ids).encode("utf-8")],
        )

    @classmethod
    def load(cls, path: str | Path, model, doc_of: Mapping[str, str],
             fold_of_doc: Mapping[str, str] | None = None) -> "ChunkIndex":
        header, payload = read_binary_with_header(path, _INDEX_MAGIC, _INDEX_VERSION)
        if model is not None and model.tag != header["model"]:
            raise PreconditionError(
                f"index built with {header['model']!r}, got model {model.tag!r}")
        count, dim = header["count"], header["dim"]
        vec_bytes = count * dim * 4
        vectors = np.frombuffer(payload[:vec_bytes], dtype="<f4").reshape(count, dim).copy()
        chunk_ids = json.loads(payload[vec_bytes:].decode("utf-8"))
        return cls(model=model, chunk_ids=chunk_ids, vectors=vectors,
                   doc_of=doc_of, fold_of_doc=fold_of_doc)


def build_index(model, chunks: Sequence[Chunk],
                fold_of_doc: Mapping[str, str] | None = None,
                max_unembeddable: float = 0.01,
                batch_size: int = 1024,
                scan_workers: int = 1) -> ChunkIndex:
    """Embed all chunks under ``model``. Chunks whose text cannot be embedded
    are excluded and listed in ``index.warnings``; more than
    ``max_unembeddable`` of them fails the build.
    """
    if not chunks:
        raise PreconditionError("cannot build an index over zero chunks")
    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    kept_ids: list[str] = []
    failed: list[str] = []
    rows: list[np.ndarray] = []
    for ofs in range(0, len(ordered), batch_size):
        batch = ordered[ofs:ofs + batch_size]
        try:
            rows.append(model.embed_many([c.text for c in batch]))
            kept_ids.extend(c.chunk_id for c in batch)
        except (UnembeddableTextError, DegenerateEmbeddingError):
            for c in batch:  # isolate the bad chunks
                try:
                    rows.append(model.embed_many([c.text]))
                    kept_ids.append(c.chunk_id)
                except (UnembeddableTextError, DegenerateEmbeddingError):
                    failed.append(c.chunk_id)
    if len(failed) > max_unembeddable * len(ordered):
        raise IndexBuildError(
            f"{len(failed)}/{len(ordered)} chunks unembeddable "
            f"(limit {max_unembeddable:.0%})")
    if not kept_ids:
        raise IndexBuildError("every chunk failed to embed")
    vectors = np.vstack(rows)
    doc_of = {c.chunk_id: c.doc_id for c in ordered}
    return ChunkIndex(model=model, chunk_ids=kept_ids, vectors=vectors,
                      doc_of=doc_of, fold_of_doc=fold_of_doc,
                      warnings=sorted(failed), scan_workers=scan_workers)


def _results_from_rows(index: ChunkIndex, rows: np.ndarray,
                       dists: np.ndarray, k: int) -> list[RetrievalResult]:
    # stable sort on distance; row order is ascending chunk_id, which is the
    # declared tie-break
    order = np.argsort(dists, kind="stable")[:k]
    return [
        RetrievalResult(chunk_id=index.chunk_ids[int(rows[j])], rank=i + 1,
                        distance=float(dists[j]))
        for i, j in enumerate(order)
    ]


def top_k_corpus(index: ChunkIndex, q, k: int,
                 fold_filter: str | Iterable[str] | None = None) -> list[RetrievalResult]:
    """Exact top-k over the whole index, optionally restricted to folds."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    if isinstance(fold_filter, str):
        fold_filter = {fold_filter}
    if fold_filter is None:
        rows = np.arange(len(index), dtype=np.int64)
    else:
        mask = np.isin(index._row_fold, list(fold_filter))
        rows = np.flatnonzero(mask)
    if rows.size == 0:
        return []
    dists = index.distances(index.query_vector(q), rows if fold_filter is not None else None)
    return _results_from_rows(index, rows, dists, k)


def top_k_within_doc(index: ChunkIndex, q, doc_id: str, k: int) -> list[RetrievalResult]:
    """Exact top-k restricted to one document's chunks."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    rows = index._doc_rows.get(doc_id)
    if rows is None:
        raise CorpustuneError(f"unknown doc_id {doc_id!r}")
    dists = index.distances(index.query_vector(q), rows)
    return _results_from_rows(index, rows, dists, k)


def docs_of(results: Iterable[RetrievalResult], doc_of: Mapping[str, str]) -> set[str]:
    """Parent documents of a result list."""
    return {doc_of[r.chunk_id] for r in results}
