"""Document ingestion, chunking, date-based fold splits, per-class sampling.

Chunking is greedy sentence packing into bounded character spans. The spans
of a document's chunks are disjoint, sorted, and cover the text exactly, so
concatenating chunk texts reproduces the document byte for byte.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import PreconditionError
from .io_utils import read_jsonl, write_jsonl

TRAIN, VAL, TEST = "train", "val", "test"

# A sentence ends at '.', '!' or '?' followed by whitespace, or at a newline
# run. The match includes the trailing whitespace so units cover the text.
_SENTENCE_BOUNDARY = re.compile(r"[.!?]+\s+|\n+")


@dataclass(frozen=True)
class Document:
    doc_id: str
    doc_class: str
    date: date
    text: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    start: int  # half-open character interval [start, end)
    end: int
    text: str


@dataclass
class FoldAssignment:
    """Maps doc_id -> fold, with the per-class split date that produced it."""

    fold_of: dict[str, str]
    split_dates: dict[str, date | None]
    warnings: list[str] = field(default_factory=list)

    def docs_in(self, fold: str) -> set[str]:
        return {d for d, f in self.fold_of.items() if f == fold}


def split_sentences(text: str) -> list[str]:
    """Split into sentence units whose concatenation equals ``text`` exactly."""
    units = []
    prev = 0
    for m in _SENTENCE_BOUNDARY.finditer(text):
        units.append(text[prev:m.end()])
        prev = m.end()
    if prev < len(text):
        units.append(text[prev:])
    return units


def chunk_document(doc: Document, min_len: int = 500, max_len: int = 1000) -> list[Chunk]:
    """Pack sentences greedily into chunks of at most ``max_len`` characters.

    A buffer is flushed when adding the next sentence would push it past
    ``max_len``; a single sentence longer than ``max_len`` becomes its own
    chunk. The final chunk may be shorter than ``min_len``. Character counts
    are scalar characters, not bytes.
    """
    if not (0 < min_len <= max_len):
        raise PreconditionError(f"need max_len >= min_len > 0, got {min_len}..{max_len}")
    if not doc.text:
        return []

    spans: list[tuple[int, int]] = []
    buf_start = 0
    buf_len = 0
    pos = 0
    for unit in split_sentences(doc.text):
        ulen = len(unit)
        if ulen > max_len:
            if buf_len:
                spans.append((buf_start, pos))
            spans.append((pos, pos + ulen))
            buf_start = pos + ulen
            buf_len = 0
        elif buf_len and buf_len + ulen > max_len:
            spans.append((buf_start, pos))
            buf_start = pos
            buf_len = ulen
        else:
            buf_len += ulen
        pos += ulen
    if buf_len:
        spans.append((buf_start, pos))

    return [
        Chunk(
            chunk_id=f"{doc.doc_id}:{start:08d}",
            doc_id=doc.doc_id,
            start=start,
            end=end,
            text=doc.text[start:end],
        )
        for start, end in spans
    ]


def assign_folds(
    docs: Sequence[Document],
    test_start: date,
    val_fraction_target: float = 0.30,
    chunk_counts: Mapping[str, int] | None = None,
) -> FoldAssignment:
    """Assign folds: docs dated >= ``test_start`` go to test; the rest are
    split per class at the latest date giving a validation share of at least
    ``val_fraction_target``.

    The share is measured in chunks when ``chunk_counts`` is given (doc_id ->
    chunk count), otherwise each document counts as one unit. A class where no
    split leaves both sides non-empty is assigned entirely to train, with a
    warning.
    """
    if not docs:
        raise PreconditionError("no documents to assign")
    if not (0.0 < val_fraction_target < 1.0):
        raise PreconditionError("val_fraction_target must be in (0, 1)")

    def weight(doc_id: str) -> int:
        if chunk_counts is None:
            return 1
        return max(1, int(chunk_counts.get(doc_id, 1)))

    fold_of: dict[str, str] = {}
    split_dates: dict[str, date | None] = {}
    warnings: list[str] = []

    by_class: dict[str, list[Document]] = {}
    for doc in docs:
        by_class.setdefault(doc.doc_class, []).append(doc)

    for cls in sorted(by_class):
        members = sorted(by_class[cls], key=lambda d: d.doc_id)
        tv = []
        for doc in members:
            if doc.date >= test_start:
                fold_of[doc.doc_id] = TEST
            else:
                tv.append(doc)

        total = sum(weight(d.doc_id) for d in tv)
        chosen: date | None = None
        # Scan candidate split dates from latest to earliest; the first one
        # meeting the target yields the smallest admissible validation share.
        for candidate in sorted({d.date for d in tv}, reverse=True):
            val_docs = [d for d in tv if d.date >= candidate]
            train_docs = [d for d in tv if d.date < candidate]
            if not val_docs or not train_docs:
                continue
            val_weight = sum(weight(d.doc_id) for d in val_docs)
            if val_weight / total >= val_fraction_target:
                chosen = candidate
                break

        split_dates[cls] = chosen
        if chosen is None:
            if tv:
                warnings.append(f"class {cls}: no admissible split date, all train")
            for doc in tv:
                fold_of[doc.doc_id] = TRAIN
        else:
            for doc in tv:
                fold_of[doc.doc_id] = VAL if doc.date >= chosen else TRAIN

    return FoldAssignment(fold_of=fold_of, split_dates=split_dates, warnings=warnings)


def sample_per_class(
    docs: Sequence[Document],
    target_chunks_per_class: int,
    seed: int,
    chunk_counts: Mapping[str, int] | None = None,
) -> list[str]:
    """Draw documents uniformly without replacement, per class, until the
    cumulative chunk count first reaches ``target_chunks_per_class``.

    Classes smaller than the target are taken whole. Returns the selected
    doc_ids sorted ascending (stable regardless of draw order).
    """
    if target_chunks_per_class <= 0:
        raise PreconditionError("target_chunks_per_class must be positive")

    def weight(doc_id: str) -> int:
        if chunk_counts is None:
            return 1
        return max(0, int(chunk_counts.get(doc_id, 0)))

    by_class: dict[str, list[str]] = {}
    for doc in docs:
        by_class.setdefault(doc.doc_class, []).append(doc.doc_id)

    selected: list[str] = []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        rng = random.Random(f"{seed}/sample/{cls}")
        rng.shuffle(ids)
        acc = 0
        for doc_id in ids:
            selected.append(doc_id)
            acc += weight(doc_id)
            if acc >= target_chunks_per_class:
                break
    return sorted(selected)


def chunk_corpus(docs: Iterable[Document], min_len: int = 500,
                 max_len: int = 1000) -> list[Chunk]:
    """Chunk many documents; output ordered by doc_id then span."""
    chunks: list[Chunk] = []
    for doc in sorted(docs, key=lambda d: d.doc_id):
        chunks.extend(chunk_document(doc, min_len=min_len, max_len=max_len))
    return chunks


# ---------------------------------------------------------------------------
# JSONL formats
# ---------------------------------------------------------------------------

def load_documents(path: str | Path) -> list[Document]:
    """Read documents from JSONL: {"doc_id","class","date":"YYYY-MM-DD","text"}."""
    docs = []
    seen = set()
    for rec in read_jsonl(path):
        doc_id = rec["doc_id"]
        if doc_id in seen:
            raise PreconditionError(f"duplicate doc_id {doc_id!r} in {path}")
        seen.add(doc_id)
        docs.append(Document(
            doc_id=doc_id,
            doc_class=rec["class"],
            date=date.fromisoformat(rec["date"]),
            text=rec["text"],
        ))
    return docs


def save_documents(path: str | Path, docs: Iterable[Document]) -> None:
    write_jsonl(path, (
        {"doc_id": d.doc_id, "class": d.doc_class, "date": d.date.isoformat(),
         "text": d.text}
        for d in sorted(docs, key=lambda d: d.doc_id)
    ))


def save_chunks(path: str | Path, chunks: Iterable[Chunk]) -> None:
    write_jsonl(path, (
        {"chunk_id": c.chunk_id, "doc_id": c.doc_id, "start": c.start,
         "end": c.end, "text": c.text}
        for c in chunks
    ))


def load_chunks(path: str | Path) -> list[Chunk]:
    return [
        Chunk(chunk_id=r["chunk_id"], doc_id=r["doc_id"], start=r["start"],
              end=r["end"], text=r["text"])
        for r in read_jsonl(path)
    ]


def save_folds(path: str | Path, assignment: FoldAssignment) -> None:
    write_jsonl(path, (
        {"doc_id": doc_id, "fold": fold}
        for doc_id, fold in sorted(assignment.fold_of.items())
    ))


def load_folds(path: str | Path) -> dict[str, str]:
    return {r["doc_id"]: r["fold"] for r in read_jsonl(path)}
