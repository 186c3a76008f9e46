"""Judgment-set sampling and contrastive triple extraction.

For a (query, document) pair the chunks sent to the judge are the
within-document top-k plus 2k more drawn from the remaining ranks with
exponentially decaying weights, so nearby-but-not-top chunks are likelier to
be judged than distant ones. Triples pair a fully-relevant chunk with an
irrelevant one from the same document; score-3 chunks are excluded from both
roles.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import TRAIN, VAL
from .embedding import distance
from .errors import PreconditionError
from .io_utils import read_jsonl, stable_seed, write_jsonl
from .retrieval import ChunkIndex, top_k_within_doc
from .teacher import Judgment

logger = logging.getLogger(__name__)

POSITIVE_MIN = 4  # r > 3
NEGATIVE_MAX = 2  # r < 3


@dataclass(frozen=True)
class SamplingParams:
    k: int = 5  # within-doc retrieval depth; judgment set is 3k
    corpus_k: int = 100  # corpus-wide depth for forming the document sample
    omega: float = 0.05  # residual rank decay constant
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.corpus_k < self.k or self.omega < 0:
            raise PreconditionError("need k >= 1, corpus_k >= k, omega >= 0")


@dataclass(frozen=True)
class Triple:
    q_id: str
    pos_chunk_id: str
    neg_chunk_id: str
    doc_id: str
    iteration: int

    def __post_init__(self):
        if self.pos_chunk_id == self.neg_chunk_id:
            raise PreconditionError("positive and negative must differ")

    def to_dict(self, fold: str | None = None) -> dict:
        rec = {"q_id": self.q_id, "pos": self.pos_chunk_id,
               "neg": self.neg_chunk_id, "doc_id": self.doc_id,
               "iteration": self.iteration}
        if fold is not None:
            rec["fold"] = fold
        return rec


def residual_rank_weights(n_residual: int, omega: float) -> np.ndarray:
    """Normalized sampling weights over residual ranks k+1 .. k+n_residual.

    The best residual rank has unnormalized weight exp(0) = 1 and weights
    decay by exp(-omega) per rank, so omega = 0 is uniform.
    """
    if n_residual < 1:
        raise PreconditionError("need at least one residual rank")
    w = np.exp(-omega * np.arange(n_residual, dtype=np.float64))
    return w / w.sum()


def draw_residual_ranks(n_residual: int, omega: float, count: int,
                        rng: np.random.Generator) -> list[int]:
    """Draw ``count`` residual positions (0-based offsets past rank k)
    without replacement, sequentially renormalizing the weights."""
    weights = residual_rank_weights(n_residual, omega).copy()
    available = np.arange(n_residual)
    picks: list[int] = []
    for _ in range(min(count, n_residual)):
        probs = weights / weights.sum()
        j = rng.choice(len(available), p=probs)
        picks.append(int(available[j]))
        available = np.delete(available, j)
        weights = np.delete(weights, j)
    return picks


def sample_judgment_set(index: ChunkIndex, q, doc_id: str,
                        params: SamplingParams) -> list[str]:
    """Chunk ids of one document to send to the judge: the within-doc top-k
    union a rank-weighted draw of 2k from the rest. Documents with at most
    3k chunks are taken whole. Returned sorted by chunk_id."""
    k = params.k
    ranked = top_k_within_doc(index, q, doc_id, k=len(index))
    if len(ranked) <= 3 * k:
        return sorted(r.chunk_id for r in ranked)

    top = ranked[:k]
    residual = ranked[k:]
    q_id = getattr(q, "q_id", str(q))
    rng = np.random.default_rng(stable_seed(params.seed, "judgment-set", q_id, doc_id))
    offsets = draw_residual_ranks(len(residual), params.omega, 2 * k, rng)
    chosen = [residual[o].chunk_id for o in offsets]
    return sorted([r.chunk_id for r in top] + chosen)


def extract_triples(judgments: Iterable[Judgment],
                    doc_of: Mapping[str, str],
                    fold_of_doc: Mapping[str, str],
                    iteration: int) -> dict[str, list[Triple]]:
    """All (positive, negative) pairs per (query, document).

    Positive means r = 4, negative r <= 2; score-3 chunks take neither role.
    Both sides of a triple come from the same document; exact duplicates
    (same q_id/pos/neg) are dropped. Returns {"train": [...], "val": [...]}
    split by the document's fold; judgments on test-fold documents never
    produce triples.
    """
    grouped: dict[tuple[str, str], dict[str, int]] = {}
    for j in judgments:
        doc_id = doc_of.get(j.chunk_id)
        if doc_id is None:
            raise PreconditionError(f"judgment references unknown chunk {j.chunk_id!r}")
        grouped.setdefault((j.q_id, doc_id), {})[j.chunk_id] = j.score

    out: dict[str, list[Triple]] = {TRAIN: [], VAL: []}
    seen: set[tuple[str, str, str]] = set()
    for (q_id, doc_id) in sorted(grouped):
        fold = fold_of_doc.get(doc_id)
        if fold not in (TRAIN, VAL):
            continue
        scores = grouped[(q_id, doc_id)]
        positives = sorted(c for c, s in scores.items() if s >= POSITIVE_MIN)
        negatives = sorted(c for c, s in scores.items() if s <= NEGATIVE_MAX)
        for pos in positives:
            for neg in negatives:
                key = (q_id, pos, neg)
                if key in seen:
                    continue
                seen.add(key)
                out[fold].append(Triple(q_id=q_id, pos_chunk_id=pos,
                                        neg_chunk_id=neg, doc_id=doc_id,
                                        iteration=iteration))
    return out


def add_stability_triples(model, candidate_triples: Sequence[Triple],
                          query_texts: Mapping[str, str],
                          chunk_texts: Mapping[str, str],
                          ratio: float, margin: float = 0.0,
                          seed: int = 0) -> list[Triple]:
    """Balance hard triples with already-satisfied ones.

    Candidates are split by the current model into violated (the margin is
    not met) and satisfied. All violated triples are kept; satisfied ones are
    sampled (seeded) so that satisfied:violated is about ``ratio``. A ratio
    of 0 keeps only the violated triples. If the satisfied pool is smaller
    than requested it is taken whole, with a warning.
    """
    if ratio < 0:
        raise PreconditionError("ratio must be >= 0")
    if not candidate_triples:
        return []

    texts = []
    for t in candidate_triples:
        texts.extend((query_texts[t.q_id], chunk_texts[t.pos_chunk_id],
                      chunk_texts[t.neg_chunk_id]))
    vecs = model.embed_many(texts)
    violated: list[Triple] = []
    satisfied: list[Triple] = []
    for i, t in enumerate(candidate_triples):
        qv, pv, nv = vecs[3 * i], vecs[3 * i + 1], vecs[3 * i + 2]
        if distance(qv, nv) - distance(qv, pv) >= margin:
            satisfied.append(t)
        else:
            violated.append(t)

    want = int(round(ratio * len(violated)))
    if want >= len(satisfied):
        if want > len(satisfied):
            logger.warning("stability pool too small: wanted %d satisfied, have %d",
                           want, len(satisfied))
        sampled = list(satisfied)
    else:
        rng = random.Random(f"{seed}/stability")
        sampled = rng.sample(satisfied, want)

    combined = violated + sampled
    combined.sort(key=lambda t: (t.q_id, t.doc_id, t.pos_chunk_id, t.neg_chunk_id))
    return combined


def save_triples(path: str | Path, triples_by_fold: Mapping[str, Sequence[Triple]]) -> None:
    records = []
    for fold in sorted(triples_by_fold):
        for t in triples_by_fold[fold]:
            records.append(t.to_dict(fold=fold))
    records.sort(key=lambda r: (r["fold"], r["q_id"], r["doc_id"], r["pos"], r["neg"]))
    write_jsonl(path, records)


def load_triples(path: str | Path) -> dict[str, list[Triple]]:
    out: dict[str, list[Triple]] = {}
    for rec in read_jsonl(path):
        out.setdefault(rec["fold"], []).append(Triple(
            q_id=rec["q_id"], pos_chunk_id=rec["pos"], neg_chunk_id=rec["neg"],
            doc_id=rec["doc_id"], iteration=rec["iteration"]))
    return out
