"""Held-out evaluation machinery.

Covers the final-evaluation pipeline (union retrieval across model versions,
two-factor document scoring, adaptive judging with a standard-error stopping
rule), validation-fold metric computation, evidence-span label propagation
for benchmark corpora, promoted/demoted passage extraction, and
difference-vector exports for training-signal analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Chunk
from .errors import DegenerateEffectSizeError, PreconditionError
from .metrics import (
    MetricReport,
    binarize,
    cohens_d_paired,
    dcg_at_k,
    mrr_at_k,
    stderr_and_stop,
)
from .retrieval import ChunkIndex, top_k_corpus, top_k_within_doc
from .teacher import JudgmentCache, QueryRecord, Rubric
from . import teacher as teacher_ops


@dataclass(frozen=True)
class EvalConfig:
    union_k: int = 100  # corpus-wide retrieval depth per model version
    k: int = 5  # metrics cutoff; judgments exist only to this depth
    selection_divisor: int = 4  # top 1/P fraction of documents is evaluated
    similarity_cap: float = 0.5  # cap constant in the relu similarity factor
    promotion_margin: int = 3  # rank-delta margin for promoted/demoted lists
    rel_se_threshold: float = 0.05
    judge_tag: str = "final-eval-judge"

    def __post_init__(self):
        if self.selection_divisor < 1:
            raise PreconditionError("selection divisor must be >= 1")
        if self.similarity_cap <= 0:
            raise PreconditionError("similarity cap must be positive")
        if self.promotion_margin <= 0:
            raise PreconditionError("promotion margin must be positive")


@dataclass(frozen=True)
class DocScore:
    doc_id: str
    hausdorff_factor: float
    similarity_factor: float
    combined: float


@dataclass(frozen=True)
class EvidencePassage:
    doc_id: str
    start: int
    end: int
    q_id: str


def union_test_retrieval(indexes: Sequence[ChunkIndex], q, k: int) -> tuple[set[str], set[str]]:
    """Union of per-model top-k chunk sets, and the parent document set."""
    if not indexes:
        raise PreconditionError("need at least one model index")
    chunk_ids: set[str] = set()
    for index in indexes:
        chunk_ids.update(r.chunk_id for r in top_k_corpus(index, q, k))
    doc_ids = {indexes[0].doc_of[cid] for cid in chunk_ids}
    return chunk_ids, doc_ids


def modified_hausdorff(a_ids: Iterable[str], b_ids: Iterable[str],
                       index: ChunkIndex) -> float:
    """max of the two directed mean-of-minimum cosine distances between the
    vector sets of the given chunk ids (vectors come from ``index``)."""
    a = sorted(set(a_ids))
    b = sorted(set(b_ids))
    if not a or not b:
        raise PreconditionError("modified Hausdorff needs two non-empty sets")
    va = index.vectors_for(a).astype(np.float64)
    vb = index.vectors_for(b).astype(np.float64)
    # clamp unit-norm rounding noise; cosine distance is >= 0 by definition
    dists = np.maximum(1.0 - va @ vb.T, 0.0)
    forward = float(dists.min(axis=1).mean())
    backward = float(dists.min(axis=0).mean())
    return max(forward, backward)


def similarity_factor(q, doc_id: str, index_base: ChunkIndex,
                      index_exp: ChunkIndex, cap: float) -> float:
    """relu(cap - best top-1 within-doc distance across the two versions)."""
    best = min(top_k_within_doc(index_base, q, doc_id, 1)[0].distance,
               top_k_within_doc(index_exp, q, doc_id, 1)[0].distance)
    return max(0.0, cap - best)


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [1.0] * len(values)  # constant factor carries no signal
    return [(v - lo) / (hi - lo) for v in values]


def score_and_select_docs(q, doc_ids: Iterable[str], index_base: ChunkIndex,
                          index_exp: ChunkIndex,
                          config: EvalConfig) -> tuple[list[str], list[DocScore]]:
    """Score candidate documents and keep the top 1/P fraction.

    One factor is the modified Hausdorff distance between the document's
    top-k sets under the two model versions (how much fine-tuning moved the
    ranking); the other is the relu similarity of the best chunk (how likely
    the document is relevant at all). The combined score is the product of
    the min-max normalized factors.
    """
    docs = sorted(set(doc_ids))
    if not docs:
        return [], []
    h_factors, s_factors = [], []
    for doc_id in docs:
        top_base = [r.chunk_id for r in top_k_within_doc(index_base, q, doc_id, config.k)]
        top_exp = [r.chunk_id for r in top_k_within_doc(index_exp, q, doc_id, config.k)]
        h_factors.append(modified_hausdorff(top_base, top_exp, index_base))
        s_factors.append(similarity_factor(q, doc_id, index_base, index_exp,
                                           config.similarity_cap))
    h_norm = _minmax(h_factors)
    s_norm = _minmax(s_factors)
    scores = [
        DocScore(doc_id=d, hausdorff_factor=h, similarity_factor=s,
                 combined=hn * sn)
        for d, h, s, hn, sn in zip(docs, h_factors, s_factors, h_norm, s_norm)
    ]
    keep = math.ceil(len(docs) / config.selection_divisor)
    ranked = sorted(scores, key=lambda s: (-s.combined, s.doc_id))
    return [s.doc_id for s in ranked[:keep]], scores


@dataclass
class PairedReport:
    """Base/experimental metric pairs over one shared unit set."""

    judge_tag: str
    model_base: str
    model_exp: str
    units: list[tuple[str, str]] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    converged: bool = True
    new_judgments: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "judge_tag": self.judge_tag,
            "model_base": self.model_base,
            "model_exp": self.model_exp,
            "count": len(self.units),
            "units": [list(u) for u in self.units],
            "metrics": self.metrics,
            "converged": self.converged,
            "new_judgments": self.new_judgments,
            "flags": sorted(self.flags),
        }


def _unit_metrics(index: ChunkIndex, q: QueryRecord, doc_id: str, k: int,
                  score_of, missing: list) -> tuple[float, float]:
    """Per-(q, d) MRR@k and DCG@k from judged scores; unjudged positions
    count as not relevant and are recorded in ``missing``."""
    labels = []
    for r in top_k_within_doc(index, q, doc_id, k):
        score = score_of(q.q_id, r.chunk_id)
        if score is None:
            missing.append((q.q_id, r.chunk_id))
            labels.append(0)
        else:
            labels.append(binarize(score))
    return mrr_at_k(labels, k), dcg_at_k(labels, k)


def _paired_metric_dict(name: str, k: int, base_vals: list[float],
                        exp_vals: list[float], flags: list[str]) -> dict:
    base = MetricReport(metric=name, k=k, per_unit=base_vals)
    exp = MetricReport(metric=name, k=k, per_unit=exp_vals)
    d = None
    if len(base_vals) >= 2:
        try:
            d = cohens_d_paired(base_vals, exp_vals)
        except DegenerateEffectSizeError:
            flags.append(f"degenerate effect size for {name}")
    exp.cohens_d = d
    return {"base": base.to_dict(), "exp": exp.to_dict(), "cohens_d": d}


def adaptive_evaluate(queries: Sequence[QueryRecord],
                      selected_docs: Mapping[str, Sequence[str]],
                      index_base: ChunkIndex, index_exp: ChunkIndex,
                      teacher, cache: JudgmentCache, rubric: Rubric,
                      chunks_by_id: Mapping[str, Chunk],
                      config: EvalConfig, seed: int = 0,
                      budget=None, max_in_flight: int = 8) -> PairedReport:
    """Judge (query, document) units drawn uniformly without replacement
    until every tracked metric's standard error is below the threshold
    fraction of its mean (at least 2 units), or the pool runs out.

    All judging is cache-aware: a (judge_tag, q_id, chunk_id) pair is never
    sent to the teacher twice, including across the two model versions whose
    top-k sets usually overlap (a unit's pairs are deduplicated before
    dispatch so concurrent requests cannot race on the same pair).
    """
    q_by_id = {q.q_id: q for q in queries}
    pool = sorted((q_id, doc_id) for q_id, docs in selected_docs.items()
                  for doc_id in docs if q_id in q_by_id)
    report = PairedReport(judge_tag=config.judge_tag,
                          model_base=index_base.model.tag,
                          model_exp=index_exp.model.tag)
    if not pool:
        report.converged = False
        report.flags.append("empty evaluation pool")
        return report

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    series: dict[str, list[float]] = {"mrr_base": [], "mrr_exp": [],
                                      "dcg_base": [], "dcg_exp": []}
    missing: list = []
    judged_before = len(cache)

    converged = False
    for pick in order:
        q_id, doc_id = pool[int(pick)]
        q = q_by_id[q_id]
        unit_chunks: dict[str, Chunk] = {}
        for index in (index_base, index_exp):
            for r in top_k_within_doc(index, q, doc_id, config.k):
                unit_chunks[r.chunk_id] = chunks_by_id[r.chunk_id]
        teacher_ops.judge_many(teacher, cache,
                               [(q, c) for c in unit_chunks.values()],
                               rubric, config.judge_tag, budget=budget,
                               max_in_flight=max_in_flight)

        def score_of(q_id, chunk_id):
            return cache.get(config.judge_tag, q_id, chunk_id)

        mrr_b, dcg_b = _unit_metrics(index_base, q, doc_id, config.k, score_of, missing)
        mrr_e, dcg_e = _unit_metrics(index_exp, q, doc_id, config.k, score_of, missing)
        series["mrr_base"].append(mrr_b)
        series["mrr_exp"].append(mrr_e)
        series["dcg_base"].append(dcg_b)
        series["dcg_exp"].append(dcg_e)
        report.units.append((q_id, doc_id))

        if len(report.units) >= 2:
            decisions = [stderr_and_stop(vals, config.rel_se_threshold)
                         for vals in series.values()]
            if all(d.stop for d in decisions):
                converged = True
                break

    report.converged = converged
    if not converged:
        report.flags.append("not converged: evaluation pool exhausted")
    if missing:
        report.flags.append(f"{len(missing)} judged positions missing")
    report.new_judgments = len(cache) - judged_before
    report.metrics = {
        f"mrr@{config.k}": _paired_metric_dict(
            f"mrr@{config.k}", config.k, series["mrr_base"], series["mrr_exp"],
            report.flags),
        f"dcg@{config.k}": _paired_metric_dict(
            f"dcg@{config.k}", config.k, series["dcg_base"], series["dcg_exp"],
            report.flags),
    }
    return report


def validation_metrics(queries: Sequence[QueryRecord],
                       val_docs: Mapping[str, Sequence[str]],
                       index_base: ChunkIndex, index_exp: ChunkIndex,
                       score_of, k: int, judge_tag: str) -> PairedReport:
    """Metrics at cutoff k over validation (query, document) units for both
    model versions. ``score_of(q_id, chunk_id)`` returns the judged score or
    None; missing pairs are counted in the report (coverage) and scored as
    not-relevant rather than silently imputed away.
    """
    q_by_id = {q.q_id: q for q in queries}
    units = sorted((q_id, doc_id) for q_id, docs in val_docs.items()
                   for doc_id in docs if q_id in q_by_id)
    report = PairedReport(judge_tag=judge_tag, model_base=index_base.model.tag,
                          model_exp=index_exp.model.tag)
    series = {"mrr_base": [], "mrr_exp": [], "dcg_base": [], "dcg_exp": []}
    missing: list = []
    total_positions = 0
    for q_id, doc_id in units:
        q = q_by_id[q_id]
        mrr_b, dcg_b = _unit_metrics(index_base, q, doc_id, k, score_of, missing)
        mrr_e, dcg_e = _unit_metrics(index_exp, q, doc_id, k, score_of, missing)
        total_positions += (len(top_k_within_doc(index_base, q, doc_id, k))
                            + len(top_k_within_doc(index_exp, q, doc_id, k)))
        series["mrr_base"].append(mrr_b)
        series["mrr_exp"].append(mrr_e)
        series["dcg_base"].append(dcg_b)
        series["dcg_exp"].append(dcg_e)
        report.units.append((q_id, doc_id))
    coverage = 1.0 if total_positions == 0 else 1.0 - len(missing) / total_positions
    report.flags.append(f"coverage={coverage:.6f}")
    if missing:
        report.flags.append(f"{len(missing)} pairs missing judgments")
    report.metrics = {
        f"mrr@{k}": _paired_metric_dict(f"mrr@{k}", k, series["mrr_base"],
                                        series["mrr_exp"], report.flags),
        f"dcg@{k}": _paired_metric_dict(f"dcg@{k}", k, series["dcg_base"],
                                        series["dcg_exp"], report.flags),
        "coverage": coverage,
        "missing_pairs": len(missing),
    }
    return report


def propagate_evidence_labels(chunks: Sequence[Chunk],
                              passages: Sequence[EvidencePassage]) -> list[int]:
    """Binary chunk labels from evidence character spans.

    A chunk is relevant iff it overlaps some passage by strictly more than a
    third of the shorter span. Pure integer arithmetic, so the boundary case
    (overlap exactly one third) is reliably minor, hence not relevant.
    """
    labels = []
    for chunk in chunks:
        hit = 0
        for p in passages:
            if p.doc_id != chunk.doc_id:
                continue
            overlap = min(chunk.end, p.end) - max(chunk.start, p.start)
            if overlap <= 0:
                continue
            shorter = min(chunk.end - chunk.start, p.end - p.start)
            if 3 * overlap > shorter:
                hit = 1
                break
        labels.append(hit)
    return labels


def promoted_filings(q: QueryRecord, doc_id: str, index_base: ChunkIndex,
                     index_exp: ChunkIndex, score_of, k: int = 5) -> list[str]:
    """Chunks judged fully relevant that the experimental model ranks first
    within the document while the base model leaves them outside its top k."""
    ranked_exp = top_k_within_doc(index_exp, q, doc_id, k=1)
    if not ranked_exp:
        return []
    base_rank = {r.chunk_id: r.rank
                 for r in top_k_within_doc(index_base, q, doc_id,
                                           k=len(index_base))}
    promoted = []
    for r in ranked_exp:
        if score_of(q.q_id, r.chunk_id) == 4 and base_rank.get(r.chunk_id, 10 ** 9) > k:
            promoted.append(r.chunk_id)
    return promoted


@dataclass(frozen=True)
class RankDelta:
    q_id: str
    chunk_id: str
    rank_base: int
    rank_exp: int

    @property
    def delta(self) -> int:
        return self.rank_base - self.rank_exp


def rank_delta_lists(entries: Sequence[RankDelta], mu: int,
                     head: int = 50) -> dict[str, list[RankDelta]]:
    """Most promoted / most demoted relevant chunks by within-document rank
    change. Promotion means the rank improved by more than ``mu``; demotion
    the symmetric opposite. Lists are capped at ``head`` entries."""
    if mu <= 0:
        raise PreconditionError("mu must be positive")
    ordered = sorted(entries, key=lambda e: (-e.delta, e.q_id, e.chunk_id))
    promoted = [e for e in ordered if e.delta > mu][:head]
    demoted = [e for e in reversed(ordered) if e.delta < -mu][:head]
    return {"most_promoted": promoted, "most_demoted": demoted}


def difference_vector_sets(q: QueryRecord, scores: Mapping[str, int],
                           model, chunk_texts: Mapping[str, str],
                           include_pca: bool = True) -> list[dict]:
    """Difference vectors between every fully-relevant and every irrelevant
    chunk of one query, with membership flags for the subset anchored on the
    query's source chunk (empty for synthetic queries).

    Vectors default to the supplied model's space; pass a different model to
    project under another version. Records are export-ready dicts.
    """
    positives = sorted(c for c, s in scores.items() if s == 4)
    negatives = sorted(c for c, s in scores.items() if s < 3)
    if not positives or not negatives:
        raise PreconditionError("need at least one positive and one negative")
    ids = positives + negatives
    vecs = model.embed_many([chunk_texts[c] for c in ids])
    vec_of = {c: vecs[i] for i, c in enumerate(ids)}

    records = []
    diffs = []
    for pos in positives:
        for neg in negatives:
            diff = vec_of[pos] - vec_of[neg]
            diffs.append(diff)
            records.append({
                "q_id": q.q_id, "pos": pos, "neg": neg,
                "vector": [float(x) for x in diff],
                "seed_member": q.source_chunk_id == pos,
            })
    if include_pca:
        coords = _pca_2d(np.asarray(diffs, dtype=np.float64))
        for rec, xy in zip(records, coords):
            rec["pca"] = [float(xy[0]), float(xy[1])]
    return records


def _pca_2d(matrix: np.ndarray) -> np.ndarray:
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    if centered.shape[0] < 2 or not np.any(centered):
        return np.zeros((matrix.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return coords


def load_evidence_passages(path) -> list[EvidencePassage]:
    """Read evidence spans from JSONL: {"doc_id","start","end","q_id"}."""
    from .io_utils import read_jsonl

    passages = []
    for rec in read_jsonl(path):
        if not (0 <= rec["start"] < rec["end"]):
            raise PreconditionError(f"bad evidence span in {path}: {rec}")
        passages.append(EvidencePassage(doc_id=rec["doc_id"], start=rec["start"],
                                        end=rec["end"], q_id=rec["q_id"]))
    return passages


def save_difference_vectors(path, records: Sequence[dict]) -> None:
    """Write difference-vector exports, one JSON record per line."""
    from .io_utils import write_jsonl

    write_jsonl(path, records)
