"""Triplet-loss retraining of the reference embedder.

The loss is the hinge max(0, margin + d(q, pos) - d(q, neg)) on cosine
distance over unit vectors. Gradients are exact: backprop through the
projection, the L2 normalization, and the dot products. Training is plain
mini-batch AdamW over the projection matrix, seeded end to end, and produces
a new model version; the input version is never mutated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import ReferenceEmbedder, distance
from .errors import CorpustuneError, PreconditionError
from .mining import Triple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    margin: float = 0.1
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise PreconditionError("margin must be positive")
        if self.epochs < 1:
            raise PreconditionError("epochs must be >= 1")

    @classmethod
    def production_preset(cls) -> "TrainerConfig":
        """Hyperparameters sized for a full transformer bi-encoder, kept as a
        preset; the reference linear model wants the defaults instead."""
        return cls(margin=0.1, epochs=2, batch_size=128, learning_rate=5e-7)


@dataclass
class TrainingReport:
    model_in: str
    model_out: str
    n_triples: int
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy_before: float | None = None
    val_accuracy_after: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model_in": self.model_in, "model_out": self.model_out,
            "n_triples": self.n_triples, "loss_curve": self.loss_curve,
            "val_accuracy_before": self.val_accuracy_before,
            "val_accuracy_after": self.val_accuracy_after,
            "flags": sorted(self.flags),
        }


def triplet_loss(qv: np.ndarray, pv: np.ndarray, nv: np.ndarray,
                 margin: float = 0.1) -> float:
    """max(0, margin + d(q,pos) - d(q,neg)) on unit vectors."""
    return max(0.0, margin + distance(qv, pv) - distance(qv, nv))


def _project(weights: np.ndarray, feats) -> np.ndarray:
    idx, vals = feats
    return weights[:, idx] @ vals.astype(weights.dtype)


def _forward(weights: np.ndarray, feats_q, feats_p, feats_n, margin: float):
    """Loss plus everything the backward pass needs."""
    zs = [_project(weights, f) for f in (feats_q, feats_p, feats_n)]
    norms = [float(np.linalg.norm(z)) for z in zs]
    if any(n == 0.0 for n in norms):
        raise CorpustuneError("projection collapsed to zero during training")
    uq, up, un = (z / n for z, n in zip(zs, norms))
    loss = margin - float(uq @ up) + float(uq @ un)
    return max(0.0, loss), (uq, up, un), norms


def loss_gradient(model: ReferenceEmbedder, triple_texts: tuple[str, str, str],
                  margin: float = 0.1, weights: np.ndarray | None = None) -> np.ndarray:
    """Exact gradient of the triplet loss w.r.t. the projection matrix.

    Returns a dense float64 matrix of the model's weight shape; it is
    exactly zero for satisfied triples (the hinge's flat region).
    """
    if model.kind != "reference":
        raise PreconditionError("gradients exist only for the reference embedder")
    W = (model.weights if weights is None else weights).astype(np.float64)
    feats = [model.featurize(t) for t in triple_texts]
    grad = np.zeros_like(W)
    _accumulate_gradient(W, feats, margin, grad)
    return grad


def _accumulate_gradient(W: np.ndarray, feats: list, margin: float,
                         out: np.ndarray) -> float:
    """Add one triple's gradient into ``out``; returns the triple's loss."""
    loss, (uq, up, un), norms = _forward(W, *feats, margin)
    if loss <= 0.0:
        return 0.0
    # dL/du for the three roles, then through u = z/|z|: g_z = (g - u(u.g))/|z|
    duals = (un - up, -uq, uq)
    for (idx, vals), u, norm, g_u in zip(feats, (uq, up, un), norms, duals):
        g_z = (g_u - u * float(u @ g_u)) / norm
        out[:, idx] += np.outer(g_z, vals.astype(out.dtype))
    return loss


def triples_accuracy(model, triples: Sequence[Triple],
                     query_texts: Mapping[str, str],
                     chunk_texts: Mapping[str, str]) -> float:
    """Fraction of triples ranked correctly: d(q,pos) strictly < d(q,neg).

    An empty list is reported as 1.0 (vacuous) with a logged warning.
    """
    if not triples:
        logger.warning("triples_accuracy over an empty list; defining it as 1.0")
        return 1.0
    texts = sorted({t for tr in triples
                    for t in (query_texts[tr.q_id], chunk_texts[tr.pos_chunk_id],
                              chunk_texts[tr.neg_chunk_id])})
    row = {t: i for i, t in enumerate(texts)}
    vecs = model.embed_many(texts)
    good = 0
    for tr in triples:
        qv = vecs[row[query_texts[tr.q_id]]]
        pv = vecs[row[chunk_texts[tr.pos_chunk_id]]]
        nv = vecs[row[chunk_texts[tr.neg_chunk_id]]]
        if distance(qv, pv) < distance(qv, nv):
            good += 1
    return good / len(triples)


def train(model: ReferenceEmbedder, triples: Sequence[Triple],
          config: TrainerConfig, query_texts: Mapping[str, str],
          chunk_texts: Mapping[str, str],
          val_triples: Sequence[Triple] = (),
          out_tag: str | None = None) -> tuple[ReferenceEmbedder, TrainingReport]:
    """Mini-batch AdamW over the projection matrix.

    Shuffling is reseeded from ``config.seed`` so identical inputs give a
    bitwise-identical output matrix. With no triples the returned model's
    weights equal the input's exactly.
    """
    if model.kind != "reference":
        raise PreconditionError("only the reference embedder is trainable")
    out_tag = out_tag or f"{model.tag}+1"
    report = TrainingReport(model_in=model.tag, model_out=out_tag,
                            n_triples=len(triples))

    if val_triples:
        report.val_accuracy_before = triples_accuracy(
            model, val_triples, query_texts, chunk_texts)
    else:
        report.flags.append("no validation triples")

    if not triples:
        report.flags.append("no training triples; weights unchanged")
        new_model = model.with_weights(model.weights.copy(), tag=out_tag)
        report.val_accuracy_after = report.val_accuracy_before
        return new_model, report

    feats = {}
    for tr in triples:
        for text in (query_texts[tr.q_id], chunk_texts[tr.pos_chunk_id],
                     chunk_texts[tr.neg_chunk_id]):
            if text not in feats:
                feats[text] = model.featurize(text)
    triple_feats = [
        (feats[query_texts[tr.q_id]], feats[chunk_texts[tr.pos_chunk_id]],
         feats[chunk_texts[tr.neg_chunk_id]])
        for tr in triples
    ]

    W = model.weights.astype(np.float64)
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(triple_feats))
        epoch_loss = 0.0
        for ofs in range(0, len(order), config.batch_size):
            batch = order[ofs:ofs + config.batch_size]
            grad = np.zeros_like(W)
            batch_loss = 0.0
            for i in batch:
                batch_loss += _accumulate_gradient(W, list(triple_feats[i]),
                                                   config.margin, grad)
            if not np.isfinite(batch_loss):
                raise CorpustuneError(
                    f"non-finite loss at epoch {epoch} step {step}: {batch_loss}")
            grad /= len(batch)
            epoch_loss += batch_loss

            step += 1
            m = config.beta1 * m + (1.0 - config.beta1) * grad
            v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
            m_hat = m / (1.0 - config.beta1 ** step)
            v_hat = v / (1.0 - config.beta2 ** step)
            W -= config.learning_rate * (m_hat / (np.sqrt(v_hat) + config.eps)
                                         + config.weight_decay * W)
        report.loss_curve.append(epoch_loss / len(order))

    new_model = model.with_weights(W.astype(np.float32), tag=out_tag)
    if val_triples:
        report.val_accuracy_after = triples_accuracy(
            new_model, val_triples, query_texts, chunk_texts)
    return new_model, report
