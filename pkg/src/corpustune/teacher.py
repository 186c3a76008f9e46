"""Teacher-model interaction: query generation, relevance judging, and the
idempotent judgment cache.

Two teacher implementations share one behavioral contract:

* ``HttpTeacherClient`` speaks JSON over HTTP to a hosted model
  (/v1/generate, /v1/generate_fewshot, /v1/judge).
* ``OracleTeacher`` is a deterministic stand-in for offline runs and tests.
  It understands the planted token grammar of synthetic corpora (see
  ``synthworld``): ``cls-<class>`` marks the document class, ``top-<class>-t<j>``
  a topic, and ``ans-<class>-t<j>`` the presence of an answer for that topic.

Judgments are cached by (judge_tag, q_id, chunk_id); a resolved pair is never
sent to a teacher again under the same judge tag.
"""

from __future__ import annotations

import hashlib
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Chunk
from .errors import (
    BudgetExceededError,
    GenerationStalledError,
    PreconditionError,
    TransportError,
    UnjudgeablePairError,
)
from .io_utils import dumps_canonical, read_jsonl
from .kmeans import kmeans

INPARS, SYNTHETIC = "inpars", "synthetic"

INTERROGATIVES = ("what", "how", "which", "when", "who", "why", "does", "is", "are")

# Prompt templates rendered server-side; the wire carries only the id. The
# document class is a variable so no class name is baked into a template.
PROMPT_TEMPLATES = {
    "vanilla": (
        "You are reviewing a {doc_class} document. Read the passage below and "
        "write one natural question that this passage answers.\n\n"
        "Passage:\n{passage}\n\nQuestion:"
    ),
    "fewshot": (
        "You are a subject-matter expert on {doc_class} documents. Below are "
        "example questions analysts ask about them. Write {n} new questions of "
        "the same kind, one per line. Do not restate the examples.\n\n"
        "Examples:\n{exemplars}\n\nNew questions:"
    ),
}


@dataclass(frozen=True)
class QueryRecord:
    q_id: str
    text: str
    doc_class: str
    origin: str  # inpars | synthetic
    iteration: int
    source_chunk_id: str | None = None  # inpars only
    selection_score: float | None = None  # mean token log-probability, inpars only

    def __post_init__(self):
        if self.origin == INPARS and self.source_chunk_id is None:
            raise PreconditionError("inpars queries must carry source_chunk_id")
        if self.origin == SYNTHETIC and self.source_chunk_id is not None:
            raise PreconditionError("synthetic queries never carry source_chunk_id")

    def to_dict(self) -> dict:
        return {
            "q_id": self.q_id, "text": self.text, "class": self.doc_class,
            "origin": self.origin, "iteration": self.iteration,
            "source_chunk_id": self.source_chunk_id,
            "selection_score": self.selection_score,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "QueryRecord":
        return cls(q_id=rec["q_id"], text=rec["text"], doc_class=rec["class"],
                   origin=rec["origin"], iteration=rec["iteration"],
                   source_chunk_id=rec.get("source_chunk_id"),
                   selection_score=rec.get("selection_score"))


@dataclass(frozen=True)
class Judgment:
    q_id: str
    chunk_id: str
    score: int  # ordinal relevance, 1..4
    judge_tag: str
    timestamp: float | None = None


@dataclass(frozen=True)
class GeneratedQuery:
    text: str
    mean_token_logprob: float


@dataclass(frozen=True)
class Rubric:
    """The four ordinal relevance levels given to the judging model."""

    rubric_id: str
    criteria: Mapping[int, str]

    def validate(self) -> None:
        if set(self.criteria) != {1, 2, 3, 4}:
            raise PreconditionError("rubric must define all four score levels")

    def prompt(self) -> str:
        lines = [f"{level}: {text}" for level, text in sorted(self.criteria.items())]
        return ("Score how well the passage answers the query, as an integer "
                "from 1 to 4:\n" + "\n".join(lines))


DEFAULT_RUBRIC = Rubric(
    rubric_id="ordinal-relevance-v1",
    criteria={
        1: "Unrelated: the passage has no connection to the query and offers "
           "no part of an answer.",
        2: "Weakly related: at most a loose topical link; the query cannot be "
           "answered from the passage.",
        3: "Partially answers: the passage is clearly relevant but an answer "
           "built from it alone would have gaps.",
        4: "Fully answers: the passage is directly relevant and explicitly, "
           "completely answers the query.",
    },
)


class JudgmentCache:
    """Idempotent store keyed by (judge_tag, q_id, chunk_id).

    Backed by an append-only JSONL log so interrupted runs resume without
    re-querying the teacher; ``flush_sorted`` rewrites the log in sorted
    order so completed runs are byte-reproducible. Concurrent inserts of the
    same key are first-write-wins.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._scores: dict[tuple[str, str, str], int] = {}
        self._lock = threading.Lock()
        self.lookups = 0
        self.hits = 0
        if self.path is not None and self.path.exists():
            for rec in read_jsonl(self.path):
                key = (rec["judge_tag"], rec["q_id"], rec["chunk_id"])
                self._scores.setdefault(key, int(rec["score"]))
            self._fh = open(self.path, "a", encoding="utf-8")
        elif self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = None

    def __len__(self) -> int:
        return len(self._scores)

    def get(self, judge_tag: str, q_id: str, chunk_id: str) -> int | None:
        with self._lock:
            self.lookups += 1
            score = self._scores.get((judge_tag, q_id, chunk_id))
            if score is not None:
                self.hits += 1
            return score

    def put(self, judge_tag: str, q_id: str, chunk_id: str, score: int) -> bool:
        """Insert; returns False when the key was already present."""
        key = (judge_tag, q_id, chunk_id)
        with self._lock:
            if key in self._scores:
                return False
            self._scores[key] = score
            if self._fh is not None:
                self._fh.write(dumps_canonical(
                    {"judge_tag": judge_tag, "q_id": q_id,
                     "chunk_id": chunk_id, "score": score}) + "\n")
                self._fh.flush()
            return True

    def items(self) -> list[tuple[tuple[str, str, str], int]]:
        with self._lock:
            return sorted(self._scores.items())

    def flush_sorted(self) -> None:
        """Compact the log: one sorted record per key."""
        if self.path is None:
            return
        with self._lock:
            self._fh.close()
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for (judge_tag, q_id, chunk_id), score in sorted(self._scores.items()):
                    fh.write(dumps_canonical(
                        {"judge_tag": judge_tag, "q_id": q_id,
                         "chunk_id": chunk_id, "score": score}) + "\n")
            tmp.replace(self.path)
            self._fh = open(self.path, "a", encoding="utf-8")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class CallBudget:
    """Hard cap on teacher calls within one stage."""

    def __init__(self, cap: int):
        self.cap = cap
        self.used = 0
        self._lock = threading.Lock()

    def spend(self, n: int = 1) -> None:
        with self._lock:
            self.used += n
            if self.used > self.cap:
                raise BudgetExceededError(
                    f"teacher call budget exceeded: {self.used} > {self.cap}")


# ---------------------------------------------------------------------------
# Teacher clients
# ---------------------------------------------------------------------------

class HttpTeacherClient:
    """JSON-over-HTTP teacher. Retries with exponential backoff; a request
    that keeps failing raises TransportError."""

    def __init__(self, endpoint: str, retries: int = 3, backoff_s: float = 0.5,
                 timeout_s: float = 120.0, session=None):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def _post(self, route: str, body: dict) -> dict:
        import requests

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.post(f"{self.endpoint}{route}", json=body,
                                          timeout=self.timeout_s)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        raise TransportError(f"teacher endpoint {route} failed after "
                             f"{self.retries + 1} attempts: {last_error}")

    def generate(self, passage: str, n: int = 1,
                 template_id: str = "vanilla") -> list[GeneratedQuery]:
        data = self._post("/v1/generate",
                          {"passage": passage, "n": n, "template_id": template_id})
        return [GeneratedQuery(text=q["text"],
                               mean_token_logprob=float(q["mean_token_logprob"]))
                for q in data["queries"]]

    def generate_fewshot(self, exemplars: Sequence[str], n: int = 5,
                         template_id: str = "fewshot") -> list[str]:
        data = self._post("/v1/generate_fewshot",
                          {"exemplars": list(exemplars), "n": n,
                           "template_id": template_id})
        return [q["text"] for q in data["queries"]]

    def judge(self, query: str, passage: str, rubric_id: str):
        data = self._post("/v1/judge", {"query": query, "passage": passage,
                                        "rubric_id": rubric_id})
        return data["score"]


_TOPIC_TOKEN = re.compile(r"\btop-([a-z0-9]+-t\d+)\b")
_CLASS_TOKEN = re.compile(r"\bcls-([a-z0-9]+)\b")

_FEWSHOT_STYLES = (
    "what does cls-{c} disclose about top-{t} in segment part-{f}?",
    "how does cls-{c} describe top-{t} for period part-{f}?",
    "which details on top-{t} appear in the cls-{c} report part-{f}?",
    "when does cls-{c} update top-{t} under section part-{f}?",
    "why does the cls-{c} filing discuss top-{t} in part-{f}?",
)


def _stable_hash(*parts: str) -> int:
    digest = hashlib.blake2b("|".join(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class OracleTeacher:
    """Deterministic teacher over planted-token corpora.

    Every method is a pure function of its arguments (plus ``salt``), so
    whole-pipeline runs are reproducible and resumable without a network.
    """

    def __init__(self, salt: int = 0):
        self.salt = salt

    # -- generation ---------------------------------------------------------

    def generate(self, passage: str, n: int = 1,
                 template_id: str = "vanilla") -> list[GeneratedQuery]:
        topic = _TOPIC_TOKEN.search(passage)
        cls = _CLASS_TOKEN.search(passage)
        out = []
        for i in range(n):
            h = _stable_hash(str(self.salt), "gen", str(i), passage)
            if topic and cls:
                # passage-derived phrasing detail, as a real generator would
                # produce a distinct question per chunk
                text = (f"what does cls-{cls.group(1)} report about "
                        f"top-{topic.group(1)} in section sec-{h % 997}?")
            else:
                words = re.findall(r"[a-z0-9-]+", passage.lower())[:4]
                text = f"what does this passage say about {' '.join(words)}?"
            logprob = -3.0 + 2.9 * ((h % 1_000_000) / 1_000_000.0)
            out.append(GeneratedQuery(text=text, mean_token_logprob=logprob))
        return out

    def generate_fewshot(self, exemplars: Sequence[str], n: int = 5,
                         template_id: str = "fewshot") -> list[str]:
        topics = sorted({m for ex in exemplars for m in _TOPIC_TOKEN.findall(ex)})
        classes = sorted({m for ex in exemplars for m in _CLASS_TOKEN.findall(ex)})
        if not topics or not classes:
            return [f"what else should an analyst verify in item part-{i}?"
                    for i in range(n)]
        base = _stable_hash(str(self.salt), "fewshot", *exemplars)
        out = []
        for i in range(n):
            style = _FEWSHOT_STYLES[(base // 7 + i) % len(_FEWSHOT_STYLES)]
            topic = topics[(base + i) % len(topics)]
            facet = (base // 13 + i * 31) % 977
            out.append(style.format(c=classes[0], t=topic, f=facet))
        return out

    # -- judging ------------------------------------------------------------

    def judge(self, query: str, passage: str, rubric_id: str) -> int:
        """4 = topic match with the answer token present, 3 = topic match
        without it, 2 = same class only, 1 = unrelated."""
        topic = _TOPIC_TOKEN.search(query)
        cls = _CLASS_TOKEN.search(query)
        if topic is not None:
            if re.search(rf"\btop-{re.escape(topic.group(1))}\b", passage):
                if re.search(rf"\bans-{re.escape(topic.group(1))}\b", passage):
                    return 4
                return 3
        if cls is not None and re.search(rf"\bcls-{re.escape(cls.group(1))}\b", passage):
            return 2
        return 1


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def generate_inpars_queries(teacher, doc_chunks: Sequence[Chunk], doc_class: str,
                            iteration: int, seed: int,
                            chunk_sample_size: int = 500,
                            template_id: str = "vanilla",
                            budget: CallBudget | None = None) -> list[QueryRecord]:
    """One candidate query per sampled chunk of a single document.

    At most ``chunk_sample_size`` chunks are drawn (seeded, uniform, without
    replacement). Candidates carry the teacher-reported mean token
    log-probability as their selection score. On transport failure the
    partial candidate list rides on the raised error.
    """
    if not doc_chunks:
        raise PreconditionError("document has no chunks")
    doc_ids = {c.doc_id for c in doc_chunks}
    if len(doc_ids) != 1:
        raise PreconditionError("chunks of exactly one document expected")
    doc_id = doc_ids.pop()

    ordered = sorted(doc_chunks, key=lambda c: c.chunk_id)
    if len(ordered) > chunk_sample_size:
        import random
        rng = random.Random(f"{seed}/inpars/{doc_id}")
        ordered = sorted(rng.sample(ordered, chunk_sample_size),
                         key=lambda c: c.chunk_id)

    candidates: list[QueryRecord] = []
    for chunk in ordered:
        if budget is not None:
            budget.spend()
        try:
            generated = teacher.generate(chunk.text, n=1, template_id=template_id)
        except TransportError as exc:
            raise TransportError(str(exc), partial=candidates) from exc
        if not generated:
            continue
        gq = generated[0]
        candidates.append(QueryRecord(
            q_id=f"{doc_class}:i{iteration}:inpars:{chunk.chunk_id}",
            text=gq.text, doc_class=doc_class, origin=INPARS,
            iteration=iteration, source_chunk_id=chunk.chunk_id,
            selection_score=gq.mean_token_logprob,
        ))
    return candidates


def select_top_queries(candidates: Sequence[QueryRecord], k: int = 200) -> list[QueryRecord]:
    """The k candidates with the highest selection score; ties by q_id."""
    if any(c.selection_score is None for c in candidates):
        raise PreconditionError("candidates must carry selection_score")
    ranked = sorted(candidates, key=lambda c: (-c.selection_score, c.q_id))
    return ranked[:k]


@dataclass
class ClusterAssignment:
    labels: list[int]
    n_clusters: int
    warning: str | None = None


def cluster_exemplars(queries: Sequence[QueryRecord], n_clusters: int, model,
                      seed: int = 0) -> ClusterAssignment:
    """Seeded k-means over query embeddings, used to draw diverse exemplars."""
    if not (1 <= n_clusters <= len(queries)):
        raise PreconditionError("need |queries| >= n_clusters >= 1")
    import numpy as np

    vectors = model.embed_many([q.text for q in queries])
    n_unique = len({v.tobytes() for v in vectors})
    warning = None
    if n_unique < n_clusters:
        warning = (f"only {n_unique} distinct embeddings; "
                   f"reducing n_clusters from {n_clusters}")
        n_clusters = n_unique
    labels = kmeans(np.asarray(vectors, dtype=np.float64), n_clusters, seed=seed)
    return ClusterAssignment(labels=[int(v) for v in labels],
                             n_clusters=n_clusters, warning=warning)


def passes_quality(text: str, min_chars: int = 20) -> bool:
    """Cheap query-quality gate: long enough, and question-shaped."""
    stripped = text.strip()
    if len(stripped) < min_chars:
        return False
    first = stripped.split(maxsplit=1)[0].lower() if stripped else ""
    return stripped.endswith("?") or first in INTERROGATIVES


def _dedup_key(text: str) -> str:
    return " ".join(text.split()).casefold()


def generate_synthetic_queries(teacher, inpars_queries: Sequence[QueryRecord],
                               model, m: int = 200,
                               exemplars_per_prompt: int = 5, per_call: int = 5,
                               n_clusters: int = 10, seed: int = 0,
                               iteration: int = 0, min_chars: int = 20,
                               min_acceptance: float = 0.05, window: int = 200,
                               template_id: str = "fewshot",
                               budget: CallBudget | None = None) -> list[QueryRecord]:
    """Few-shot synthetic queries for one document class.

    Each batch draws ``exemplars_per_prompt`` exemplars from distinct
    clusters, asks the teacher for ``per_call`` new queries, filters them
    (length, interrogative form, exact dedup against everything seen for the
    class), and accepts survivors until ``m`` are collected. If acceptance
    over the last ``window`` candidates drops below ``min_acceptance`` the
    loop aborts rather than burn teacher budget.
    """
    import random

    classes = {q.doc_class for q in inpars_queries}
    if len(classes) != 1:
        raise PreconditionError("exemplar pool must be a single class")
    doc_class = classes.pop()
    if len(inpars_queries) < exemplars_per_prompt:
        raise PreconditionError(
            f"need at least {exemplars_per_prompt} exemplar queries")

    assignment = cluster_exemplars(inpars_queries,
                                   min(n_clusters, len(inpars_queries)),
                                   model, seed=seed)
    by_cluster: dict[int, list[QueryRecord]] = {}
    for q, label in zip(inpars_queries, assignment.labels):
        by_cluster.setdefault(label, []).append(q)
    for members in by_cluster.values():
        members.sort(key=lambda q: q.q_id)

    rng = random.Random(f"{seed}/synthetic/{doc_class}")
    seen = {_dedup_key(q.text) for q in inpars_queries}
    accepted: list[QueryRecord] = []
    recent: deque[bool] = deque(maxlen=window)

    while len(accepted) < m:
        clusters = sorted(by_cluster)
        take = min(exemplars_per_prompt, len(clusters))
        chosen = rng.sample(clusters, take)
        exemplars = [rng.choice(by_cluster[c]).text for c in sorted(chosen)]
        if budget is not None:
            budget.spend()
        texts = teacher.generate_fewshot(exemplars, n=per_call,
                                         template_id=template_id)
        for text in texts:
            ok = passes_quality(text, min_chars=min_chars)
            key = _dedup_key(text)
            if ok and key in seen:
                ok = False
            recent.append(ok)
            if ok:
                seen.add(key)
                accepted.append(QueryRecord(
                    q_id=f"{doc_class}:i{iteration}:syn:{len(accepted):05d}",
                    text=" ".join(text.split()), doc_class=doc_class,
                    origin=SYNTHETIC, iteration=iteration,
                ))
                if len(accepted) >= m:
                    break
        if len(recent) == window and sum(recent) / window < min_acceptance:
            raise GenerationStalledError(
                f"synthetic acceptance below {min_acceptance:.0%} over the "
                f"last {window} candidates ({sum(recent)} accepted); "
                f"{len(accepted)}/{m} collected for class {doc_class}")
    return accepted


def judge(teacher, cache: JudgmentCache, q: QueryRecord, chunk: Chunk,
          rubric: Rubric, judge_tag: str,
          budget: CallBudget | None = None) -> Judgment:
    """Ordinal relevance of a (query, chunk) pair, cache-first.

    An invalid teacher reply (non-integer or outside 1..4) is re-prompted
    once; a second bad reply is an UnjudgeablePairError.
    """
    rubric.validate()
    cached = cache.get(judge_tag, q.q_id, chunk.chunk_id)
    if cached is not None:
        return Judgment(q_id=q.q_id, chunk_id=chunk.chunk_id, score=cached,
                        judge_tag=judge_tag)

    score = None
    for _attempt in range(2):
        if budget is not None:
            budget.spend()
        reply = teacher.judge(q.text, chunk.text, rubric.rubric_id)
        if isinstance(reply, bool):
            reply = None
        elif isinstance(reply, float) and reply.is_integer():
            reply = int(reply)
        if isinstance(reply, int) and 1 <= reply <= 4:
            score = reply
            break
    if score is None:
        raise UnjudgeablePairError(
            f"unjudgeable pair ({q.q_id}, {chunk.chunk_id}): "
            f"teacher reply {reply!r}")
    cache.put(judge_tag, q.q_id, chunk.chunk_id, score)
    return Judgment(q_id=q.q_id, chunk_id=chunk.chunk_id, score=score,
                    judge_tag=judge_tag, timestamp=time.time())


def judge_many(teacher, cache: JudgmentCache, pairs: Iterable[tuple[QueryRecord, Chunk]],
               rubric: Rubric, judge_tag: str,
               budget: CallBudget | None = None,
               max_in_flight: int = 8) -> list[Judgment]:
    """Judge pairs with at most ``max_in_flight`` concurrent teacher requests.

    Results come back in (q_id, chunk_id) order regardless of completion
    order; the cache absorbs concurrent inserts. The append-only cache log
    may interleave under concurrency - ``flush_sorted`` normalizes it.
    """
    ordered = sorted(pairs, key=lambda pc: (pc[0].q_id, pc[1].chunk_id))
    if max_in_flight <= 1 or len(ordered) < 2:
        return [judge(teacher, cache, q, c, rubric, judge_tag, budget=budget)
                for q, c in ordered]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(
            lambda pc: judge(teacher, cache, pc[0], pc[1], rubric, judge_tag,
                             budget=budget),
            ordered))


def save_queries(path: str | Path, queries: Iterable[QueryRecord]) -> None:
    from .io_utils import write_jsonl
    write_jsonl(path, (q.to_dict() for q in sorted(queries, key=lambda q: q.q_id)))


def load_queries(path: str | Path) -> list[QueryRecord]:
    return [QueryRecord.from_dict(rec) for rec in read_jsonl(path)]
