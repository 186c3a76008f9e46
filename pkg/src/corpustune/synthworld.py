"""Deterministic synthetic corpora with planted topic structure.

Each chunk-sized sentence names its document class (``cls-<class>``) and one
topic (``top-<class>-t<j>``); half of a topic's chunks also carry the topic's
answer token (``ans-<class>-t<j>``). The OracleTeacher reads exactly these
tokens, so relevance is fully determined by construction: 4 with the answer
token, 3 on topic without it, 2 for the same class off topic, 1 otherwise.

Sentences are padded to 520+ characters so the greedy chunker emits exactly
one chunk per sentence, which makes chunk counts (and therefore fold and
sampling behavior) exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import date, timedelta

from .corpus import Document
from .errors import PreconditionError
from .teacher import OracleTeacher

DEFAULT_TEST_START = date(2024, 7, 1)

_FIRST_DAY = date(2024, 1, 1)
_LAST_DAY = date(2024, 7, 31)

# Fixed pseudo-word vocabulary for filler text; shared across worlds so the
# hashing embedder sees a realistic common-word background.
_SYLLABLES = ("ba", "ce", "di", "fo", "gu", "la", "me", "ni", "po", "ru",
              "sa", "te", "vi", "wo", "zy")
VOCAB = tuple(f"{a}{b}{c}" for a in _SYLLABLES for b in _SYLLABLES[:4]
              for c in _SYLLABLES[:2])


@dataclass
class SyntheticWorld:
    seed: int
    documents: list[Document]
    classes: list[str]
    topics_by_class: dict[str, list[str]] = field(default_factory=dict)

    def oracle(self) -> OracleTeacher:
        return OracleTeacher(salt=self.seed)


def make_synthetic_world(seed: int, n_classes: int, docs_per_class: int,
                         chunks_per_doc: int, topics_per_class: int = 10) -> SyntheticWorld:
    """Build a corpus whose relevance structure an OracleTeacher can read.

    Documents are dated evenly over January through July 2024, so the stock
    test_start of July 1st yields a non-empty held-out test fold.
    """
    if min(n_classes, docs_per_class, chunks_per_doc, topics_per_class) < 1:
        raise PreconditionError("world dimensions must all be >= 1")

    classes = [f"class{ci:02d}" for ci in range(n_classes)]
    topics_by_class = {
        cls: [f"{cls}-t{t}" for t in range(topics_per_class)] for cls in classes
    }
    span_days = (_LAST_DAY - _FIRST_DAY).days

    documents = []
    for cls in classes:
        topics = topics_by_class[cls]
        for di in range(docs_per_class):
            doc_id = f"{cls}-d{di:04d}"
            rng = random.Random(f"{seed}/world/{doc_id}")
            sentences = []
            for si in range(chunks_per_doc):
                topic = topics[si % len(topics)]
                has_answer = (si // len(topics)) % 2 == 0
                sentences.append(_sentence(cls, topic, has_answer, rng))
            documents.append(Document(
                doc_id=doc_id,
                doc_class=cls,
                date=_FIRST_DAY + timedelta(days=(di * span_days) // max(1, docs_per_class - 1)
                                            if docs_per_class > 1 else 0),
                text="".join(sentences),
            ))
    return SyntheticWorld(seed=seed, documents=documents, classes=classes,
                          topics_by_class=topics_by_class)


def _sentence(cls: str, topic: str, has_answer: bool, rng: random.Random) -> str:
    target = rng.randint(560, 940)
    head = f"the cls-{cls} filing reviews top-{topic} during this period"
    if has_answer:
        head += f" and states ans-{topic} as the figure of record"
    words = [head]
    length = len(head)
    while length < target - 2:
        w = VOCAB[rng.randrange(len(VOCAB))]
        words.append(w)
        length += len(w) + 1
    return " ".join(words) + ". "
