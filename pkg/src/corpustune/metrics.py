"""Binary-relevance ranking metrics, effect size, and the standard-error
stopping rule used by the adaptive evaluation loop.

All metrics take labels already ordered by rank (rank 1 first). Scores are
binarized before any metric is computed; DCG therefore uses binary gain with
a log2(rank+1) discount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DegenerateEffectSizeError, PreconditionError


def binarize(score: int, threshold: int = 4) -> int:
    """Collapse an ordinal relevance score in {1,2,3,4} to 0/1 at ``threshold``."""
    if score not in (1, 2, 3, 4):
        raise PreconditionError(f"relevance score must be in 1..4, got {score!r}")
    return 1 if score >= threshold else 0


def mrr_at_k(labels: list[int], k: int) -> float:
    """Reciprocal rank of the first positive within the top k, else 0."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    for i, label in enumerate(labels[:k]):
        if label:
            return 1.0 / (i + 1)
    return 0.0


def dcg_at_k(labels: list[int], k: int) -> float:
    """Sum of label_i / log2(i + 1) over the top k positions (i is 1-based)."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    return sum(label / math.log2(i + 2) for i, label in enumerate(labels[:k]))


def ndcg_overall(labels: list[int]) -> tuple[float, bool]:
    """Full-list NDCG: DCG over the whole list divided by the ideal DCG.

    Returns (value, degenerate); a list with no positives anywhere is defined
    as 0.0 with the degenerate flag set.
    """
    n = len(labels)
    if n == 0 or not any(labels):
        return 0.0, True
    ideal = sorted(labels, reverse=True)
    return dcg_at_k(labels, n) / dcg_at_k(ideal, n), False


def cohens_d_paired(base: list[float], exp: list[float], pooled: bool = False) -> float:
    """Effect size of exp over base on aligned per-unit values.

    Default is the paired form: mean(exp - base) / sample_stddev(exp - base).
    With ``pooled=True``, divides mean difference by the pooled sample
    standard deviation of the two series instead.
    """
    if len(base) != len(exp):
        raise PreconditionError("series must be aligned (equal lengths)")
    if len(base) < 2:
        raise PreconditionError("need at least 2 paired units")
    n = len(base)
    diffs = [e - b for b, e in zip(base, exp)]
    mean_diff = sum(diffs) / n
    if pooled:
        sd = math.sqrt((_sample_var(base) + _sample_var(exp)) / 2.0)
    else:
        sd = math.sqrt(_sample_var(diffs))
    # a spread that is zero up to rounding noise means the shift is constant
    if sd <= abs(mean_diff) * 1e-9:
        if mean_diff == 0.0 and sd == 0.0:
            return 0.0
        raise DegenerateEffectSizeError(
            "degenerate effect size: constant nonzero difference")
    return mean_diff / sd


def _sample_var(values: list[float]) -> float:
    n = len(values)
    mean = sum(values) / n
    return sum((v - mean) ** 2 for v in values) / (n - 1)


@dataclass
class StopDecision:
    mean: float
    se: float
    stop: bool
    flag: str | None = None


def stderr_and_stop(values: list[float], rel_threshold: float = 0.05) -> StopDecision:
    """Standard error of the mean and whether it is below
    ``rel_threshold`` * mean. A non-positive mean makes the ratio
    meaningless; the decision is then stop=False with a flag.
    """
    n = len(values)
    if n < 2:
        raise PreconditionError("need at least 2 values for a standard error")
    mean = sum(values) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
    se = sd / math.sqrt(n)
    if mean <= 0.0:
        return StopDecision(mean=mean, se=se, stop=False, flag="ratio undefined")
    return StopDecision(mean=mean, se=se, stop=se < rel_threshold * mean)


@dataclass
class MetricReport:
    """Aggregate of one metric over evaluation units."""

    metric: str
    k: int | None
    per_unit: list[float] = field(default_factory=list)
    cohens_d: float | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_unit)

    @property
    def mean(self) -> float:
        return sum(self.per_unit) / self.n if self.per_unit else 0.0

    @property
    def se(self) -> float:
        if self.n < 2:
            return float("inf")
        mean = self.mean
        sd = math.sqrt(sum((v - mean) ** 2 for v in self.per_unit) / self.n)
        return sd / math.sqrt(self.n)

    def to_dict(self) -> dict:
        out = {
            "metric": self.metric,
            "k": self.k,
            "mean": self.mean,
            "se": self.se if self.n >= 2 else None,
            "n": self.n,
            "cohens_d": self.cohens_d,
            "per_unit": list(self.per_unit),
        }
        if self.flags:
            out["flags"] = sorted(self.flags)
        return out
