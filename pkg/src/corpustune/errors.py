"""Exception types shared across the pipeline."""


class CorpustuneError(Exception):
    """Base class for all package errors."""


class PreconditionError(CorpustuneError, ValueError):
    """An operation was called with arguments violating its contract."""


class UnembeddableTextError(CorpustuneError):
    """Text is empty (or whitespace-only) after normalization."""


class DegenerateEmbeddingError(CorpustuneError):
    """The projection of a feature vector collapsed to zero."""


class IndexBuildError(CorpustuneError):
    """Too many chunks failed to embed while building an index."""


class TransportError(CorpustuneError):
    """An external endpoint kept failing after the retry budget.

    ``partial`` carries whatever results were produced before the failure
    so callers can persist them.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []


class UnjudgeablePairError(CorpustuneError):
    """The judge returned an unusable score twice for the same pair."""


class GenerationStalledError(CorpustuneError):
    """Synthetic query generation fell below the acceptance-rate floor."""


class DegenerateEffectSizeError(CorpustuneError):
    """Effect size is undefined: zero spread with a nonzero mean shift."""


class BudgetExceededError(CorpustuneError):
    """A stage hit its hard cap on teacher calls."""
