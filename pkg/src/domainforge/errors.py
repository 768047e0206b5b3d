"""Exception hierarchy for the toolkit.

Every error raised by the library derives from :class:`DomainforgeError` so
callers can catch broadly; precondition-style errors also derive from
``ValueError`` to behave naturally in scripts.
"""


class DomainforgeError(Exception):
    """Base class for all toolkit errors."""


# corpus ingestion ------------------------------------------------------

class EmptyInput(DomainforgeError, ValueError):
    """The input stream contained no non-whitespace content."""


class DecodeFailure(DomainforgeError):
    """The input was not byte-readable."""


class InvalidWidth(DomainforgeError, ValueError):
    """Shingle width must be a positive integer."""


# dedup -----------------------------------------------------------------

class DuplicateId(DomainforgeError, ValueError):
    """Two documents in one corpus share an id."""


class EmptyShingleSet(DomainforgeError, ValueError):
    """MinHash signatures are undefined for empty shingle sets."""


class IncompatibleSignatures(DomainforgeError, ValueError):
    """Signatures are only comparable when (k, seed) match."""


class BandShapeMismatch(DomainforgeError, ValueError):
    """LSH banding requires bands * rows == k."""


class InvalidThreshold(DomainforgeError, ValueError):
    """Similarity thresholds live in [0, 1]."""


# quality ---------------------------------------------------------------

class EmptyCorpus(DomainforgeError, ValueError):
    """Model training needs at least one fragment."""


class EmptyFragment(DomainforgeError, ValueError):
    """Perplexity is undefined for fragments without tokens."""


class ZeroProbability(DomainforgeError):
    """A zero-probability token was scored; only possible with smoothing
    disabled and signals a misconfigured gate."""


# mixer -----------------------------------------------------------------

class ZeroBudget(DomainforgeError, ValueError):
    """The mixture budget must be positive."""


class AllZeroWeights(DomainforgeError, ValueError):
    """At least one category weight must be positive."""


class PoolExhausted(DomainforgeError):
    """A category pool ran out well short of its budget."""

    def __init__(self, category: str, realized: int, budget: int):
        self.category = category
        self.realized = realized
        self.budget = budget
        super().__init__(
            f"pool for category {category!r} exhausted at {realized} of "
            f"{budget} budgeted tokens"
        )


# benchgen --------------------------------------------------------------

class GeneratorParseError(DomainforgeError):
    """Generator output did not parse into an item draft."""


class InsufficientDistractors(DomainforgeError):
    """The lexicon does not provide enough distractor terms."""


class UndraftableFragment(DomainforgeError):
    """The fragment contains nothing the template generator can mask."""


class ProbeUnavailable(DomainforgeError):
    """The difficulty probe could not be reached."""


class InsufficientItems(DomainforgeError):
    """Fewer items survived the pipeline than the requested benchmark size."""


class BenchmarkParseError(DomainforgeError):
    """A benchmark file did not parse."""


# evaluation ------------------------------------------------------------

class UnknownItemId(DomainforgeError, KeyError):
    """An evaluation record references an item missing from the benchmark."""


class EmptyRecords(DomainforgeError, ValueError):
    """Reports over an empty record list are rejected, not reported as 0%."""


class ClientError(DomainforgeError):
    """A model/embedding client call failed."""


class TransportFailure(DomainforgeError):
    """More than the tolerated share of items failed after retries."""


# ragloop ---------------------------------------------------------------

class ProviderUnavailable(DomainforgeError):
    """An external embedding provider could not be reached."""


class EmptyText(DomainforgeError, ValueError):
    """Embedding input must contain at least one token."""


class DimsMismatch(DomainforgeError, ValueError):
    """Index entries must all share one dimensionality."""


class ProviderMismatch(DomainforgeError, ValueError):
    """Query-time provider differs from the one that built the index."""


class EmptyIndex(DomainforgeError, ValueError):
    """Retrieval over an empty index is undefined."""


# rlvr ------------------------------------------------------------------

class NonFiniteGradient(DomainforgeError):
    """A policy update produced a non-finite gradient; aborting."""


class TraceTooShort(DomainforgeError, ValueError):
    """Collapse detection needs at least one full window of iterations."""


# pipeline --------------------------------------------------------------

class ManifestParseError(DomainforgeError):
    """The pipeline manifest file did not parse."""


class StageFailure(DomainforgeError):
    """A pipeline stage failed; dependent stages are halted."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class RunLocked(DomainforgeError):
    """Another pipeline run owns the output directory."""
