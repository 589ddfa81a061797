"""Exception hierarchy shared across the engine."""


class KgragError(Exception):
    """Base class for all engine errors."""


class BudgetExceeded(KgragError):
    """A prompt does not fit the provider's context window."""


class TransportError(KgragError):
    """The provider endpoint could not be reached or kept failing."""


class MalformedResponse(KgragError):
    """The provider endpoint returned non-conforming JSON."""


class FixtureMiss(KgragError):
    """A scripted-provider chat request had no recorded fixture."""


class DimensionMismatch(KgragError):
    """An embedding provider returned vectors of inconsistent dimension."""


class UnsupportedFormat(KgragError):
    """An input file has a format the ingester does not handle."""


class IoError(KgragError):
    """A filesystem read failed during ingestion."""


class StoreWriteError(KgragError):
    """The graph store rejected a write."""


class MissingEndpoint(KgragError):
    """An edge upsert referenced a node that does not exist."""


class EmptyIndex(KgragError):
    """A similarity search ran against an empty vector index."""


class EmptyStore(KgragError):
    """Retrieval ran against a store with no graph elements."""


class VersionMismatch(KgragError):
    """A persisted store has an unsupported manifest version."""


class CorruptManifest(KgragError):
    """A persisted store failed its digest check."""


class DecompositionFailed(KgragError):
    """The LLM output could not be parsed into a query representation or plan."""


class StepExecutionFailed(KgragError):
    """A logic-plan step could not be executed."""

    def __init__(self, step_id: int, cause: str):
        super().__init__(f"step {step_id}: {cause}")
        self.step_id = step_id
        self.cause = cause


class VerificationError(KgragError):
    """A provider failure occurred during verification."""


class StoreNotLoaded(KgragError):
    """A query was issued before any store was loaded."""


class MissingOptions(KgragError):
    """A multiple-choice record is missing its options list."""
