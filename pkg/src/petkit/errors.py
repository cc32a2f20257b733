"""Exception taxonomy.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
BackendError -> 4.
"""


class PetkitError(Exception):
    """Base class for all errors raised by this package."""


# -- configuration / pattern DSL -------------------------------------------

class ConfigError(PetkitError):
    pass


class DslError(ConfigError):
    """Malformed pattern template. Carries the character position."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class PatternArityMismatch(ConfigError):
    pass


class BudgetExceeded(ConfigError):
    pass


# -- data -------------------------------------------------------------------

class DataError(PetkitError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownLabel(DataError):
    pass


class InsufficientExamples(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyTrainSet(DataError):
    pass


class EmptyUnlabeled(DataError):
    pass


class EmptySoftDataset(DataError):
    pass


class UnlabeledTooSmall(DataError):
    pass


class VocabularyError(DataError):
    """A required token (verbalizer image, input token) is missing from the vocabulary."""


# -- backends ----------------------------------------------------------------

class BackendError(PetkitError):
    pass


class UnknownToken(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


class NotTrainable(BackendError):
    pass


class NonFiniteLoss(BackendError):
    pass


class HeadNotInitialized(BackendError):
    pass


class SnapshotUnsupported(BackendError):
    pass


class ProtocolError(BackendError):
    """Wire protocol violation (bad framing, version mismatch, malformed reply)."""


# -- ensemble / distillation --------------------------------------------------

class SnapshotUnavailable(PetkitError):
    pass


class ZeroTotalWeight(PetkitError):
    pass


class MixedScoreConventions(PetkitError):
    """Models returning logits and models returning log-probabilities cannot
    be averaged in one ensemble; the combination is rejected outright."""


class ScoringError(PetkitError):
    """Scoring failed for a specific example; carries the example index."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"scoring failed for example {index}: {cause}")


# -- iterative training --------------------------------------------------------

class TooFewModels(PetkitError):
    pass


# -- verbalizer search ----------------------------------------------------------

class AvsError(PetkitError):
    pass


class EmptyCandidateSet(AvsError):
    pass


class LabelAbsent(AvsError):
    pass


class MTooLarge(AvsError):
    pass


class NonFiniteScore(AvsError):
    pass
