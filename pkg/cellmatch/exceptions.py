"""Exceptions raised by cellmatch.

Value-domain problems derive from ``ValueError`` so callers that only care
about bad input can catch that; solver and pipeline failures derive from
``RuntimeError``.
"""


class CellmatchError(Exception):
    """Base class of every error raised on purpose by this package."""


class ConfigError(CellmatchError, ValueError):
    """Invalid or unreadable run configuration."""


class DegenerateCloud(CellmatchError, ValueError):
    """A point cloud does not span three dimensions."""


class NoMatches(CellmatchError, RuntimeError):
    """Too few correspondences to fit a transform."""


class NonPositiveVariance(CellmatchError, ValueError):
    pass


class ZeroWeights(CellmatchError, ValueError):
    pass


class SamePair(CellmatchError, ValueError):
    """A quadratic cost was requested for a node paired with itself."""


class ForbiddenPair(CellmatchError, ValueError):
    """A matching uses an assignment the instance does not allow."""


class TooLarge(CellmatchError, ValueError):
    """Instance exceeds the size bound of an exhaustive solver."""


class MissingPair(CellmatchError, ValueError):
    """A pairwise matching needed by a multi-matching operation is absent."""


class InconsistentInput(CellmatchError, ValueError):
    """A multi-matching expected to be cycle consistent is not."""


class InsufficientSupport(CellmatchError, ValueError):
    """Too few samples to estimate an atlas entry."""


class EmptySpace(CellmatchError, ValueError):
    """A search space without dimensions."""


class NoFeasible(CellmatchError, RuntimeError):
    """No Pareto candidate satisfies the density cap."""


class PackingFailed(CellmatchError, RuntimeError):
    """Label means could not be placed with the requested separation."""


class MissingLabels(CellmatchError, ValueError):
    """Ground-truth labels are required but absent."""


class StageFailed(CellmatchError, RuntimeError):
    """Wraps an error raised while running one pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super(StageFailed, self).__init__(
            'stage {0} failed: {1}: {2}'.format(
                stage, type(cause).__name__, cause))
