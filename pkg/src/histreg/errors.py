"""Exception types shared across the package."""


class HistregError(Exception):
    """Base class for all errors raised by histreg."""


class InvalidInputError(HistregError):
    """An argument violates a documented precondition."""


class DegenerateInputError(HistregError):
    """Input is structurally valid but carries no usable signal (e.g. an all-zero image)."""


class StageFailedError(HistregError):
    """A registration stage failed at every level.

    Carries the best transform found so far in ``best_transform`` so callers
    can still emit artifacts.
    """

    def __init__(self, message, best_transform=None):
        super().__init__(message)
        self.best_transform = best_transform
