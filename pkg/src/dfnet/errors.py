"""Exception types shared across the package."""


class DFNetError(Exception):
    """Base class for all errors raised by dfnet."""


class ShapeMismatchError(DFNetError, ValueError):
    pass


class InvalidAxisError(DFNetError, ValueError):
    pass


class KernelTooLargeError(DFNetError, ValueError):
    pass


class NonFiniteGradientError(DFNetError, ArithmeticError):
    pass


class MalformedFileError(DFNetError, ValueError):
    """Raised when a DFT1 payload cannot be parsed.

    The byte offset at which parsing failed is kept on ``offset``.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RankMismatchError(DFNetError, ValueError):
    pass


class InvalidInputSizeError(DFNetError, ValueError):
    pass


class NotNormalizedError(DFNetError, ValueError):
    """Probabilities along an axis do not sum to one within tolerance."""


class EvalModeUpdateError(DFNetError, RuntimeError):
    pass


class ReplicaDivergenceError(DFNetError, RuntimeError):
    pass


class SizeCapExceededError(DFNetError, ValueError):
    pass


class UpsamplingRequestedError(DFNetError, ValueError):
    pass


class OutOfRangeError(DFNetError, ValueError):
    pass


class TooFewFramesError(DFNetError, ValueError):
    pass


class DatasetKindError(DFNetError, ValueError):
    pass


class TrainingDivergedError(DFNetError, RuntimeError):
    """Loss became NaN/Inf; ``iteration`` records where."""

    def __init__(self, iteration: int, loss: float, what: str = "loss"):
        detail = f"non-finite loss {loss!r}" if what == "loss" else f"non-finite {what} (loss {loss!r})"
        super().__init__(f"{detail} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class EmptyGroupError(DFNetError, ValueError):
    pass


class ConfigError(DFNetError, ValueError):
    pass
