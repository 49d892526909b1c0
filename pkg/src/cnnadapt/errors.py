"""Exception types shared across the package."""


class CnnAdaptError(Exception):
    """Base class for all errors raised by cnnadapt."""


class ShapeError(CnnAdaptError, ValueError):
    """Tensor or layer-graph shapes are inconsistent."""


class ModelFormatError(CnnAdaptError, ValueError):
    """A manifest, weights blob or tensor file is malformed."""


class PipelineError(CnnAdaptError, RuntimeError):
    """A transform was applied out of order (e.g. quantize before fuse)."""


class EvaluatorError(CnnAdaptError, RuntimeError):
    """The evaluator failed mid-sweep; carries what was accepted so far.

    Attributes:
        model: last accepted model before the failure.
        report: partial prune report up to the failing step.
    """

    def __init__(self, message, model=None, report=None):
        super().__init__(message)
        self.model = model
        self.report = report
