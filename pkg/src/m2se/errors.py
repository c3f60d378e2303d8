"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PipelineError):
    """Input data violates a documented invariant."""


class ConfigError(PipelineError):
    """A configuration value is missing, malformed, or inconsistent."""


class EmptyInputError(PipelineError):
    """An operation that requires at least one element received none."""


class ShapeError(PipelineError):
    """Tensor/matrix dimensions do not line up."""


class ShortageError(PipelineError):
    """A stage plan asks for more records of a task than the pool holds."""


class UndefinedMetricError(PipelineError):
    """A metric has an empty effective sample and no defined value."""


class NumericGuardError(PipelineError):
    """A numeric guard tripped (non-finite values where finite are required)."""


class MediaError(PipelineError):
    """Media could not be read or decoded."""


class ReasonGenerationError(PipelineError):
    """A describer/reasoner backend failed; carries the sample id so batch
    jobs can resume from the failing sample."""

    def __init__(self, sample_id: str, cause: Exception):
        super().__init__(f"reason generation failed for sample {sample_id!r}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


class TrainingDivergedError(PipelineError):
    """Training hit a non-finite loss; carries the loss trace up to the abort."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace
