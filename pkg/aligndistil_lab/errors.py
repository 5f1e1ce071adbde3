"""Exception hierarchy shared by every aligndistil-lab module."""


class LabError(Exception):
    """Base class for all errors raised by aligndistil-lab."""


class ContextTooLongError(LabError):
    """Prefix reaches or exceeds the policy's max_context."""


class TokenOutOfRangeError(LabError):
    """A token id lies outside [0, V)."""


class InvalidContextError(LabError):
    """Context or sequence violates the EOS / prompt-length conventions."""


class InstanceTooLargeError(LabError):
    """Exact enumeration or tabular storage would exceed its size limit."""


class VocabularyMismatchError(LabError):
    """Two policies or vectors disagree on V, T_max or prompt length."""


class EmptyBatchError(LabError):
    """An operation that averages over a batch received no elements."""


class NonFiniteError(LabError):
    """A loss, gradient or evaluation produced NaN or Inf."""


class UnnormalizedError(LabError):
    """A probability vector does not sum to one."""


class OutOfRangeError(LabError):
    """A scalar argument lies outside its documented range."""


class ConfigError(LabError):
    """Experiment configuration is invalid (CLI exit code 3)."""


class DependencyError(LabError):
    """A stage needs an artifact that an upstream stage did not produce."""

    def __init__(self, stage, missing_stage, path):
        self.stage = stage
        self.missing_stage = missing_stage
        self.path = path
        super().__init__(
            f"stage '{stage}' requires {path}, produced by stage "
            f"'{missing_stage}'"
        )


class StageError(LabError):
    """A pipeline stage failed; the pipeline halts at that stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class DivergenceError(LabError):
    """Training produced a non-finite loss.

    ``records`` holds every RunRecord written so far; the last one is the
    diagnostic record of the failing step.
    """

    def __init__(self, step, records):
        self.step = step
        self.records = records
        super().__init__(f"non-finite loss at step {step}")


class CheckFailure(LabError):
    """A numerical check failed; ``report`` carries the full result."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
