"""Exception types shared across the package.

ConfigError maps to CLI exit code 1, everything else to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation (log of <= 0, zero-norm normalize)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file does not match its documented binary/JSON layout."""


class CorruptRecordError(FormatError):
    """A record parsed structurally but carries impossible values."""


class EmptyDatasetError(ValueError):
    """A dataset builder was asked to produce zero instances."""


class TaskSamplingError(ValueError):
    """A meta-task cannot be sampled from the given data."""


class ScheduleExhaustedError(RuntimeError):
    """An optimizer step was requested past the end of its schedule."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, value):
        self.step = step
        super().__init__(f"non-finite training loss {value!r} at step {step}")


class DegenerateBatchError(ValueError):
    """A loss batch has no usable anchors."""
