"""Exception types shared across the package."""


class MrtiError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MrtiError, ValueError):
    """Shapes, selectors or settings that do not fit together."""


class NumericError(MrtiError, ArithmeticError):
    """A non-finite value appeared in weights, inputs or a loss."""


class DomainError(MrtiError, ValueError):
    """An argument outside its mathematical domain (e.g. t outside [0, 1])."""


class LookupFailure(MrtiError, KeyError):
    """Unknown token id, word or pseudo-word."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingAborted(MrtiError, RuntimeError):
    """Training diverged or produced a non-finite loss."""


class CorruptFile(ConfigurationError):
    """A checkpoint, concept or samples file that cannot be decoded or fails its checksum."""
