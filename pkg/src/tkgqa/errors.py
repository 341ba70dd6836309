"""Exception types shared across the package."""


class TkgqaError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TkgqaError):
    """A data file violates its documented format."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        super().__init__(prefix + message)


class ConfigError(TkgqaError):
    """A configuration value or combination of values is invalid."""


class ContractViolation(TkgqaError):
    """An internal invariant was violated (bad shapes, bad bounds)."""


class GradCheckError(TkgqaError):
    """A finite-difference gradient check could not be carried out."""


class GenerationError(TkgqaError):
    """A synthetic world specification is infeasible."""


class EvaluationError(TkgqaError):
    """Metric inputs are inconsistent (missing ids, mismatched files)."""


class TrainingDiverged(TkgqaError):
    """Training produced a non-finite loss."""


class CheckpointError(TkgqaError):
    """A checkpoint file is malformed or incompatible."""
