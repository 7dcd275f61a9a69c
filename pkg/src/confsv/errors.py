"""Exception types shared across the toolkit."""


class ConfsvError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ConfsvError, ValueError):
    """Shapes or axis lengths are incompatible with the requested operation."""


class InputTooShortError(DimensionError):
    """A time axis is too short for the requested framing or convolution."""


class ContractError(ConfsvError, ValueError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(ConfsvError, ValueError):
    """An invalid or inconsistent configuration."""


class DataError(ConfsvError, ValueError):
    """Malformed or missing input data (manifests, trials, stores)."""


class NumericError(ConfsvError, ArithmeticError):
    """NaN/Inf produced where finite values are required."""


class InfeasibleTargetError(ConfsvError, ValueError):
    """A CTC target cannot be aligned within the available frames."""


class DegenerateLabelsError(ConfsvError, ValueError):
    """A metric or fit needs both trial classes / more than one class."""


class DegenerateCohortError(ConfsvError, ValueError):
    """Cohort statistics are unusable (zero variance or too few scores)."""


class DegenerateEmbeddingError(ConfsvError, ValueError):
    """A zero embedding cannot be cosine-scored."""


class DegenerateNoiseError(ConfsvError, ValueError):
    """A noise signal with zero power cannot be SNR-scaled."""


class TrialParseError(DataError):
    """A trial list line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingEmbeddingError(DataError):
    """A trial references an id absent from the embedding store."""


class CheckpointError(DataError):
    """A checkpoint file is malformed or incompatible."""
