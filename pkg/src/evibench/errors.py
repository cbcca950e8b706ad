"""Exception types shared across the workbench."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    """Array dimensions do not agree with what an operation requires."""


class EvaluationError(RuntimeError):
    """A non-finite value appeared while evaluating a recorded graph."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite value produced by primitive '{primitive}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class IdxFormatError(ValueError):
    """An IDX file violates the expected binary layout."""


class StratificationError(ValueError):
    """A class has too few samples to be split as requested."""


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (constant input or too few points)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class OodModelError(RuntimeError):
    """The out-of-distribution sample source failed to meet its contract."""


class ConfigError(ValueError):
    """An experiment configuration is invalid; message names the field."""

    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"config field '{field}': {detail}")


class DumpFormatError(ValueError):
    """An evidence dump is malformed; message carries the line number."""

    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"line {line}: {detail}")
