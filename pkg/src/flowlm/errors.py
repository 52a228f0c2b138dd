"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument violated a documented precondition (shape, range, vocab)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values; message carries diagnostics."""


class ConfigurationError(ValueError):
    """A spec/config combination is degenerate (e.g. rank-deficient projection)."""


class GenerationError(RuntimeError):
    """Data generation could not satisfy its constraints (e.g. negative-pair
    construction exhausted its retry budget)."""
