"""Exception types shared across the package."""


class BxpqdError(Exception):
    """Base class; ``code`` is the short tag used in CLI diagnostics."""

    code = "error"


class ConfigurationError(BxpqdError, ValueError):
    code = "config"


class ValidationError(BxpqdError, ValueError):
    code = "validation"


class ShapeError(BxpqdError, ValueError):
    code = "shape"


class TrainingDivergenceError(BxpqdError, RuntimeError):
    code = "divergence"


class SingularityError(BxpqdError, ArithmeticError):
    code = "singular"


class FormatError(BxpqdError, ValueError):
    """Raised when a binary artifact has a bad magic, version or layout."""

    code = "format"


class HashMismatchError(BxpqdError):
    code = "hash_mismatch"
