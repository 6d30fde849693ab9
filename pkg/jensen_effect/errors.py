from typing import Any, Dict, List, Optional


class JensenEffectError(Exception):
    """Base class for every failure raised by the library"""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message}


class InvalidArgumentError(JensenEffectError, ValueError):
    code = "invalid-argument"


class OutOfDomainError(JensenEffectError, ValueError):
    """A basis was evaluated outside its interval"""

    code = "out-of-domain"


class OutOfSupportError(JensenEffectError, ValueError):
    """A smoothed series was evaluated outside a fitted segment"""

    code = "out-of-support"


class IllConditionedError(JensenEffectError):
    code = "ill-conditioned"


class DegenerateSmootherError(JensenEffectError):
    code = "degenerate-smoother"


class DegenerateFunctionalError(JensenEffectError):
    code = "degenerate-functional"


class DegenerateDataError(InvalidArgumentError):
    code = "degenerate-data"


class NumericFailureError(JensenEffectError):
    """Non-finite objective; carries the last finite iterate"""

    code = "numeric-failure"

    def __init__(self, message: str, last_iterate: Optional[Any] = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class InvalidCorrelationError(JensenEffectError):
    code = "invalid-correlation"


class SurfaceInvalidError(JensenEffectError):
    code = "surface-invalid"


class EmptyDatasetError(JensenEffectError):
    code = "empty-dataset"


class SchemaError(JensenEffectError):
    """Input file does not match the expected schema

    Args:
        message: summary of the problem
        problems: one entry per offending row/column, e.g. "row 4, column time_days: not a number"
    """

    code = "schema"

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        super().__init__(message)
        self.problems = problems or []

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["problems"] = self.problems
        return out
