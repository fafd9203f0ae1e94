"""Exception hierarchy shared by every module."""


class MSAError(Exception):
    """Base class for all package errors."""


class ValidationError(MSAError):
    """Raised by :func:`mspseudo.core.validate_dataset`.

    ``issues`` lists every violated invariant, not just the first one.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        lines = [str(issue) for issue in self.issues[:20]]
        if len(self.issues) > 20:
            lines.append(f"... and {len(self.issues) - 20} more")
        super().__init__("invalid dataset:\n  " + "\n  ".join(lines))

    @property
    def codes(self):
        return sorted({issue.code for issue in self.issues})


class GraphError(MSAError):
    pass


class UnknownSubject(MSAError, KeyError):
    pass


class GridBeforeOrigin(MSAError):
    pass


class EmptyLandmark(MSAError):
    pass


class NoInteriorTransitions(MSAError):
    pass


class ScopeEmpty(MSAError):
    pass


class NonFiniteLoss(MSAError):
    def __init__(self, epoch, learning_rate):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(
            f"loss became non-finite at epoch {epoch} (learning_rate={learning_rate})"
        )


class ShapeMismatch(MSAError):
    pass


class FoldTooSmall(MSAError):
    pass


class NoEvaluableSubjects(MSAError):
    pass


class UnreachableCensoringRate(MSAError):
    pass


class InsufficientUncensored(MSAError):
    pass


class ConfigError(MSAError):
    pass


class ParseError(MSAError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        parts = [str(path)] if path is not None else []
        if line is not None:
            parts.append(f"line {line}")
        where = ", ".join(parts)
        super().__init__(f"{where}: {message}" if where else message)
