"""Exception hierarchy shared by every graphre module."""


class GraphreError(Exception):
    """Base class for all errors raised by graphre."""


class ParseError(GraphreError):
    """An input file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ValidationError(GraphreError):
    """Parsed data violates a structural invariant."""


class InvalidFlipError(GraphreError):
    """An edge flip is not allowed (self-loop or out-of-range node)."""


class SplitError(GraphreError):
    """A node split cannot satisfy its constraints."""


class GenerationError(GraphreError):
    """A synthetic graph specification is infeasible."""


class DivergenceError(GraphreError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class ShapeError(GraphreError):
    """Array shapes are incompatible with a model or graph."""


class AttackError(GraphreError):
    """An attack cannot run on the given input."""


class CapacityError(AttackError):
    """The graph exceeds the dense-memory limit of an attack."""


class InconsistentPerturbationError(GraphreError):
    """A flip does not match the graph state it is applied to."""

    def __init__(self, index, message):
        self.index = index
        super().__init__(f"flip #{index}: {message}")


class ProfileError(GraphreError):
    """An edge profile cannot be computed."""


class UndefinedATRError(GraphreError):
    """ATR is undefined because the specific-attack accuracy is zero."""


class ConfigError(GraphreError):
    """An experiment configuration failed validation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
