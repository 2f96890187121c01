"""Exception types shared across the package."""


class FedSophiaError(Exception):
    pass


class ShapeError(FedSophiaError, ValueError):
    """Operand dimensions do not line up."""


class DomainError(FedSophiaError, ValueError):
    """Input outside the domain of the operation (non-finite, zero divisor)."""


class FormatError(FedSophiaError, ValueError):
    """A data file does not follow the expected binary layout."""


class ConsistencyError(FedSophiaError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class CapacityError(FedSophiaError, ValueError):
    """Not enough items to satisfy the request."""


class DivergenceError(FedSophiaError, ArithmeticError):
    """An iterative solver blew up."""


class ConfigError(FedSophiaError, ValueError):
    """Invalid experiment configuration. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        super().__init__(str(self))

    def __str__(self):
        where = ""
        if self.path is not None:
            where = f"{self.path}:"
            if self.line is not None:
                where += f"{self.line}:"
            where += " "
        elif self.line is not None:
            where = f"line {self.line}: "
        return where + self.message
