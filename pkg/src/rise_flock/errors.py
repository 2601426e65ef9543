"""Exception hierarchy shared by all modules."""


class RiseFlockError(Exception):
    pass


class ValidationError(RiseFlockError, ValueError):
    """Malformed input: bad topology, dimensions, config keys, gains."""


class NumericalError(RiseFlockError, ArithmeticError):
    """A computation produced non-finite or ill-conditioned results."""


class SingularityError(NumericalError):
    """The control effectiveness matrix lost full row rank."""

    def __init__(self, message, agent=None, t=None, cond=None):
        super().__init__(message)
        self.agent = agent
        self.t = t
        self.cond = cond


class DivergenceError(NumericalError):
    """The closed loop blew up. Carries the log recorded so far."""

    def __init__(self, message, agent=None, t=None, partial_log=None):
        super().__init__(message)
        self.agent = agent
        self.t = t
        self.partial_log = partial_log


class InsufficientDataError(RiseFlockError, ValueError):
    pass
