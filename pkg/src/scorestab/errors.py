"""Exception hierarchy shared by every module."""


class ScoreStabError(Exception):
    """Base class for library errors."""


class DomainError(ScoreStabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(ScoreStabError, ValueError):
    """A configuration is invalid or unsupported."""


class UnsupportedOperationError(ScoreStabError, TypeError):
    """The operation is not defined for this model variant."""


class ContractViolation(ScoreStabError, ValueError):
    """Inputs break a documented precondition shared between arguments."""


class DivergedRunError(ScoreStabError, RuntimeError):
    """A training run produced a non-finite parameter vector."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DivergedSampleError(ScoreStabError, RuntimeError):
    """A sampler trajectory left the finite range."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step
