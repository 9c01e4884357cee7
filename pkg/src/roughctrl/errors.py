"""Exception types shared across the package."""


class RoughCtrlError(Exception):
    """Base class for all package errors."""


class InvalidInput(RoughCtrlError, ValueError):
    pass


class UnsupportedRegularity(RoughCtrlError, ValueError):
    """Raised when a requested Hölder regularity is at or below 1/3."""


class DivergenceError(RoughCtrlError, ArithmeticError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


class InversionError(RoughCtrlError, ArithmeticError):
    def __init__(self, msg, iterations, residual):
        super().__init__(f"{msg} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class MonotonicityError(RoughCtrlError):
    def __init__(self, msg, iteration, values):
        super().__init__(msg)
        self.iteration = iteration
        self.values = list(values)


class ConfigError(InvalidInput):
    """Malformed or inconsistent experiment configuration."""
