"""Exception types raised across the package."""


class InstanceError(ValueError):
    """An instance (or a mutation of one) violates a structural requirement."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ParseError(ValueError):
    """A document could not be turned into an instance, script or plan."""


class NonFiniteStateError(FloatingPointError):
    """An iterate contains NaN or inf. The message names the offending edge."""


class DivergenceError(RuntimeError):
    """Multipliers grew past the abort threshold (likely an infeasible instance)."""


class ProtocolError(RuntimeError):
    """A simulated agent did not receive a message it was entitled to."""


class OracleError(ValueError):
    """A centralized oracle cannot handle the instance it was given."""
