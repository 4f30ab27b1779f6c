class InputError(Exception):
    """Base class of errors caused by invalid input, for example, a malformed configuration file. The command-line
    interface exits with status 2 if it encounters one of them."""

    pass


class RuntimeNumericError(Exception):
    """Base class of errors caused by numerical failures at runtime, for example, a gradient that overflowed. The
    command-line interface exits with status 3 if it encounters one of them."""

    pass


class ConfigError(InputError):
    """Raised when a configuration document is malformed or violates a constraint, for example, a negative learning
    rate."""

    pass


class InvalidActionError(InputError):
    """Raised when an action refers to a model index that does not exist or selects the same model twice."""

    pass


class InvalidPairError(InputError):
    """Raised when a pair of samples cannot be scored, for example, because a modality quality is missing."""

    pass


class ShapeError(InputError):
    """Raised when array dimensions do not line up, for example, when a policy head does not match its model pool."""

    pass


class ProtocolError(InputError):
    """Raised when an evaluation protocol cannot be carried out, for example, when a probe has no gallery match."""

    pass


class CombinationLimitError(InputError):
    """Raised when exhaustive enumeration would exceed the configured number of joint actions."""

    pass


class DegenerateDistributionError(RuntimeNumericError):
    """Raised when a categorical distribution has no probability mass left to sample from."""

    pass


class NumericError(RuntimeNumericError):
    """Raised when a computation produces values that are not finite."""

    pass
