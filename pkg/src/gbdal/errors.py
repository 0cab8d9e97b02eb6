"""Exception hierarchy shared by all modules; the CLI maps these to exit codes."""


class GbdalError(Exception):
    exit_code = 1


class ConfigError(GbdalError, ValueError):
    """Invalid configuration or flag values."""

    exit_code = 1


class ContractError(GbdalError, ValueError):
    """A caller violated a shape/label/value precondition."""

    exit_code = 1


class InsufficientDataError(GbdalError):
    """Fewer (distinct) features than clusters."""

    exit_code = 1


class FormatError(GbdalError, OSError):
    """A container or checkpoint file is corrupt, truncated or has the wrong version."""

    exit_code = 2


class NumericalError(GbdalError, FloatingPointError):
    """A loss or gradient became non-finite."""

    exit_code = 3
