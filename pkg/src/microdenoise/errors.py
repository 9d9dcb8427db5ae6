"""Exception classes shared across the toolkit.

Four error families matter to callers: rejected inputs (shape/domain),
configuration problems, degenerate data, and numeric failures. The CLI
maps each family to a distinct exit code.
"""


class MicrodenoiseError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(MicrodenoiseError, ValueError):
    """Rejected input: shapes or domains do not satisfy an operation's contract."""


class FormatError(MicrodenoiseError, ValueError):
    """Rejected input: a file is unreadable, corrupt, or in an unsupported variant."""


class ConfigError(MicrodenoiseError, ValueError):
    """Invalid configuration value, key, or file content."""


class DegenerateInputError(MicrodenoiseError, ValueError):
    """Input is technically well-formed but carries no usable signal (e.g. constant crop)."""


class CheckpointError(MicrodenoiseError, ValueError):
    """Checkpoint file missing, corrupt, or inconsistent with the requested network."""


class NumericError(MicrodenoiseError, ArithmeticError):
    """Non-finite values where finite ones are required (e.g. NaN training loss)."""


class InternalError(MicrodenoiseError, RuntimeError):
    """A supposedly-impossible state was reached; always a bug."""
