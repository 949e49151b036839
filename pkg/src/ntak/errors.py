"""Exception taxonomy shared by all ntak modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, FormatError -> 4.
"""


class NtakError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NtakError):
    """An operation received operands whose shapes do not conform."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(NtakError):
    """Invalid configuration value or malformed config file."""


class NumericError(NtakError):
    """A numeric failure (NaN/Inf) that makes continuing unsound."""


class FormatError(NtakError):
    """Malformed binary file or failed serialization round-trip."""
