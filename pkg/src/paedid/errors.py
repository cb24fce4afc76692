"""Exception hierarchy shared by the pipeline modules.

Each class maps to one CLI exit code (see ``paedid.cli``).
"""


class PaedidError(Exception):
    exit_code = 1


class ConfigError(PaedidError, ValueError):
    exit_code = 2


class FormatError(PaedidError, ValueError):
    """Unsupported or malformed input file (PNG mode, bit depth, ...)."""

    exit_code = 3


class CorruptFileError(FormatError):
    """Binary tensor / checkpoint / bank file failed validation."""


class DivergenceError(PaedidError, ArithmeticError):
    exit_code = 4


class ShapeMismatchError(PaedidError, ValueError):
    exit_code = 5
