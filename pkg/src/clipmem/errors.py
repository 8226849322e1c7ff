"""Shared exception types.

The split mirrors the CLI exit codes: usage problems are argparse's
business (exit 2), :class:`ConfigError` maps to exit 3 and
:class:`DataFormatError` to exit 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class ContractViolation(RuntimeError):
    """An operation precondition was violated by the caller."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataFormatError(ValueError):
    """An input file is malformed (bad magic, version, or payload size)."""
