"""Exception types shared across the package."""


class MvtError(Exception):
    """Base class for library errors."""


class DimensionError(MvtError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(MvtError, ValueError):
    """A call violated an operation's precondition."""


class FormatError(MvtError, ValueError):
    """A file or record does not match its documented format."""


class SelectionError(MvtError, RuntimeError):
    """View selection could not be decided from the given skeleton."""


class SingularityError(MvtError, ArithmeticError):
    """A formula hit a division-by-zero regime."""


class UsageError(MvtError, ValueError):
    """Bad command-line usage (maps to exit code 2)."""
