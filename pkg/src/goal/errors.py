"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: validation problems exit 2,
I/O problems exit 3 (plain OSError), anything else from this hierarchy
exits 4 as an internal invariant violation.
"""


class GoalError(Exception):
    """Base class for package errors."""

    exit_code = 4


class ValidationError(GoalError, ValueError):
    """Bad user-supplied input: flag values, schemas, dangling references."""

    exit_code = 2


class ParseError(ValidationError):
    """Malformed file content. Messages should point at the failing offset."""


class ContractError(GoalError, ValueError):
    """An internal API was called outside its documented contract."""


class DimensionError(ContractError):
    """Operand shapes do not satisfy an operation's requirements."""


class StateError(GoalError, RuntimeError):
    """Operation applied to an object in the wrong state."""
