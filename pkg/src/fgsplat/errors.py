"""Exception classes shared across the package.

ContractError covers violated call contracts (bad shapes, bad arguments,
missing state). ConfigurationError is the subset raised for invalid
configuration values. NumericError covers runtime numerical failures
(NaN/Inf, degenerate norms, residue checks). The CLI maps ContractError
to exit code 2 and NumericError to exit code 3.
"""


class ContractError(ValueError):
    """A documented precondition or interface contract was violated."""


class ConfigurationError(ContractError):
    """A configuration value is invalid or inconsistent."""


class NumericError(ArithmeticError):
    """A numerical invariant failed at runtime (NaN, Inf, degenerate input)."""
