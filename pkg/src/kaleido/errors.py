"""Exception types shared across the package.

The CLI maps these onto exit codes: contract violations exit 1, IO
problems exit 2.
"""


class KaleidoError(Exception):
    """Base class for all package errors."""


class ContractError(KaleidoError):
    """An argument or state violated a documented precondition."""


class GrammarError(ContractError):
    """A latent token stream does not parse under its scheme grammar."""


class NonFiniteError(ContractError):
    """A NaN or infinity showed up where finite values are required.

    The message names the offending tensor or sampler step so training
    aborts are debuggable.
    """
