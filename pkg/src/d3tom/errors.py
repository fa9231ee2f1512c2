class D3ToMError(Exception):
    """Base class for errors raised by this package."""


class InvalidInput(D3ToMError, ValueError):
    """An argument violates an operation's precondition."""


class ContractError(D3ToMError, RuntimeError):
    """A collaborator broke its side of an internal contract."""
