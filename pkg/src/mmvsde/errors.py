"""Exception hierarchy."""


class MMVSDEError(Exception):
    pass


class InvalidInputError(MMVSDEError, ValueError):
    """Non-finite or malformed numeric input."""


class UsageError(MMVSDEError, ValueError):
    """An operation was called outside its preconditions."""


class ConfigurationError(MMVSDEError, ValueError):
    pass


class EmptySampleError(MMVSDEError):
    pass


class ScenarioError(MMVSDEError):
    """A scenario violates a structural hypothesis at run time (e.g. a jump leaves the domain)."""


class DomainEscapeError(MMVSDEError, AssertionError):
    """The scheme produced a state outside the closed domain. Always a bug."""
