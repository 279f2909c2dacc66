"""Exception hierarchy; the CLI maps each family to a fixed exit code."""


class IterCQRError(Exception):
    pass


class ValidationError(IterCQRError, ValueError):
    """Bad input values or violated data invariants."""


class FormatError(ValidationError):
    """A file could not be parsed or has the wrong version/schema."""


class ExternalServiceError(IterCQRError):
    """The LLM endpoint failed after retries, or refused the request."""


class InvariantError(IterCQRError):
    """Internal invariant broken: non-finite loss, checksum mismatch, ..."""
