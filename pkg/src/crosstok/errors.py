"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid input, configuration, or invariant violation."""


class MalformedTokenError(ValidationError):
    """A token that looks like a byte-fallback form but has a non-hex payload."""


class UnencodableTextError(ValidationError):
    """Text that a tokenizer cannot segment with its vocabulary."""


class DegenerateDistributionError(ValidationError):
    """A probability vector lost all of its mass (e.g. empty projection rows)."""
