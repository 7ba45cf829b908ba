"""Exception hierarchy shared across the pipeline."""


class PitchgraphError(Exception):
    """Base class for all pitchgraph errors."""


class ParseError(PitchgraphError):
    """Malformed input file (bad magic, bad line, truncated payload)."""


class ValidationError(PitchgraphError):
    """A parsed value violates a documented invariant."""


class ContractError(PitchgraphError):
    """A function precondition was violated by the caller."""


class DependencyError(PitchgraphError):
    """A pipeline stage is missing an upstream artifact."""
