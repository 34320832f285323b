"""Exception types shared across the package."""
from __future__ import annotations


class ReachpedError(Exception):
    """Base class; ``kind`` feeds the CLI's machine-readable error output."""

    kind = "error"

    def __init__(self, message, hint=None):
        super().__init__(message)
        self.hint = hint


class SchemaError(ReachpedError):
    kind = "schema"


class ParseError(ReachpedError):
    kind = "parse"


class SizeError(ReachpedError):
    kind = "size"


class DimensionError(ReachpedError):
    kind = "dimension"


class ContractError(ReachpedError):
    kind = "contract"


class FormatError(ReachpedError):
    """Bad magic, version, or layout in a serialized artifact."""

    kind = "format"


class NonFiniteError(ReachpedError):
    kind = "non_finite"


class MissingArtifactError(ReachpedError):
    kind = "missing_artifact"


class DataExcluded(ReachpedError):
    """A reachability trial cannot proceed; carries the exclusion reason.

    Reasons: ``memory_cap``, ``no_data``, ``too_far``, ``rank_deficient``.
    """

    kind = "excluded"

    def __init__(self, reason, message=""):
        super().__init__(message or reason)
        self.reason = reason
