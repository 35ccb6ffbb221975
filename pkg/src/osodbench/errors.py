"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes: input/parse problems exit 1,
metric precondition violations exit 2, scenario violations exit 3.
"""


class OsodBenchError(Exception):
    """Base class for all toolkit errors."""


class ParseError(OsodBenchError):
    """An input document is malformed; the message names the offending record."""


class TaxonomyError(OsodBenchError):
    """A class id cannot be resolved against the taxonomy."""


class OstfFormatError(OsodBenchError):
    """A tensor file header is invalid (magic, version, or kind)."""


class OstfTruncationError(OsodBenchError):
    """A tensor file payload does not match its declared dimensions."""


class OstfDataError(OsodBenchError):
    """A tensor file contains values violating the type invariants."""


class ContractViolationError(OsodBenchError):
    """A caller broke a documented precondition (e.g. unsorted detections)."""


class UndefinedMetricError(OsodBenchError):
    """A metric has no defined value on this input (zero denominator)."""


class PreconditionError(OsodBenchError):
    """A metric was requested on a split that does not satisfy its preconditions."""
