"""Exception types raised across the package.

Every error that callers are expected to handle derives from
:class:`XMatchError`, so CLI code can map failure families to exit codes
without enumerating call sites.
"""


class XMatchError(Exception):
    """Base class for all errors raised by this package."""


# --- file format / persistence ---------------------------------------------

class DataFormatError(XMatchError):
    """A persisted artifact violates its binary or JSON contract."""


class BadMagic(DataFormatError):
    """File does not begin with the expected magic bytes."""


class TruncatedPayload(DataFormatError):
    """Payload byte count disagrees with the header dimensions."""


class ChecksumMismatch(DataFormatError):
    """Manifest checksum does not match the stored payload files."""


class NonFiniteValue(XMatchError):
    """A matrix contains NaN or Inf where finite values are required."""


class IoFailure(XMatchError):
    """Underlying OS-level read/write failed."""


# --- input validation --------------------------------------------------------

class InvalidConfig(XMatchError):
    """A configuration value is outside its documented range."""


class DimensionMismatch(XMatchError):
    """Operands disagree in shape where agreement is required."""


# both names are in circulation for the same failure
ShapeMismatch = DimensionMismatch


class ZeroRow(XMatchError):
    """A row with zero norm cannot be normalized."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"row {index} has zero norm")


class InvalidTemperature(InvalidConfig):
    """Softmax temperature must be strictly positive."""


class InvalidLambda(InvalidConfig):
    """Relation-softening factor must lie strictly inside (0, 1)."""


class EmptyRow(XMatchError):
    """A target row has no finite entry to normalize over."""


class IndexOutOfRange(XMatchError):
    """A dataset index points outside the stored feature table."""


class BankEmpty(XMatchError):
    """Candidate mining requires a non-empty feature bank."""


class DegenerateRow(XMatchError):
    """Perturbation left a row with no non-zero coordinates."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"row {index} degenerated to zero")


class DegenerateOutputRow(DegenerateRow):
    """Adapter output row collapsed to zero norm before normalization."""


class NonFiniteTerm(XMatchError):
    """A loss term is NaN or Inf and cannot be aggregated."""


class NoRelevant(XMatchError):
    """A query has no relevant gallery item; ranking metrics are undefined."""

    def __init__(self, query, message=None):
        self.query = query
        super().__init__(message or f"query {query} has no relevant gallery item")


class MissingCheckpoint(XMatchError):
    """Checkpoint absent or inconsistent with the dataset it is applied to."""
