"""Error types shared by the binary file formats and numerical routines."""


class FormatError(Exception):
    """A binary artifact (dataset or parameter file) violates its format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ends before the payload announced in its header."""


class DimensionMismatchError(FormatError):
    """Header dimensions are invalid or inconsistent with the payload/caller."""


class DataError(Exception):
    """A referenced dataset is missing or unusable for the requested run."""


class NumericalError(Exception):
    """A numerical acceptance gate failed (e.g. the gradient audit)."""


class DegeneratePrecoderError(ValueError):
    """The digital precoder is exactly zero, so power cannot be normalized."""


class SingularChannelError(ValueError):
    """Channel matrix is rank deficient; zero-forcing is undefined."""
