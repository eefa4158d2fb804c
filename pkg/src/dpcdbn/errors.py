"""Exception hierarchy shared across the package."""


class DpcdbnError(Exception):
    """Base class for all library errors."""


class GeometryMismatch(DpcdbnError):
    """Shapes of filters / visible grid / hidden maps are inconsistent."""


class DegreeTooLarge(DpcdbnError):
    """Polynomial degree exceeds the supported guard."""


class NonFiniteFunction(DpcdbnError):
    """A target function returned a non-finite value at a quadrature node."""


class EmptyBatch(DpcdbnError):
    """An operation that needs at least one instance received none."""


class EmptyDataset(EmptyBatch):
    pass


class EmptyTestSet(EmptyBatch):
    pass


class IndivisibleShape(DpcdbnError):
    """Pooling ratio does not divide the hidden map side."""


class NonPositiveScale(DpcdbnError):
    """Laplace scale must be strictly positive."""


class NonPositiveBudget(DpcdbnError):
    """Privacy budget epsilon and sensitivity must be strictly positive."""


class NonPositiveNormalizer(DpcdbnError):
    """Frozen normalizers Z must be strictly positive."""


class AlreadyPerturbed(DpcdbnError):
    """A sealed perturbed objective cannot be perturbed again."""


class SealedLedger(DpcdbnError):
    """Appending to a privacy ledger after it was sealed."""


class ShapeMismatch(DpcdbnError):
    """Feature / weight dimensions disagree."""


class BudgetSplitMismatch(DpcdbnError):
    """Per-stage epsilon split does not sum to the declared total."""


class NegativeFeature(DpcdbnError):
    """Input features must be non-negative before normalization."""


class BadMagic(DpcdbnError):
    """IDX file magic number is not one of the supported values."""


class TruncatedFile(DpcdbnError):
    """IDX payload is shorter than its header declares."""


class DimMismatch(DpcdbnError):
    """IDX dimensions disagree with the expected layout."""


class SchemaMismatch(DpcdbnError):
    """CSV header does not match the declared schema."""


class ParseError(DpcdbnError):
    """CSV cell failed to parse; carries row and column."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class VersionMismatch(DpcdbnError):
    """Model container version byte is unsupported."""


class CorruptContainer(DpcdbnError):
    """Model container payload is truncated or fails its checksum."""
