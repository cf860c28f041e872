"""Exception and warning classes shared across the package."""


class SFPCAError(Exception):
    """Base class for errors raised by sfpca."""


class DimensionError(SFPCAError, ValueError):
    """A dimension is too small or two dimensions disagree."""


class StructureMatrixError(SFPCAError, ValueError):
    """A structure matrix could not be parsed or is not symmetric PSD."""


class ConvergenceWarning(UserWarning):
    """An iterative routine stopped at its iteration cap."""
