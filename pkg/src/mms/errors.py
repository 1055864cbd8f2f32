"""Exception types raised across the package."""


class MMSError(Exception):
    """Base class for all package errors."""


class InvalidShape(MMSError, ValueError):
    pass


class ShapeError(MMSError, ValueError):
    pass


class InvalidLoss(MMSError, ValueError):
    pass


class InvalidEps(MMSError, ValueError):
    pass


class GeometryError(MMSError, ValueError):
    pass


class ConfigError(MMSError, ValueError):
    pass


class EmptyMaskError(MMSError, ValueError):
    pass


class EmptySelectionError(MMSError, ValueError):
    pass


class RangeError(MMSError, ValueError):
    pass


class LayoutError(MMSError, ValueError):
    pass


class ContractViolation(MMSError, RuntimeError):
    pass


class MaskBudgetError(MMSError, RuntimeError):
    """A mask sampler ran out of attempts before reaching its ratio.

    The partially built mask is available as ``partial`` so callers can
    decide whether it is still usable.
    """

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial
