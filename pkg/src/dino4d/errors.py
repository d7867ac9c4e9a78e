"""Exception types raised across the package."""


class Dino4DError(Exception):
    """Base class for all package errors."""


class BehindCamera(Dino4DError, ValueError):
    """Point has non-positive depth in the camera frame."""


class EmptySet(Dino4DError, ValueError):
    pass


class ShapeMismatch(Dino4DError, ValueError):
    pass


class DimMismatch(Dino4DError, ValueError):
    pass


class NoVisiblePoints(Dino4DError, ValueError):
    pass


class NoValidPixels(Dino4DError, ValueError):
    pass


class NonOrthonormalInput(Dino4DError, ValueError):
    pass


class EmptyOmega(Dino4DError, ValueError):
    pass


class StaleCache(Dino4DError, RuntimeError):
    """Backward called with a cache that no longer matches the parameters."""


class InsufficientCorrespondences(Dino4DError, ValueError):
    pass


class DivergedPnP(Dino4DError, RuntimeError):
    pass


class StepOutOfRange(Dino4DError, IndexError):
    pass


class ConfigInvalid(Dino4DError, ValueError):
    pass


class WindowTooLong(Dino4DError, ValueError):
    pass


class NonFiniteLoss(Dino4DError, FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value


class CheckpointCorrupt(Dino4DError, IOError):
    pass
