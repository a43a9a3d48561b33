"""Exception types shared across the package."""


class CtxRouteError(Exception):
    """Base class for all library errors."""


class EmptyStream(CtxRouteError):
    """A token stream with zero tokens was supplied."""


class NonMonotonicStream(CtxRouteError):
    """shot_id decreased, or frame_id decreased within a shot."""


class IndexOutOfRange(CtxRouteError):
    """A token or chunk index fell outside the valid range."""


class ShapeMismatch(CtxRouteError):
    """Array shapes are inconsistent with each other or with the partition."""


class NonFiniteInput(CtxRouteError):
    """Q/K/V (or other numeric input) contained NaN or infinity."""


class DropDisabled(CtxRouteError):
    """Drop perturbation was requested with enabled=False."""


class SpecInvalid(CtxRouteError):
    """A scene specification violates its invariants."""


class UnknownPreset(CtxRouteError):
    """An unrecognized preset name was requested."""
