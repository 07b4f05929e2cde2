"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input model or configuration violates a structural requirement."""


class TruncationDepthError(ValidationError):
    """A computation needs elements beyond the ball a truncated factor keeps."""


class SpecMismatchError(ValidationError):
    """Words from two different free-product specs were combined."""


class ConvergenceError(RuntimeError):
    """A numerical procedure did not converge."""


class DivergedAtW(ConvergenceError):
    """A factor generating function is infinite at the requested point."""

    def __init__(self, w, w_max):
        super().__init__(f"generating function diverges at w={w!r} (radius {w_max!r})")
        self.w = w
        self.w_max = w_max


class InsufficientResolution(ConvergenceError):
    """Differences fall below the numerical floor of the computation."""


class InternalConsistencyError(RuntimeError):
    """A mathematically guaranteed property failed; indicates a bug."""
