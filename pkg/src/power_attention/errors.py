"""Exception types shared across the package."""


class PowerAttentionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSpec(PowerAttentionError, ValueError):
    """An expansion or attention configuration violates its invariants."""


class DimensionMismatch(PowerAttentionError, ValueError):
    """A vector argument has the wrong length for the given spec."""


class ShapeMismatch(PowerAttentionError, ValueError):
    """Batched arrays disagree on batch/time/head/feature sizes."""


class NonFiniteInput(PowerAttentionError, ValueError):
    """An input array contains NaN or infinity."""


class OddPowerWithNormalize(PowerAttentionError, ValueError):
    """Score-sum normalization requires an even power degree."""


class StateTooLarge(PowerAttentionError, MemoryError):
    """The expanded recurrent state would exceed the memory budget."""


class ZeroDenominator(PowerAttentionError, ArithmeticError):
    """A normalization denominator is zero or negative."""
