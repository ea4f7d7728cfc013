class PreconditionError(ValueError):
    """An operation was called with arguments outside its contract."""


class BlowUpError(FloatingPointError):
    """A trajectory left the representable range or crossed the blow-up threshold.

    ``times`` and ``states`` hold the part of the trajectory computed before the
    abort, ``step`` the index of the failing step.
    """

    def __init__(self, message, *, step=None, time=None, times=None, states=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.times = times
        self.states = states
