"""Exceptions raised by the samplers and couplings."""


class IterationCapError(RuntimeError):
    """A rejection or thinning loop exceeded its iteration cap."""


class BoundViolationError(RuntimeError):
    """A thinning bound failed to dominate the event rate."""


class NotCoupledError(RuntimeError):
    """An estimator was requested on a run that never coupled."""
