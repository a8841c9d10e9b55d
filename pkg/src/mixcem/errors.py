"""Exception types raised by the estimation routines."""

import numpy as np


class MixtureError(Exception):
    pass


class DomainError(MixtureError, ValueError):
    """Observation outside the support of a family, or invalid parameter."""


class DecompositionError(MixtureError, np.linalg.LinAlgError):
    """A covariance matrix failed its Cholesky factorisation."""


class DimensionError(MixtureError, ValueError):
    pass


class DegenerateComponentError(MixtureError):
    def __init__(self, group, message="", iteration=None):
        self.group = group
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"component {group} degenerate{where}: {message}".rstrip(": "))


class MonotonicityError(MixtureError):
    def __init__(self, iteration, previous, current):
        self.iteration = iteration
        self.previous = previous
        self.current = current
        super().__init__(
            f"objective decreased at iteration {iteration}: {previous!r} -> {current!r}"
        )


class CycleError(MixtureError):
    """Label vectors repeat with a period > 1; ``best`` holds the best iterate seen."""

    def __init__(self, period, iteration, best=None):
        self.period = period
        self.iteration = iteration
        self.best = best
        super().__init__(f"label cycle of period {period} detected at iteration {iteration}")


class SingularHessianError(MixtureError, np.linalg.LinAlgError):
    pass


class CollinearityError(MixtureError, np.linalg.LinAlgError):
    def __init__(self, columns, group=None):
        self.columns = list(columns)
        self.group = group
        super().__init__(f"rank-deficient normal matrix (group {group}); offending columns {self.columns}")


class InsufficientDataError(MixtureError):
    pass


class AllStartsFailedError(MixtureError):
    def __init__(self, causes):
        self.causes = list(causes)
        lines = "; ".join(f"start {i}: {c}" for i, c in self.causes)
        super().__init__(f"all {len(self.causes)} starts failed ({lines})")


class ScenarioAbortedError(MixtureError):
    pass


class MixtureWarning(UserWarning):
    pass
