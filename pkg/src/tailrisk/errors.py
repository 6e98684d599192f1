"""Shared exception types."""


class TailriskError(Exception):
    """Base class for package-specific failures."""


class PanelFormatError(TailriskError):
    """Input panel violates the documented CSV/layout contract."""


class RankDeficientError(TailriskError):
    """Design matrix is rank deficient; message names the offending columns."""


class DegenerateOutcomeError(TailriskError):
    """Outcome has no variation in a cell (e.g. zero crash events)."""


class ConvergenceError(TailriskError):
    """An iterative solver failed to meet its convergence contract."""


class ConfigError(TailriskError):
    """A run configuration or input file is unusable as given."""
