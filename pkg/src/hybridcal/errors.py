"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2, any
NumericalAbort -> 3, SchemaError -> 4. Everything else is a bug.
"""


class ConfigError(ValueError):
    """Bad or unknown configuration key, section, or value."""


class SchemaError(ValueError):
    """Input file written by a newer (or foreign) schema."""


class NumericalAbort(RuntimeError):
    """Base for failures of the numerics rather than of the code."""


class NonFiniteError(NumericalAbort):
    """A primitive produced nan or inf."""


class BlowUpError(NumericalAbort):
    """State norm exceeded the blow-up threshold during a rollout.

    Carries the step index at which the threshold was crossed and the
    partial trajectory up to (and including) the offending state.
    """

    def __init__(self, message, step_index=None, trajectory=None):
        super().__init__(message)
        self.step_index = step_index
        self.trajectory = trajectory


class DegenerateEnsembleError(NumericalAbort):
    """Ensemble perturbations are (numerically) identical; no regression possible."""


class TapeMemoryError(NumericalAbort):
    """Tape node budget exhausted; shorten the rollout or raise the limit."""


class TrainingAborted(NumericalAbort):
    """Too many batches blew up in one epoch; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
