"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration, input and
validation problems exit with 3, training divergence with 4.
"""


class GuidedSedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GuidedSedError):
    """A configuration value is out of range or inconsistent."""


class InputError(GuidedSedError):
    """Runtime input data violates a precondition (NaN samples, bad shapes)."""


class ValidationError(GuidedSedError):
    """Persisted data (manifest, checkpoint, run dir) fails validation."""


class SamplingError(GuidedSedError):
    """A minibatch cannot be composed from the available pools."""


class DivergenceError(GuidedSedError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
