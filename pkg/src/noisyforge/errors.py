"""Exception taxonomy shared across the package.

Each class maps to one failure family so the CLI can translate them into
stable exit codes without string matching.
"""


class NoisyForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(NoisyForgeError):
    """Tensor or layer dimensions do not compose."""


class UsageError(NoisyForgeError):
    """An operation was called outside its contract (bad arguments, wrong mode)."""


class InputError(NoisyForgeError):
    """Payload values violate a precondition (e.g. out-of-range label)."""


class FormatError(NoisyForgeError):
    """A serialized artifact (checkpoint, dataset file, config) is malformed."""


class ConfigError(NoisyForgeError):
    """Experiment configuration is invalid; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TrainingDiverged(NoisyForgeError):
    """Loss became non-finite; carries the epoch/batch where it happened."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
