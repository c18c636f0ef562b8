"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (see cli.py), so library code should
raise the most specific class that applies rather than bare ValueError.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class MissingArtifact(FileNotFoundError):
    """A required checkpoint, corpus or run directory does not exist."""


class CheckpointFormatError(ContractViolation):
    """Checkpoint bytes are not a valid tensor archive.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteLossError(ArithmeticError):
    """Backward pass was started from a non-finite loss value."""


class TrainingFailure(RuntimeError):
    """A training phase finished without reaching its required gate."""
