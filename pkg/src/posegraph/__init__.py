"""Graph-conditioned pose-to-image diffusion, small enough to run on a laptop."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointFormatError,
    ContractViolation,
    MissingArtifact,
    NonFiniteLossError,
    TrainingFailure,
)
from .tensor import Tensor, no_grad, tensor  # noqa: F401
