"""
Exception hierarchy shared by every CALNet component
"""
from typing import Optional


class CalnetError(Exception):
    """Base class for all CALNet errors"""


class ConfigurationError(CalnetError):
    """Invalid configuration value or mismatched dimensions"""


class EnvironmentConfigurationError(ConfigurationError):
    """The environment cannot produce a valid initial state"""


class TrainingError(CalnetError):
    """Training produced a non-finite quantity"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class EnvironmentFault(CalnetError):
    """The environment received or produced a non-finite value"""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ResampleRequest(CalnetError):
    """Initial position rejected by the environment; draw another one"""


class CheckpointError(CalnetError):
    """Checkpoint file is corrupt, truncated or inconsistent"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class FingerprintMismatchError(CheckpointError):
    """Attribute module was trained on a different base policy"""
