# jointdiff/errors.py
"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class JointDiffError(Exception):
    """Base class for every error raised on purpose by jointdiff."""


class ConfigError(JointDiffError, ValueError):
    """Invalid or unknown configuration value."""


class ShapeError(JointDiffError, ValueError):
    """Array shapes do not agree."""


class ScheduleError(JointDiffError, ValueError):
    """A noise schedule violates its construction rules."""


class NonFiniteError(JointDiffError):
    """A NaN or infinity showed up in a forward pass or sampling trajectory."""

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message)
        self.stage = stage


class DivergenceError(JointDiffError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class GraphCycleError(JointDiffError):
    """The autograd graph is not acyclic."""


class NonDeterministicError(JointDiffError):
    """Two forward passes over identical inputs disagreed."""


class CheckpointError(JointDiffError):
    """Checkpoint file is malformed or has an unsupported version."""


class DatasetFormatError(JointDiffError):
    """Dataset file is malformed or has an unsupported version."""
