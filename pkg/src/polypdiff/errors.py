"""Exception types shared across the pipeline.

Every operation documents which of these it raises; callers (and the CLI)
catch ``PipelineError`` to produce machine-readable diagnostics.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


# data ingestion

class MissingMask(PipelineError):
    def __init__(self, sample_id: str):
        super().__init__(f"no mask file paired with image {sample_id!r}")
        self.sample_id = sample_id


class UnreadableFile(PipelineError):
    def __init__(self, path: str, reason: str = ""):
        super().__init__(f"cannot read {path}" + (f": {reason}" if reason else ""))
        self.path = path


class EmptyDataset(PipelineError):
    pass


class InsufficientData(PipelineError):
    pass


class IoFailure(PipelineError):
    def __init__(self, path: str, reason: str = ""):
        super().__init__(f"io failure at {path}" + (f": {reason}" if reason else ""))
        self.path = path


# configuration and shapes

class InvalidConfig(PipelineError, ValueError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


class InvalidDim(PipelineError, ValueError):
    pass


class InvalidArch(PipelineError, ValueError):
    pass


class IndivisibleSize(PipelineError, ValueError):
    pass


class MissingCondition(PipelineError):
    pass


# training and checkpoints

class NonFiniteLoss(PipelineError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite at step {step} (value {value})")
        self.step = step
        self.value = value


class VersionMismatch(PipelineError):
    pass


class CorruptCheckpoint(PipelineError):
    pass


class WrongModelKind(PipelineError):
    pass


class GenerationFailed(PipelineError):
    """Empty-sample rejection budget exhausted for some slot."""


# metrics

class EmptySet(PipelineError, ValueError):
    pass


class EmptyList(PipelineError, ValueError):
    pass


class TooFewSamples(PipelineError, ValueError):
    pass


class DimensionMismatch(PipelineError, ValueError):
    pass


class NonPSDInput(PipelineError, ValueError):
    pass


# orchestration

class RunLocked(PipelineError):
    def __init__(self, run_dir: str):
        super().__init__(f"run directory {run_dir} is locked by another stage")
        self.run_dir = run_dir
