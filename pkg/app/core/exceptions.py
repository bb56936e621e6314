"""Domain errors raised by the services. The command router maps them to exit codes."""
from typing import Optional


class MoEPipelineError(Exception):
    """Base error for the pipeline"""
    exit_code: int = 1


class UsageError(MoEPipelineError):
    """An operation was called with arguments that violate its preconditions"""
    exit_code = 1


class ShapeError(UsageError):
    """Array dimensions do not match the network or dataset layout"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ConfigurationError(MoEPipelineError):
    """Invalid configuration, simulator definition or action space"""
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class DataError(MoEPipelineError):
    """Input data violates the cohort contract"""
    exit_code = 3


class SchemaError(DataError):
    """Input columns or feature counts do not match the cohort schema"""


class NumericalError(MoEPipelineError):
    """NaN, divergence or non-convergence in a numerical routine"""
    exit_code = 4


class TrainingError(NumericalError):
    """Training diverged"""

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class DegenerateWeightsError(NumericalError):
    """Every importance ratio is zero at some timestep"""

    def __init__(self, t: int):
        super().__init__(f"all importance ratios are zero at t={t}")
        self.t = t


class DependencyError(MoEPipelineError):
    """An upstream artifact is missing"""
    exit_code = 1

    def __init__(self, artifact: str, producer: str):
        super().__init__(f"missing artifact '{artifact}'; run the '{producer}' subcommand first")
        self.artifact = artifact
        self.producer = producer
