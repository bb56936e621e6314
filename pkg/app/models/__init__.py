"""Data models and types for the pipeline"""
from .schemas import (
    LayerSpec,
    NetworkSpec,
    dense_stack,
    TrainingConfig,
    ActionSpace,
    PreprocessStats,
    GatingParams,
    FeatureStats,
    GateArtifact,
    WeightDiagnostics,
    BootstrapResult,
    WDRReport,
    Provenance,
    RunReport
)

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "dense_stack",
    "TrainingConfig",
    "ActionSpace",
    "PreprocessStats",
    "GatingParams",
    "FeatureStats",
    "GateArtifact",
    "WeightDiagnostics",
    "BootstrapResult",
    "WDRReport",
    "Provenance",
    "RunReport"
]
