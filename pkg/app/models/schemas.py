"""Pydantic schemas for network specs, fitted transforms and serialized reports"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, field_validator, model_validator

from app.utils.features import N_ACTIONS, N_FEATURES


class LayerSpec(BaseModel):
    """One dense or LSTM layer"""
    kind: Literal["dense", "lstm"]
    input_dim: int
    output_dim: int
    activation: Literal["linear", "sigmoid", "tanh", "relu"] = "linear"

    @field_validator('input_dim', 'output_dim')
    @classmethod
    def check_dim(cls, v):
        if v < 1:
            raise ValueError("layer dimensions must be >= 1")
        return v

    def parameter_shapes(self) -> List[tuple]:
        if self.kind == "dense":
            return [(self.input_dim, self.output_dim), (self.output_dim,)]
        # lstm: stacked [input; hidden] weights for gates i, f, o, g
        return [(self.input_dim + self.output_dim, 4 * self.output_dim), (4 * self.output_dim,)]


class NetworkSpec(BaseModel):
    """Layer stack plus initialization scheme and seed"""
    layers: List[LayerSpec]
    init_scheme: Literal["glorot_uniform"] = "glorot_uniform"
    init_seed: int = 0

    @model_validator(mode='after')
    def check_adjacent_dims(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for index in range(1, len(self.layers)):
            if self.layers[index].input_dim != self.layers[index - 1].output_dim:
                raise ValueError(
                    f"layer {index} input_dim {self.layers[index].input_dim} does not match "
                    f"layer {index - 1} output_dim {self.layers[index - 1].output_dim}"
                )
        return self

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def is_recurrent(self) -> bool:
        return any(layer.kind == "lstm" for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        total = 0
        for layer in self.layers:
            for shape in layer.parameter_shapes():
                size = 1
                for dim in shape:
                    size *= dim
                total += size
        return total


def dense_stack(dims: List[int], hidden_activation: str, output_activation: str = "linear", seed: int = 0) -> NetworkSpec:
    """Dense network through the given widths"""
    layers = []
    for index in range(len(dims) - 1):
        activation = output_activation if index == len(dims) - 2 else hidden_activation
        layers.append(LayerSpec(kind="dense", input_dim=dims[index], output_dim=dims[index + 1], activation=activation))
    return NetworkSpec(layers=layers, init_seed=seed)


class TrainingConfig(BaseModel):
    """Optimizer and loop settings shared by the trainers"""
    batch_size: int = 128
    epochs: Optional[int] = 50
    steps: Optional[int] = None
    learning_rate: float = 1e-3
    discount: float = 0.99
    regularization: Dict[str, float] = {}
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    @field_validator('batch_size')
    @classmethod
    def check_batch_size(cls, v):
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    @field_validator('learning_rate')
    @classmethod
    def check_learning_rate(cls, v):
        if not v > 0:
            raise ValueError("learning_rate must be > 0")
        return v

    @field_validator('discount')
    @classmethod
    def check_discount(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        return v

    def penalty(self, name: str, default: float = 0.0) -> float:
        return float(self.regularization.get(name, default))


class ActionSpace(BaseModel):
    """Upper bin edges for the four nonzero dose bins of each drug"""
    iv_bin_edges: List[float]
    vaso_bin_edges: List[float]
    count: int = N_ACTIONS

    @field_validator('iv_bin_edges', 'vaso_bin_edges')
    @classmethod
    def check_edges(cls, v):
        if len(v) != 4:
            raise ValueError("exactly 4 bin edges are required")
        if v[0] <= 0:
            raise ValueError("the first edge must be positive; bin 0 is reserved for zero dose")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("bin edges must be strictly increasing")
        return v


class PreprocessStats(BaseModel):
    """Per-feature transform assignment and fitted scaling constants"""
    feature_names: List[str]
    transforms: List[Literal["standardize", "log"]]
    means: List[float]
    stds: List[float]
    mins: List[float]  # post-transform
    maxs: List[float]
    constant: List[bool]

    @model_validator(mode='after')
    def check_widths(self):
        widths = {len(self.feature_names), len(self.transforms), len(self.means), len(self.stds),
                  len(self.mins), len(self.maxs), len(self.constant)}
        if widths != {N_FEATURES}:
            raise ValueError(f"every per-feature list must have {N_FEATURES} entries")
        return self


class GatingParams(BaseModel):
    """Linear gate weights over the nine gating features"""
    w: List[float]
    b: float

    @field_validator('w')
    @classmethod
    def check_w(cls, v):
        if len(v) != 9:
            raise ValueError("the gate has exactly 9 weights")
        return v


class FeatureStats(BaseModel):
    mean: List[float]
    std: List[float]


class GateArtifact(BaseModel):
    """Serialized gate"""
    w: List[float]
    b: float
    feature_stats: FeatureStats
    seed: int
    best_restart_index: int
    objective: float

    @property
    def params(self) -> GatingParams:
        return GatingParams(w=self.w, b=self.b)


class WeightDiagnostics(BaseModel):
    fraction_nonzero_weights: float
    fraction_nonzero_final_weights: float
    histogram: Dict[str, int]  # log10-decade label -> count; "zero" holds exact zeros


class BootstrapResult(BaseModel):
    """Distribution of WDR(A) - WDR(B) over patient resamples"""
    policy_a: str
    policy_b: str
    n_requested: int
    skipped: int
    differences: List[float]
    mean: float
    percentile_2_5: float
    percentile_97_5: float
    minimum: float
    maximum: float
    original_difference: float
    fraction_negative: float


class WDRReport(BaseModel):
    estimate: float
    weights: List[List[float]]  # [t][i], t = 0..T-1
    diagnostics: WeightDiagnostics
    bootstrap: Optional[BootstrapResult] = None


class Provenance(BaseModel):
    """Config hash, seed and sha256 of every artifact a report was built from"""
    config_hash: str
    seed: int
    scale: str
    artifacts: Dict[str, str]  # artifact name -> sha256


class RunReport(BaseModel):
    policy_values: Dict[str, Dict[str, float]]  # encoding -> "<policy>/<variates>" -> WDR
    agreement: Dict[str, Dict[str, float]]
    action_grids: Dict[str, List[List[float]]]  # row 0 is the top of the grid (highest IV bin)
    diagnostics: Dict[str, WeightDiagnostics]
    bootstrap: Dict[str, Dict[str, float]]
    reward_summary: Dict[str, float]
    gate_summary: Dict[str, float]
    skipped_figures: List[str]
    provenance: Provenance
