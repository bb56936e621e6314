import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type

from pydantic import ValidationError, field_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource

from app.core.exceptions import ConfigurationError

ENV_PREFIX = "MOE_"


class Settings(BaseSettings):
    # General
    SEED: int = 0
    SCALE: Literal["desk", "paper"] = "desk"
    OUTPUT_DIR: Path = Path("runs/desk")
    COHORT_PATH: Optional[Path] = None  # user-supplied cohort CSV; simulate writes OUTPUT_DIR/cohort.csv otherwise
    DISCOUNT: float = 0.99
    PARALLEL_WORKERS: int = 4

    # Cohort simulator
    SIM_N_PATIENTS: int = 2000
    SIM_HORIZON: int = 20

    # Data pipeline
    DATA_TRAIN_RATIO: float = 0.75

    # Recurrent autoencoder
    ENCODER_HIDDEN_DIM: int = 128
    ENCODER_BATCH_SIZE: int = 128
    ENCODER_EPOCHS: int = 50
    ENCODER_LEARNING_RATE: float = 1e-3

    # Sparse autoencoder (non-recurrent baseline)
    SPARSE_BATCH_SIZE: int = 128
    SPARSE_EPOCHS: int = 50
    SPARSE_LEARNING_RATE: float = 1e-3
    SPARSE_TARGET_ACTIVATION: float = 0.05
    SPARSE_PENALTY_WEIGHT: float = 1e-3

    # Mortality predictor / reward
    REWARD_HIDDEN_DIMS: List[int] = [64, 32]
    REWARD_BATCH_SIZE: int = 128
    REWARD_EPOCHS: int = 50
    REWARD_LEARNING_RATE: float = 1e-3
    REWARD_INPUT_GRAD_WEIGHT: float = 1e-3
    REWARD_HISTOGRAM_BINS: int = 40

    # Dueling double DQN
    DQN_STEPS: int = 20000
    DQN_BATCH_SIZE: int = 30
    DQN_LEARNING_RATE: float = 1e-3
    DQN_PENALTY_WEIGHT: float = 1.0
    DQN_REWARD_MAX: float = 3.0
    DQN_TARGET_SYNC: int = 1000
    DQN_PER_ALPHA: float = 0.6
    DQN_PER_BETA_START: float = 0.4
    DQN_PER_BETA_END: float = 1.0
    DQN_PRIORITY_FLOOR: float = 1e-6
    DQN_HIDDEN_DIM: int = 128
    DQN_HEAD_DIM: int = 64
    DQN_SOFTMAX_TEMPERATURE: float = 1.0
    DQN_LOG_EVERY: int = 1000

    # Kernel expert / behavior policy
    KERNEL_K: int = 300
    KERNEL_BEHAVIOR_K: int = 300
    KERNEL_CANDIDATE_KS: List[int] = [200, 250, 300, 350, 400, 450, 500]
    KERNEL_CROSS_VALIDATE: bool = True
    KERNEL_VALIDATION_FRACTION: float = 0.2
    BEHAVIOR_SMOOTHING: float = 1e-3
    RESTRICTION_THRESHOLD: float = 0.01

    # Gating function
    GATE_RESTARTS: int = 100
    GATE_EPOCHS: int = 50
    GATE_MINIBATCH: int = 256
    GATE_LEARNING_RATE: float = 1e-2
    GATE_INIT_W_RANGE: float = 1.0
    GATE_INIT_B_RANGE: float = 2.0
    GATE_CORNER_BIAS: float = 20.0

    # Evaluation
    BOOTSTRAP_SAMPLES: int = 200
    REPORT_AGREEMENT: Literal["argmax", "tv"] = "argmax"

    # Logging Configuration
    LOG_LEVEL: str = "INFO"

    @field_validator('DISCOUNT')
    @classmethod
    def check_discount(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("must lie in (0, 1]")
        return v

    @field_validator('DATA_TRAIN_RATIO', 'KERNEL_VALIDATION_FRACTION', 'SPARSE_TARGET_ACTIVATION', 'RESTRICTION_THRESHOLD')
    @classmethod
    def check_open_unit_interval(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("must lie in (0, 1)")
        return v

    @field_validator(
        'ENCODER_LEARNING_RATE', 'SPARSE_LEARNING_RATE', 'REWARD_LEARNING_RATE',
        'DQN_LEARNING_RATE', 'GATE_LEARNING_RATE', 'DQN_SOFTMAX_TEMPERATURE',
        'BEHAVIOR_SMOOTHING', 'DQN_PRIORITY_FLOOR'
    )
    @classmethod
    def check_positive(cls, v):
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator(
        'SIM_N_PATIENTS', 'SIM_HORIZON', 'ENCODER_HIDDEN_DIM', 'ENCODER_BATCH_SIZE', 'ENCODER_EPOCHS',
        'SPARSE_BATCH_SIZE', 'SPARSE_EPOCHS', 'REWARD_BATCH_SIZE', 'REWARD_EPOCHS', 'REWARD_HISTOGRAM_BINS',
        'DQN_STEPS', 'DQN_BATCH_SIZE', 'DQN_TARGET_SYNC', 'DQN_HIDDEN_DIM', 'DQN_HEAD_DIM', 'DQN_LOG_EVERY',
        'KERNEL_K', 'KERNEL_BEHAVIOR_K', 'GATE_RESTARTS', 'GATE_EPOCHS', 'GATE_MINIBATCH',
        'BOOTSTRAP_SAMPLES', 'PARALLEL_WORKERS'
    )
    @classmethod
    def check_at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator('REWARD_INPUT_GRAD_WEIGHT', 'SPARSE_PENALTY_WEIGHT', 'DQN_PENALTY_WEIGHT', 'DQN_REWARD_MAX')
    @classmethod
    def check_non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator('KERNEL_CANDIDATE_KS', 'REWARD_HIDDEN_DIMS', mode='before')
    @classmethod
    def parse_int_list(cls, v):
        if isinstance(v, str):
            # Split comma-separated string and strip whitespace
            return [int(item.strip()) for item in v.split(',') if item.strip()]
        return v

    @property
    def cohort_csv_path(self) -> Path:
        """Cohort CSV consumed by preprocess"""
        return self.COHORT_PATH if self.COHORT_PATH is not None else self.OUTPUT_DIR / "cohort.csv"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump, recorded in provenance"""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    class Config:
        env_prefix = ENV_PREFIX
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True
        extra = "forbid"


# The paper preset holds the full-scale constants; desk scales the expensive ones down
SCALE_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "SIM_N_PATIENTS": 2000,
        "DQN_STEPS": 20000,
        "GATE_RESTARTS": 100,
        "GATE_LEARNING_RATE": 1e-2,
        "BOOTSTRAP_SAMPLES": 200,
    },
    "paper": {
        "SIM_N_PATIENTS": 15415,
        "DQN_STEPS": 200000,
        "GATE_RESTARTS": 1000,
        "GATE_LEARNING_RATE": 1e-4,
        "BOOTSTRAP_SAMPLES": 1000,
    },
}


class _MappingSource(PydanticBaseSettingsSource):
    """Lowest-priority source holding preset and config-file values"""

    def __init__(self, settings_cls: Type[BaseSettings], values: Dict[str, Any]):
        super().__init__(settings_cls)
        self._values = values

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return self._values.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(self._values)


def _read_config_file(config_path: Path) -> Dict[str, Any]:
    path = Path(config_path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", field="--config")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file is not valid JSON: {e}", field="--config") from e
    if not isinstance(values, dict):
        raise ConfigurationError("config file must hold a JSON object", field="--config")
    return values


def _format_validation_error(error: ValidationError) -> ConfigurationError:
    first = error.errors()[0]
    field_path = ".".join(str(part) for part in first.get("loc", ())) or "<root>"
    return ConfigurationError(f"{field_path}: {first.get('msg', 'invalid value')}", field=field_path)


def load_settings(config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """
    Build settings from defaults, scale preset, JSON config file, .env, MOE_* environment
    variables and CLI overrides (in increasing priority)
    """
    file_values = _read_config_file(config_path) if config_path else {}
    unknown = sorted(set(file_values) - set(Settings.model_fields))
    if unknown:
        raise ConfigurationError(f"unknown configuration key '{unknown[0]}'", field=unknown[0])

    overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
    scale = overrides.get("SCALE") or os.environ.get(f"{ENV_PREFIX}SCALE") or file_values.get("SCALE") or "desk"
    if scale not in SCALE_PRESETS:
        raise ConfigurationError(f"unknown scale preset '{scale}'", field="SCALE")
    layered = {**SCALE_PRESETS[scale], **file_values}

    class LayeredSettings(Settings):
        @classmethod
        def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
            return (init_settings, env_settings, dotenv_settings, _MappingSource(settings_cls, layered))

    try:
        return LayeredSettings(**overrides)
    except ValidationError as e:
        raise _format_validation_error(e) from e

