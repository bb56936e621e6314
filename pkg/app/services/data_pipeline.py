"""
Cohort ingestion and preprocessing: standardize / log-transform / rescale into
[0, 1], discretize doses into the 5x5 action grid, and split at patient level.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.exceptions import ConfigurationError, DataError, SchemaError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import ActionSpace, PreprocessStats
from app.services.cohort_sim import NON_SURVIVOR, SURVIVOR, RawTrajectory
from app.utils.artifacts import read_npz, write_csv, write_npz
from app.utils.features import FEATURE_CATALOG, FEATURE_COLUMNS, FEATURE_NAMES, N_DOSE_BINS, N_FEATURES, action_index
from app.utils.validators import validate_probability

logger = get_logger(__name__)

COHORT_COLUMNS = ("patient_id", "t") + FEATURE_COLUMNS + ("iv_raw", "vaso_raw", "outcome")
EDGE_PERCENTILES = (25.0, 50.0, 75.0, 100.0)


@dataclass
class ProcessedTrajectory:
    """Preprocessed windows of one patient; actions is None before discretization"""
    patient_id: str
    observations: np.ndarray  # [T, 45] in [0, 1], columns ordered as FEATURE_NAMES
    actions: Optional[np.ndarray]  # [T] in 0..24
    outcome: int

    @property
    def length(self) -> int:
        return int(self.observations.shape[0])

    @property
    def died(self) -> bool:
        return self.outcome == NON_SURVIVOR


@dataclass
class CohortArrays:
    """Zero-padded batch layout of a processed cohort"""
    patient_ids: List[str]
    observations: np.ndarray  # [N, T_max, 45]
    actions: np.ndarray  # [N, T_max], -1 past the end
    lengths: np.ndarray  # [N]
    outcomes: np.ndarray  # [N]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.observations.shape[1])[None, :] < self.lengths[:, None]


def _stack_raw(trajectories: Sequence[RawTrajectory]) -> np.ndarray:
    return np.concatenate([np.asarray(trajectory.observations, dtype=float) for trajectory in trajectories], axis=0)


def fit_preprocess(train: Sequence[RawTrajectory]) -> PreprocessStats:
    """Fit per-feature transforms on training trajectories only"""
    if len(train) < 2:
        raise UsageError("fit_preprocess needs at least 2 trajectories")
    values = _stack_raw(train)
    if values.shape[1] != N_FEATURES:
        raise SchemaError(f"expected {N_FEATURES} features, got {values.shape[1]}")
    if not np.all(np.isfinite(values)):
        raise DataError("training observations contain missing or non-finite values")

    row_owner = [(trajectory.patient_id, t) for trajectory in train for t in range(trajectory.length)]
    transforms, means, stds, mins, maxs, constant = [], [], [], [], [], []

    for j, spec in enumerate(FEATURE_CATALOG):
        column = values[:, j]
        if spec.transform == "log":
            negative = np.flatnonzero(column < 0)
            if negative.size:
                patient_id, t = row_owner[negative[0]]
                raise DataError(f"negative value {column[negative[0]]} in log feature '{spec.name}' "
                                f"(row {negative[0]}, patient {patient_id}, t={t})")
            transformed = np.log1p(column)
            mean, std = 0.0, 1.0
        else:
            mean, std = float(column.mean()), float(column.std())
            if std > 0:
                transformed = (column - mean) / std
            else:
                std = 1.0
                transformed = column - mean

        low, high = float(transformed.min()), float(transformed.max())
        is_constant = not high > low
        if is_constant:
            logger.warning(f"Feature '{spec.name}' is constant in the training set; mapped to 0.5")

        transforms.append(spec.transform)
        means.append(mean)
        stds.append(std)
        mins.append(low)
        maxs.append(high)
        constant.append(is_constant)

    logger.info(f"Fitted preprocessing on {values.shape[0]:,} windows from {len(train):,} patients")
    return PreprocessStats(
        feature_names=list(FEATURE_NAMES), transforms=transforms, means=means, stds=stds,
        mins=mins, maxs=maxs, constant=constant
    )


def transform_observations(stats: PreprocessStats, values: np.ndarray) -> np.ndarray:
    """Affine-then-clamp map of raw rows into [0, 1]"""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != len(stats.feature_names):
        raise SchemaError(f"expected {len(stats.feature_names)} features, got {values.shape[1]}")

    is_log = np.array([transform == "log" for transform in stats.transforms])
    means, stds = np.array(stats.means), np.array(stats.stds)
    mins, maxs = np.array(stats.mins), np.array(stats.maxs)
    constant = np.array(stats.constant)

    transformed = np.where(is_log, np.log1p(np.clip(values, 0.0, None)), (values - means) / stds)
    span = np.where(constant, 1.0, maxs - mins)
    scaled = np.clip((transformed - mins) / span, 0.0, 1.0)
    return np.where(constant, 0.5, scaled)


def apply_preprocess(stats: PreprocessStats, raw: RawTrajectory) -> ProcessedTrajectory:
    observations = transform_observations(stats, raw.observations)
    return ProcessedTrajectory(patient_id=raw.patient_id, observations=observations, actions=None, outcome=raw.outcome)


def fit_action_space(train: Sequence[RawTrajectory]) -> ActionSpace:
    """Quartile edges of the nonzero doses of each drug"""
    edges = {}
    for drug, attribute in (("iv", "iv_doses"), ("vaso", "vaso_doses")):
        doses = np.concatenate([np.asarray(getattr(trajectory, attribute), dtype=float) for trajectory in train])
        nonzero = doses[doses > 0]
        if nonzero.size == 0:
            raise ConfigurationError(f"no nonzero {drug} doses in the training set", field=f"{drug}_bin_edges")
        edges[drug] = [float(value) for value in np.percentile(nonzero, EDGE_PERCENTILES)]

    try:
        space = ActionSpace(iv_bin_edges=edges["iv"], vaso_bin_edges=edges["vaso"])
    except ValidationError as e:
        raise ConfigurationError(f"degenerate dose distribution: {e.errors()[0]['msg']}", field="action_space") from e
    logger.info(f"Action space edges: IV {space.iv_bin_edges}, vaso {space.vaso_bin_edges}")
    return space


def _dose_bins(edges: Sequence[float], doses: np.ndarray) -> np.ndarray:
    # upper edges are inclusive; doses above the last edge stay in the top bin
    bins = 1 + np.minimum(np.searchsorted(np.asarray(edges[:N_DOSE_BINS - 2]), doses, side="left"), N_DOSE_BINS - 2)
    return np.where(doses == 0, 0, bins)


def discretize_actions(space: ActionSpace, iv: np.ndarray, vaso: np.ndarray) -> np.ndarray:
    iv = np.asarray(iv, dtype=float)
    vaso = np.asarray(vaso, dtype=float)
    if not (np.all(np.isfinite(iv)) and np.all(np.isfinite(vaso))):
        raise DataError("doses must be finite")
    if np.any(iv < 0) or np.any(vaso < 0):
        raise DataError("doses must be non-negative")
    return action_index(_dose_bins(space.iv_bin_edges, iv), _dose_bins(space.vaso_bin_edges, vaso))


def discretize_action(space: ActionSpace, iv: float, vaso: float) -> int:
    """index = 5 * iv_bin + vaso_bin"""
    return int(discretize_actions(space, np.array([iv]), np.array([vaso]))[0])


def process_trajectory(stats: PreprocessStats, space: ActionSpace, raw: RawTrajectory) -> ProcessedTrajectory:
    processed = apply_preprocess(stats, raw)
    processed.actions = discretize_actions(space, raw.iv_doses, raw.vaso_doses).astype(int)
    return processed


def split_cohort(cohort: Sequence, ratio: float = 0.75, seed: int = 0) -> Tuple[list, list]:
    """Patient-level split; both parts keep the input order"""
    validate_probability(ratio, "DATA_TRAIN_RATIO")
    n = len(cohort)
    if n == 0:
        raise UsageError("cannot split an empty cohort")

    n_train = int(round(ratio * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    permutation = np.random.default_rng(seed).permutation(n)
    train_index = np.sort(permutation[:n_train])
    test_index = np.sort(permutation[n_train:])
    return [cohort[i] for i in train_index], [cohort[i] for i in test_index]


def stack_cohort(trajectories: Sequence[ProcessedTrajectory]) -> CohortArrays:
    n = len(trajectories)
    if n == 0:
        raise UsageError("cannot stack an empty cohort")
    lengths = np.array([trajectory.length for trajectory in trajectories], dtype=int)
    t_max = int(lengths.max())

    observations = np.zeros((n, t_max, N_FEATURES))
    actions = np.full((n, t_max), -1, dtype=int)
    for i, trajectory in enumerate(trajectories):
        observations[i, :trajectory.length] = trajectory.observations
        if trajectory.actions is not None:
            actions[i, :trajectory.length] = trajectory.actions

    return CohortArrays(
        patient_ids=[trajectory.patient_id for trajectory in trajectories],
        observations=observations,
        actions=actions,
        lengths=lengths,
        outcomes=np.array([trajectory.outcome for trajectory in trajectories], dtype=int),
    )


def unstack_cohort(arrays: CohortArrays) -> List[ProcessedTrajectory]:
    return [
        ProcessedTrajectory(
            patient_id=patient_id,
            observations=arrays.observations[i, :arrays.lengths[i]].copy(),
            actions=arrays.actions[i, :arrays.lengths[i]].copy(),
            outcome=int(arrays.outcomes[i]),
        )
        for i, patient_id in enumerate(arrays.patient_ids)
    ]


def save_processed(path: Path, trajectories: Sequence[ProcessedTrajectory]) -> Path:
    arrays = stack_cohort(trajectories)
    return write_npz(
        path,
        patient_ids=np.array(arrays.patient_ids),
        observations=arrays.observations,
        actions=arrays.actions,
        lengths=arrays.lengths,
        outcomes=arrays.outcomes,
    )


def load_processed(path: Path) -> List[ProcessedTrajectory]:
    data = read_npz(path)
    arrays = CohortArrays(
        patient_ids=[str(patient_id) for patient_id in data["patient_ids"]],
        observations=data["observations"],
        actions=data["actions"],
        lengths=data["lengths"],
        outcomes=data["outcomes"],
    )
    return unstack_cohort(arrays)


def write_cohort_csv(path: Path, cohort: Sequence[RawTrajectory]) -> Path:
    """One row per (patient, timestep); outcome 1 marks a non-survivor"""
    frames = []
    for trajectory in cohort:
        frame = pd.DataFrame(trajectory.observations, columns=list(FEATURE_COLUMNS))
        frame.insert(0, "t", np.arange(trajectory.length))
        frame.insert(0, "patient_id", trajectory.patient_id)
        frame["iv_raw"] = trajectory.iv_doses
        frame["vaso_raw"] = trajectory.vaso_doses
        frame["outcome"] = trajectory.outcome
        frames.append(frame)
    return write_csv(path, pd.concat(frames, ignore_index=True))


def read_cohort_csv(path: Path) -> List[RawTrajectory]:
    """Parse and validate a cohort CSV; patients with missing values are excluded"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cohort file not found: {path}")
    frame = pd.read_csv(path, dtype={"patient_id": str}, encoding="utf-8")

    missing_columns = [column for column in COHORT_COLUMNS if column not in frame.columns]
    if missing_columns:
        raise SchemaError(f"cohort CSV is missing columns: {', '.join(missing_columns)}")
    extra_columns = [column for column in frame.columns if column not in COHORT_COLUMNS]
    if extra_columns:
        raise SchemaError(f"cohort CSV has unexpected columns: {', '.join(extra_columns)}")

    incomplete = frame.loc[frame[list(COHORT_COLUMNS)].isna().any(axis=1), "patient_id"].unique()
    if len(incomplete):
        logger.warning(f"Excluding {len(incomplete)} patients with missing values")
        frame = frame[~frame["patient_id"].isin(incomplete)]
    if frame.empty:
        raise DataError("no complete patients in the cohort file")

    cohort = []
    for patient_id, group in frame.groupby("patient_id", sort=False):
        group = group.sort_values("t")
        if group["t"].duplicated().any():
            raise DataError(f"patient {patient_id} has duplicate timesteps")
        outcomes = group["outcome"].unique()
        if len(outcomes) != 1 or int(outcomes[0]) not in (SURVIVOR, NON_SURVIVOR):
            raise DataError(f"patient {patient_id} has an inconsistent or invalid outcome")
        cohort.append(RawTrajectory(
            patient_id=str(patient_id),
            observations=group[list(FEATURE_COLUMNS)].to_numpy(dtype=float),
            iv_doses=group["iv_raw"].to_numpy(dtype=float),
            vaso_doses=group["vaso_raw"].to_numpy(dtype=float),
            outcome=int(outcomes[0]),
        ))

    logger.info(f"Read {len(cohort):,} patients ({len(frame):,} windows) from {path}")
    return cohort
