"""
Weighted doubly-robust off-policy evaluation with control variates, importance
weight diagnostics and patient-level bootstrap comparison of two policies.

Trajectories of different lengths share a global horizon T = max length. Past
its last step a trajectory is absorbing: its importance ratio is frozen and its
rewards and control variates are zero.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.exceptions import DegenerateWeightsError, NumericalError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import BootstrapResult, WDRReport, WeightDiagnostics

logger = get_logger(__name__)

VariateMode = Literal["dqn_value", "behavior_value"]


def _pad(rows: Sequence[np.ndarray], width: int) -> np.ndarray:
    padded = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        padded[i, :len(row)] = row
    return padded


@dataclass
class EvaluationDataset:
    """Per-step logged quantities, padded to [patients, T]"""
    eval_probs: np.ndarray  # pi_e(a_t | s_t)
    behavior_probs: np.ndarray  # pi_b(a_t | s_t)
    rewards: np.ndarray
    mask: np.ndarray  # True on real steps
    discount: float
    q_hat: Optional[np.ndarray] = None
    v_hat: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        shape = self.mask.shape
        if len(shape) != 2 or shape[0] == 0:
            raise UsageError("evaluation data must cover at least one patient")
        for name in ("eval_probs", "behavior_probs", "rewards", "q_hat", "v_hat"):
            values = getattr(self, name)
            if values is None:
                continue
            values = np.where(self.mask, np.asarray(values, dtype=np.float64), 0.0)
            if values.shape != shape:
                raise UsageError(f"{name} has shape {values.shape}, expected {shape}")
            setattr(self, name, values)
        if not 0.0 < self.discount <= 1.0:
            raise UsageError("discount must lie in (0, 1]")
        if np.any(self.behavior_probs[self.mask] <= 0):
            raise UsageError("behavior probabilities must be positive on every logged step")
        self.eval_probs = np.maximum(self.eval_probs, 0.0)

    @classmethod
    def from_steps(
        cls,
        eval_probs: Sequence[np.ndarray],
        behavior_probs: Sequence[np.ndarray],
        rewards: Sequence[np.ndarray],
        discount: float,
        q_hat: Optional[Sequence[np.ndarray]] = None,
        v_hat: Optional[Sequence[np.ndarray]] = None
    ) -> "EvaluationDataset":
        lengths = [len(row) for row in rewards]
        if not lengths or min(lengths) < 1:
            raise UsageError("every trajectory needs at least one step")
        width = max(lengths)
        mask = np.arange(width)[None, :] < np.array(lengths)[:, None]
        return cls(
            eval_probs=_pad(eval_probs, width),
            behavior_probs=np.where(mask, _pad(behavior_probs, width), 1.0),
            rewards=_pad(rewards, width),
            mask=mask,
            discount=discount,
            q_hat=None if q_hat is None else _pad(q_hat, width),
            v_hat=None if v_hat is None else _pad(v_hat, width),
        )

    @property
    def n_patients(self) -> int:
        return self.mask.shape[0]

    @property
    def horizon(self) -> int:
        return self.mask.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def subset(self, indices: np.ndarray) -> "EvaluationDataset":
        """Rows in the given order; indices may repeat"""
        pick = lambda values: None if values is None else values[indices]
        return replace(
            self,
            eval_probs=pick(self.eval_probs),
            behavior_probs=np.where(self.mask[indices], self.behavior_probs[indices], 1.0),
            rewards=pick(self.rewards),
            mask=self.mask[indices],
            q_hat=pick(self.q_hat),
            v_hat=pick(self.v_hat),
        )

    def with_eval_probs(self, eval_probs: np.ndarray) -> "EvaluationDataset":
        return replace(self, eval_probs=eval_probs)

    def with_zero_variates(self) -> "EvaluationDataset":
        return replace(self, q_hat=np.zeros(self.mask.shape), v_hat=np.zeros(self.mask.shape))


def importance_ratios(dataset: EvaluationDataset) -> np.ndarray:
    """Cumulative rho[i, t]; ratio 1 on padded steps"""
    safe_behavior = np.where(dataset.mask, dataset.behavior_probs, 1.0)
    ratios = np.where(dataset.mask, dataset.eval_probs / safe_behavior, 1.0)
    return np.cumprod(ratios, axis=1)


def importance_weights(dataset: EvaluationDataset) -> np.ndarray:
    """w[i, t] = rho[i, t] / sum_j rho[j, t]"""
    rho = importance_ratios(dataset)
    totals = rho.sum(axis=0)
    degenerate = np.flatnonzero(totals <= 0)
    if degenerate.size:
        raise DegenerateWeightsError(int(degenerate[0]))
    return rho / totals


def _require_variates(dataset: EvaluationDataset) -> None:
    if dataset.q_hat is None or dataset.v_hat is None:
        raise UsageError("WDR needs control variates; pass zeros explicitly for weighted importance sampling")


def wdr_from_weights(dataset: EvaluationDataset, weights: np.ndarray) -> float:
    _require_variates(dataset)
    previous = np.concatenate([np.full((dataset.n_patients, 1), 1.0 / dataset.n_patients), weights[:, :-1]], axis=1)
    discounts = dataset.discount ** np.arange(dataset.horizon)
    per_step = weights * (dataset.rewards - dataset.q_hat) + previous * dataset.v_hat
    return float(np.sum(discounts * per_step.sum(axis=0)))


def wdr_estimate(dataset: EvaluationDataset) -> float:
    """
    sum_t gamma^t sum_i [w_t^i r_t^i - (w_t^i Qhat_t^i - w_{t-1}^i Vhat_t^i)]
    with w_{-1}^i = 1/I
    """
    _require_variates(dataset)
    return wdr_from_weights(dataset, importance_weights(dataset))


def weighted_importance_sampling(dataset: EvaluationDataset) -> float:
    """WDR with zero control variates"""
    return wdr_estimate(dataset.with_zero_variates())


def control_variates(
    q_table: np.ndarray,
    actions: np.ndarray,
    mode: VariateMode = "dqn_value"
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Q(s,a) of the logged action and V(s): the max over actions for the learned
    policy's value, the mean for the clinicians'
    """
    q_table = np.atleast_2d(np.asarray(q_table, dtype=np.float64))
    actions = np.asarray(actions, dtype=int)
    q_hat = q_table[np.arange(len(actions)), actions]
    if mode == "dqn_value":
        v_hat = q_table.max(axis=1)
    elif mode == "behavior_value":
        v_hat = q_table.mean(axis=1)
    else:
        raise UsageError(f"unknown control-variate mode '{mode}'")
    return q_hat, v_hat


def _decade_label(exponent: int) -> str:
    return f"[1e{exponent},1e{exponent + 1})"


def weight_diagnostics(weights: np.ndarray, mask: np.ndarray) -> WeightDiagnostics:
    """Nonzero fractions over every (i, t) and over each trajectory's last step, plus a log10-decade histogram"""
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    final = weights[np.arange(weights.shape[0]), mask.sum(axis=1) - 1]

    histogram = {"zero": int(np.sum(weights == 0))}
    positive = weights[weights > 0]
    if positive.size:
        exponents = np.floor(np.log10(positive)).astype(int)
        values, counts = np.unique(exponents, return_counts=True)
        histogram.update({_decade_label(int(value)): int(count) for value, count in zip(values, counts)})

    return WeightDiagnostics(
        fraction_nonzero_weights=float(np.mean(weights != 0)),
        fraction_nonzero_final_weights=float(np.mean(final != 0)),
        histogram=histogram,
    )


def evaluate_policy(dataset: EvaluationDataset) -> WDRReport:
    weights = importance_weights(dataset)
    return WDRReport(
        estimate=wdr_from_weights(dataset, weights),
        weights=weights.T.tolist(),
        diagnostics=weight_diagnostics(weights, dataset.mask),
    )


def bootstrap_difference(
    dataset_a: EvaluationDataset,
    dataset_b: EvaluationDataset,
    n: int = 1000,
    seed: int = 0,
    names: Tuple[str, str] = ("A", "B"),
    workers: int = 1
) -> BootstrapResult:
    """
    Resample patients with replacement n times and recompute WDR(A) - WDR(B).
    Resample b draws from its own stream (seed, b); degenerate resamples are skipped.
    """
    if dataset_a.mask.shape != dataset_b.mask.shape or not np.array_equal(dataset_a.mask, dataset_b.mask):
        raise UsageError("both policies must be evaluated on the same logged trajectories")
    if n < 1:
        raise UsageError("bootstrap needs at least one resample")
    n_patients = dataset_a.n_patients
    original = wdr_estimate(dataset_a) - wdr_estimate(dataset_b)

    def resample(b: int) -> Optional[float]:
        indices = np.random.default_rng([seed, b]).integers(0, n_patients, size=n_patients)
        try:
            return wdr_estimate(dataset_a.subset(indices)) - wdr_estimate(dataset_b.subset(indices))
        except DegenerateWeightsError:
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        outcomes = list(executor.map(resample, range(n)))

    differences = [value for value in outcomes if value is not None]
    skipped = n - len(differences)
    if skipped:
        logger.warning(f"Bootstrap {names[0]} - {names[1]}: skipped {skipped} degenerate resamples")
    if not differences:
        raise NumericalError("every bootstrap resample was degenerate")

    values = np.array(differences)
    result = BootstrapResult(
        policy_a=names[0],
        policy_b=names[1],
        n_requested=n,
        skipped=skipped,
        differences=differences,
        mean=float(values.mean()),
        percentile_2_5=float(np.percentile(values, 2.5)),
        percentile_97_5=float(np.percentile(values, 97.5)),
        minimum=float(values.min()),
        maximum=float(values.max()),
        original_difference=float(original),
        fraction_negative=float(np.mean(values < 0)),
    )
    logger.info(f"Bootstrap {names[0]} - {names[1]}: original {original:.4f}, "
                f"95% interval [{result.percentile_2_5:.4f}, {result.percentile_97_5:.4f}], "
                f"{100 * result.fraction_negative:.1f}% negative")
    return result


def bootstrap_frame(result: BootstrapResult) -> pd.DataFrame:
    """One resampled difference per row"""
    return pd.DataFrame({"difference": result.differences})
