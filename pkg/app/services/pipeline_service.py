"""
Subcommand orchestration. Each subcommand reads upstream artifacts from the
output directory, writes its own, and can be re-run on its own.
"""
import time
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from app.core.config import Settings
from app.core.exceptions import DataError, DegenerateWeightsError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import BootstrapResult, GateArtifact, TrainingConfig
from app.services.cohort_sim import default_sim_mdp, generate_cohort, ground_truth_payload
from app.services.data_pipeline import (
    ProcessedTrajectory,
    fit_action_space,
    fit_preprocess,
    load_processed,
    process_trajectory,
    read_cohort_csv,
    save_processed,
    split_cohort,
    write_cohort_csv,
)
from app.services.moe_gate import (
    GateDataset,
    GateOptions,
    fit_feature_stats,
    gate_artifact,
    gate_probability,
    gating_feature_table,
    load_gate,
    mixture_table,
    optimize_gate,
    save_gate,
    standardize_features,
)
from app.services.ope_wdr import (
    EvaluationDataset,
    bootstrap_difference,
    bootstrap_frame,
    control_variates,
    evaluate_policy,
    wdr_estimate,
)
from app.services.policy_experts import (
    DDQNOptions,
    build_neighbor_index,
    build_transitions,
    cross_validate_k,
    dqn_policy_table,
    load_qnetwork,
    neighbor_policies,
    q_values,
    restrict_policy_table,
    save_qnetwork,
    train_ddqn,
)
from app.services.report_service import BOOTSTRAP_BASELINES, REPORT_ENCODING, ReportService
from app.services.reward_model import (
    log_odds_histogram,
    mortality_input_gradients,
    reward_summary,
    save_predictor,
    train_mortality_predictor,
    trajectory_rewards,
)
from app.services.state_encoder import (
    encode_cohort,
    reconstruction_mse,
    save_encoder,
    train_recurrent_autoencoder,
    train_sparse_autoencoder,
)
from app.utils.artifacts import (
    ENCODINGS,
    POLICIES,
    VARIATES,
    RunPaths,
    read_json,
    read_npz,
    require_artifact,
    sha256_file,
    write_csv,
    write_json,
    write_npz,
)

logger = get_logger(__name__)

SUBCOMMANDS = (
    "simulate", "preprocess", "train-encoder", "train-reward", "train-dqn",
    "fit-kernel", "fit-moe", "evaluate", "bootstrap", "report", "verify",
)
VARIATE_MODES = {"V_d": "dqn_value", "V_b": "behavior_value"}
GRADIENT_SAMPLE = 500
VERIFY_TOLERANCE = 1e-9


def pack(rows: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Ragged per-patient arrays as (concatenated values, lengths)"""
    return np.concatenate(rows), np.array([len(row) for row in rows], dtype=int)


def unpack(values: np.ndarray, lengths: np.ndarray) -> List[np.ndarray]:
    return np.split(values, np.cumsum(lengths)[:-1])


def logged(table: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Probability each row of a policy table puts on the logged action"""
    return table[np.arange(len(actions)), actions]


class PipelineService:
    """Runs subcommands against one output directory and records their timings"""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.paths = RunPaths(settings.OUTPUT_DIR)
        self.report_service = ReportService(settings, self.paths)
        self.handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
            "simulate": self.simulate,
            "preprocess": self.preprocess,
            "train-encoder": self.train_encoder,
            "train-reward": self.train_reward,
            "train-dqn": self.train_dqn,
            "fit-kernel": self.fit_kernel,
            "fit-moe": self.fit_moe,
            "evaluate": self.evaluate,
            "bootstrap": self.bootstrap,
            "report": self.report,
            "verify": self.verify,
        }

    def run(self, name: str) -> Dict[str, Any]:
        if name == "all":
            return self.run_all()
        handler = self.handlers.get(name)
        if handler is None:
            raise UsageError(f"unknown subcommand '{name}'")

        start = time.time()
        logger.info(f"Running '{name}' (output: {self.paths.root})")
        result = handler()
        duration = time.time() - start
        self._record_timing(name, duration)
        logger.info(f"'{name}' finished in {duration:.2f}s")
        return result

    def run_all(self) -> Dict[str, Any]:
        results = {}
        for name in SUBCOMMANDS:
            if name == "simulate" and self.settings.COHORT_PATH is not None:
                logger.info(f"Using cohort {self.settings.COHORT_PATH}; skipping 'simulate'")
                continue
            results[name] = self.run(name)
        return results

    def _record_timing(self, name: str, seconds: float) -> None:
        timings = read_json(self.paths.timings) if self.paths.timings.exists() else {}
        timings[name] = round(seconds, 3)
        write_json(self.paths.timings, timings)

    def _training_config(self, prefix: str) -> TrainingConfig:
        s = self.settings
        return TrainingConfig(
            batch_size=getattr(s, f"{prefix}_BATCH_SIZE"),
            epochs=getattr(s, f"{prefix}_EPOCHS"),
            learning_rate=getattr(s, f"{prefix}_LEARNING_RATE"),
            discount=s.DISCOUNT,
            seed=s.SEED,
        )

    # Artifact loaders

    def _trajectories(self, part: str) -> List[ProcessedTrajectory]:
        return load_processed(require_artifact(self.paths.processed(part), "preprocess"))

    def _states(self, kind: str) -> Dict[str, List[np.ndarray]]:
        data = read_npz(require_artifact(self.paths.states(kind), "train-encoder"))
        return {part: unpack(data[f"{part}_values"], data[f"{part}_lengths"]) for part in ("train", "test")}

    def _rewards(self) -> Dict[str, List[np.ndarray]]:
        data = read_npz(require_artifact(self.paths.rewards, "train-reward"))
        return {part: unpack(data[f"{part}_values"], data[f"{part}_lengths"]) for part in ("train", "test")}

    def _policies(self, kind: str) -> Dict[str, np.ndarray]:
        return read_npz(require_artifact(self.paths.policies(kind), "fit-kernel"))

    def _gate(self, kind: str) -> GateArtifact:
        return load_gate(require_artifact(self.paths.gate(kind), "fit-moe"))

    # Subcommands

    def simulate(self) -> Dict[str, Any]:
        s = self.settings
        mdp = default_sim_mdp(s.SIM_HORIZON, s.DISCOUNT)
        cohort = generate_cohort(mdp, s.SIM_N_PATIENTS, s.SEED, workers=s.PARALLEL_WORKERS)
        write_cohort_csv(self.paths.cohort_csv, cohort)
        truth = ground_truth_payload(mdp, cohort, s.SEED)
        write_json(self.paths.ground_truth, truth)
        return {
            "patients": len(cohort),
            "exact_behavior_value": truth["exact_behavior_value"],
            "exact_mortality_probability": truth["exact_mortality_probability"],
        }

    def preprocess(self) -> Dict[str, Any]:
        s = self.settings
        source = s.cohort_csv_path
        if s.COHORT_PATH is None:
            require_artifact(source, "simulate")
        raw = read_cohort_csv(source)
        train_raw, test_raw = split_cohort(raw, s.DATA_TRAIN_RATIO, s.SEED)

        stats = fit_preprocess(train_raw)
        space = fit_action_space(train_raw)
        train = [process_trajectory(stats, space, trajectory) for trajectory in train_raw]
        test = [process_trajectory(stats, space, trajectory) for trajectory in test_raw]

        write_json(self.paths.preprocess_stats, stats.model_dump())
        write_json(self.paths.action_space, space.model_dump())
        write_json(self.paths.split, {
            "train": [trajectory.patient_id for trajectory in train],
            "test": [trajectory.patient_id for trajectory in test],
        })
        save_processed(self.paths.processed("train"), train)
        save_processed(self.paths.processed("test"), test)
        logger.info(f"Preprocessed {len(raw):,} patients: {len(train):,} train, {len(test):,} test")
        return {"train_patients": len(train), "test_patients": len(test)}

    def train_encoder(self) -> Dict[str, Any]:
        s = self.settings
        train, test = self._trajectories("train"), self._trajectories("test")
        models = {
            "recurrent": train_recurrent_autoencoder(train, self._training_config("ENCODER"), s.ENCODER_HIDDEN_DIM),
            "sparse": train_sparse_autoencoder(
                np.concatenate([trajectory.observations for trajectory in train]),
                self._training_config("SPARSE"),
                hidden_dim=s.ENCODER_HIDDEN_DIM,
                target_activation=s.SPARSE_TARGET_ACTIVATION,
                penalty_weight=s.SPARSE_PENALTY_WEIGHT,
            ),
        }

        summary = {}
        for kind, model in models.items():
            save_encoder(self.paths.encoder(kind), model)
            train_values, train_lengths = pack(encode_cohort(model, train))
            test_values, test_lengths = pack(encode_cohort(model, test))
            write_npz(self.paths.states(kind), train_values=train_values, train_lengths=train_lengths,
                      test_values=test_values, test_lengths=test_lengths)
            summary[kind] = {
                "final_loss": model.loss_log[-1] if model.loss_log else None,
                "train_reconstruction_mse": reconstruction_mse(model, train),
                "test_reconstruction_mse": reconstruction_mse(model, test),
            }
            logger.info(f"{kind} encoder: test reconstruction MSE {summary[kind]['test_reconstruction_mse']:.6f}")
        write_json(self.paths.encoder_summary, summary)
        return summary

    def train_reward(self) -> Dict[str, Any]:
        s = self.settings
        train, test = self._trajectories("train"), self._trajectories("test")

        def labelled(trajectories):
            observations = np.concatenate([trajectory.observations for trajectory in trajectories])
            labels = np.concatenate([np.full(trajectory.length, trajectory.outcome) for trajectory in trajectories])
            return observations, labels

        train_x, train_y = labelled(train)
        test_x, test_y = labelled(test)
        predictor = train_mortality_predictor(
            train_x, train_y, self._training_config("REWARD"),
            input_grad_weight=s.REWARD_INPUT_GRAD_WEIGHT,
            hidden_dims=s.REWARD_HIDDEN_DIMS,
            holdout=(test_x, test_y),
        )
        save_predictor(self.paths.predictor, predictor)

        rewards = {part: [trajectory_rewards(predictor, trajectory) for trajectory in trajectories]
                   for part, trajectories in (("train", train), ("test", test))}
        arrays = {}
        for part, rows in rewards.items():
            arrays[f"{part}_values"], arrays[f"{part}_lengths"] = pack(rows)
        write_npz(self.paths.rewards, **arrays)

        summary = reward_summary(rewards["train"] + rewards["test"], bound=s.DQN_REWARD_MAX)
        summary["predictor_accuracy"] = predictor.accuracy
        write_json(self.paths.reward_summary, summary)

        write_csv(self.paths.log_odds_histogram, log_odds_histogram(predictor, test_x, test_y, s.REWARD_HISTOGRAM_BINS))
        gradients = mortality_input_gradients(predictor, test_x[:GRADIENT_SAMPLE])
        write_csv(self.paths.input_gradients, gradients.frame)
        write_csv(self.paths.gradient_correlations,
                  gradients.correlations.rename("abs_correlation").rename_axis("feature").reset_index())
        strongest = gradients.correlations.sort_values(ascending=False)
        logger.info(f"Largest |corr(value, gradient)|: {strongest.index[0]} ({strongest.iloc[0]:.3f})")
        return summary

    def train_dqn(self) -> Dict[str, Any]:
        s = self.settings
        train = self._trajectories("train")
        rewards = self._rewards()["train"]
        config = TrainingConfig(batch_size=s.DQN_BATCH_SIZE, epochs=None, steps=s.DQN_STEPS,
                                learning_rate=s.DQN_LEARNING_RATE, discount=s.DISCOUNT, seed=s.SEED)
        options = DDQNOptions(
            penalty_weight=s.DQN_PENALTY_WEIGHT,
            reward_max=s.DQN_REWARD_MAX,
            target_sync=s.DQN_TARGET_SYNC,
            alpha=s.DQN_PER_ALPHA,
            beta_start=s.DQN_PER_BETA_START,
            beta_end=s.DQN_PER_BETA_END,
            priority_floor=s.DQN_PRIORITY_FLOOR,
            trunk_dim=s.DQN_HIDDEN_DIM,
            head_dim=s.DQN_HEAD_DIM,
            log_every=s.DQN_LOG_EVERY,
        )

        summary = {}
        for kind in ENCODINGS:
            transitions = build_transitions(self._states(kind)["train"], train, rewards)
            logger.info(f"Training DDQN on {kind} states ({transitions.size:,} transitions)")
            qnet = train_ddqn(transitions, config, options)
            save_qnetwork(self.paths.dqn(kind), qnet)
            summary[kind] = {"transitions": transitions.size, "final_loss": qnet.loss_log[-1] if qnet.loss_log else None}
        return summary

    def _select_kernel_k(self, kind, train, states, rewards, qnet) -> Tuple[int, Dict[int, float]]:
        """Validation WDR of the kernel policy (DQN control variates) for each candidate k"""
        s = self.settings
        if not s.KERNEL_CROSS_VALIDATE or len(set(s.KERNEL_CANDIDATE_KS)) < 2 or len(train) < 2:
            return s.KERNEL_K, {}

        fit_part, validation_part = split_cohort(list(range(len(train))), 1.0 - s.KERNEL_VALIDATION_FRACTION, s.SEED)
        index = build_neighbor_index([states[i] for i in fit_part], [train[i] for i in fit_part])
        candidates = sorted({min(k, index.size) for k in s.KERNEL_CANDIDATE_KS})

        validation_states, lengths = pack([states[i] for i in validation_part])
        actions = np.concatenate([train[i].actions for i in validation_part])
        neighbors = neighbor_policies(index, validation_states, candidates,
                                      min(s.KERNEL_BEHAVIOR_K, index.size), s.BEHAVIOR_SMOOTHING)
        q_hat, v_hat = control_variates(q_values(qnet, validation_states), actions, "dqn_value")
        behavior = unpack(logged(neighbors.behavior, actions), lengths)
        validation_rewards = [rewards[i] for i in validation_part]

        def objective(k: int) -> float:
            dataset = EvaluationDataset.from_steps(
                unpack(logged(neighbors.kernel[k], actions), lengths), behavior, validation_rewards,
                s.DISCOUNT, unpack(q_hat, lengths), unpack(v_hat, lengths),
            )
            try:
                return wdr_estimate(dataset)
            except DegenerateWeightsError:
                return -np.inf

        logger.info(f"Cross-validating kernel k for {kind} states over {candidates}")
        return cross_validate_k(candidates, objective, preferred=s.KERNEL_K)

    def fit_kernel(self) -> Dict[str, Any]:
        s = self.settings
        trajectories = {"train": self._trajectories("train"), "test": self._trajectories("test")}
        rewards = self._rewards()

        summary = {}
        for kind in ENCODINGS:
            states = self._states(kind)
            qnet = load_qnetwork(require_artifact(self.paths.dqn(kind), "train-dqn"))
            k, scores = self._select_kernel_k(kind, trajectories["train"], states["train"], rewards["train"], qnet)

            index = build_neighbor_index(states["train"], trajectories["train"])
            # train states are queried without themselves, leaving one fewer neighbor
            leave_out = index.size > 1
            available = index.size - 1 if leave_out else index.size
            if k > available:
                logger.warning(f"Kernel k={k} exceeds the {available:,} available neighbors; using k={available}")
                k = available
            behavior_k = min(s.KERNEL_BEHAVIOR_K, available)

            arrays = {"kernel_k": np.array(k)}
            for part in ("train", "test"):
                flat, lengths = pack(states[part])
                exclude = index.input_rows if part == "train" and leave_out else None
                neighbors = neighbor_policies(index, flat, [k], behavior_k, s.BEHAVIOR_SMOOTHING, exclude)
                dqn_raw = dqn_policy_table(qnet, flat, s.DQN_SOFTMAX_TEMPERATURE)
                arrays.update({
                    f"{part}_lengths": lengths,
                    f"{part}_kernel": neighbors.kernel[k],
                    f"{part}_behavior": neighbors.behavior,
                    f"{part}_kth_distance": neighbors.kth_distance[k],
                    f"{part}_dqn_raw": dqn_raw,
                    f"{part}_dqn": restrict_policy_table(dqn_raw, neighbors.behavior, s.RESTRICTION_THRESHOLD),
                    f"{part}_q": q_values(qnet, flat),
                })
            write_npz(self.paths.policies(kind), **arrays)
            write_json(self.paths.kernel_selection(kind), {
                "selected_k": k,
                "behavior_k": behavior_k,
                "cross_validated": bool(scores),
                "scores": {str(candidate): (score if np.isfinite(score) else None) for candidate, score in scores.items()},
            })
            summary[kind] = {"kernel_k": k, "indexed_states": index.size}
        return summary

    def _gating_features(self, trajectories: Sequence[ProcessedTrajectory], kth_distance: np.ndarray) -> List[np.ndarray]:
        lengths = np.array([trajectory.length for trajectory in trajectories])
        return [gating_feature_table(trajectory.observations, distances)
                for trajectory, distances in zip(trajectories, unpack(kth_distance, lengths))]

    def _evaluation_dataset(
        self,
        table: np.ndarray,
        policies: Dict[str, np.ndarray],
        part: str,
        actions: np.ndarray,
        rewards: List[np.ndarray],
        variates: str
    ) -> EvaluationDataset:
        lengths = policies[f"{part}_lengths"]
        q_hat, v_hat = control_variates(policies[f"{part}_q"], actions, VARIATE_MODES[variates])
        return EvaluationDataset.from_steps(
            unpack(logged(table, actions), lengths),
            unpack(logged(policies[f"{part}_behavior"], actions), lengths),
            rewards,
            self.settings.DISCOUNT,
            unpack(q_hat, lengths),
            unpack(v_hat, lengths),
        )

    def fit_moe(self) -> Dict[str, Any]:
        s = self.settings
        train = self._trajectories("train")
        rewards = self._rewards()["train"]
        actions = np.concatenate([trajectory.actions for trajectory in train])
        options = GateOptions(
            restarts=s.GATE_RESTARTS,
            epochs=s.GATE_EPOCHS,
            minibatch=s.GATE_MINIBATCH,
            learning_rate=s.GATE_LEARNING_RATE,
            init_w_range=s.GATE_INIT_W_RANGE,
            init_b_range=s.GATE_INIT_B_RANGE,
            corner_bias=s.GATE_CORNER_BIAS,
        )

        summary = {}
        for kind in ENCODINGS:
            policies = self._policies(kind)
            raw_features = self._gating_features(train, policies["train_kth_distance"])
            stats = fit_feature_stats(np.concatenate(raw_features))
            features = [standardize_features(rows, stats) for rows in raw_features]

            lengths = policies["train_lengths"]
            q_hat, v_hat = control_variates(policies["train_q"], actions, VARIATE_MODES["V_d"])
            dataset = GateDataset.from_steps(
                features,
                unpack(logged(policies["train_kernel"], actions), lengths),
                unpack(logged(policies["train_dqn"], actions), lengths),
                unpack(logged(policies["train_behavior"], actions), lengths),
                rewards,
                unpack(q_hat, lengths),
                unpack(v_hat, lengths),
                s.DISCOUNT,
            )
            logger.info(f"Fitting gate on {kind} states: {dataset.n_patients:,} patients, {options.restarts} restarts")
            fit = optimize_gate(dataset, options, seed=s.SEED, workers=s.PARALLEL_WORKERS)
            save_gate(self.paths.gate(kind), gate_artifact(fit, stats, s.SEED))
            summary[kind] = {"training_wdr": fit.objective, "best_restart_index": fit.best_restart_index}
        return summary

    def _policy_values(self, kind: str):
        """Test policy tables, WDR reports per (policy, variates) and gate statistics, from fitted artifacts"""
        test = self._trajectories("test")
        rewards = self._rewards()["test"]
        policies = self._policies(kind)
        gate = self._gate(kind)
        actions = np.concatenate([trajectory.actions for trajectory in test])

        features = standardize_features(np.concatenate(self._gating_features(test, policies["test_kth_distance"])),
                                        gate.feature_stats)
        p_kernel, _ = gate_probability(gate.params, features)
        p_kernel = np.atleast_1d(p_kernel)
        tables = {
            "physician": policies["test_behavior"],
            "kernel": policies["test_kernel"],
            "dqn": policies["test_dqn"],
            "moe": mixture_table(p_kernel, policies["test_kernel"], policies["test_dqn"]),
        }

        reports = {}
        for policy in POLICIES:
            for variates in VARIATES:
                dataset = self._evaluation_dataset(tables[policy], policies, "test", actions, rewards, variates)
                reports[(policy, variates)] = evaluate_policy(dataset)

        moe_actions = np.argmax(tables["moe"], axis=1)
        neither = (moe_actions != np.argmax(tables["kernel"], axis=1)) & (moe_actions != np.argmax(tables["dqn"], axis=1))
        gate_summary = {
            "mean_kernel_probability": float(p_kernel.mean()),
            "fraction_kernel_preferred": float(np.mean(p_kernel > 0.5)),
            "fraction_follows_neither": float(np.mean(neither)),
        }
        return tables, p_kernel, reports, gate_summary

    def evaluate(self) -> Dict[str, Any]:
        policy_values, diagnostics, gate_summaries = {}, {}, {}
        for kind in ENCODINGS:
            tables, p_kernel, reports, gate_summary = self._policy_values(kind)
            write_npz(self.paths.policy_tables(kind), gate_probability=p_kernel, **tables)
            policy_values[kind] = {}
            for (policy, variates), report in reports.items():
                write_json(self.paths.wdr(kind, policy, variates), report.model_dump())
                policy_values[kind][f"{policy}/{variates}"] = report.estimate
                diagnostics[f"{kind}/{policy}"] = report.diagnostics.model_dump()
            gate_summaries[kind] = gate_summary
            logger.info(f"{kind} test WDR (V_d): " + ", ".join(
                f"{policy} {policy_values[kind][f'{policy}/V_d']:.4f}" for policy in POLICIES))
            logger.info(f"{kind} gate: {100 * gate_summary['fraction_follows_neither']:.1f}% of states follow neither expert")

        write_json(self.paths.evaluation, {
            "policy_values": policy_values,
            "diagnostics": diagnostics,
            "gate_summary": gate_summaries,
        })
        return {"policy_values": policy_values}

    def bootstrap(self) -> Dict[str, Any]:
        s = self.settings
        kind = REPORT_ENCODING
        test = self._trajectories("test")
        rewards = self._rewards()["test"]
        policies = self._policies(kind)
        tables = read_npz(require_artifact(self.paths.policy_tables(kind), "evaluate"))
        actions = np.concatenate([trajectory.actions for trajectory in test])

        moe = self._evaluation_dataset(tables["moe"], policies, "test", actions, rewards, "V_d")
        results: Dict[str, BootstrapResult] = {}
        for baseline in BOOTSTRAP_BASELINES:
            other = self._evaluation_dataset(tables[baseline], policies, "test", actions, rewards, "V_d")
            result = bootstrap_difference(moe, other, n=s.BOOTSTRAP_SAMPLES, seed=s.SEED,
                                          names=("moe", baseline), workers=s.PARALLEL_WORKERS)
            results[f"moe_minus_{baseline}"] = result
            write_csv(self.paths.bootstrap_csv(baseline), bootstrap_frame(result))
            if result.fraction_negative > 0:
                logger.info(f"MoE - {baseline}: difference is negative in "
                            f"{100 * result.fraction_negative:.1f}% of resamples")

        write_json(self.paths.bootstrap, {name: result.model_dump() for name, result in results.items()})
        return {name: {"original": result.original_difference, "mean": result.mean} for name, result in results.items()}

    def report(self) -> Dict[str, Any]:
        report = self.report_service.emit_report()
        return {"skipped_figures": report.skipped_figures}

    def verify(self) -> Dict[str, Any]:
        """Recompute every policy-value cell from fitted artifacts and check the report's provenance"""
        report = read_json(require_artifact(self.paths.report, "report"))

        changed = [name for name, digest in report["provenance"]["artifacts"].items()
                   if not (self.paths.root / name).exists() or sha256_file(self.paths.root / name) != digest]
        if changed:
            raise DataError(f"artifacts changed since the report was written: {', '.join(sorted(changed))}")

        mismatches = []
        checked = 0
        for kind in ENCODINGS:
            _, _, reports, _ = self._policy_values(kind)
            for (policy, variates), recomputed in reports.items():
                cell = f"{policy}/{variates}"
                reported = report["policy_values"].get(kind, {}).get(cell)
                checked += 1
                if reported is None or abs(reported - recomputed.estimate) > VERIFY_TOLERANCE:
                    mismatches.append(f"{kind} {cell}: reported {reported}, recomputed {recomputed.estimate}")
        if mismatches:
            raise DataError("report does not match the artifacts: " + "; ".join(mismatches))

        logger.info(f"Verified {checked} policy-value cells and {len(report['provenance']['artifacts'])} artifact hashes")
        return {"verified_cells": checked}
