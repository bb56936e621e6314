"""
Policy agreement, action-distribution grids, figures and the run report.

Everything here reads serialized artifacts only, so a report regenerated from
unchanged artifacts is byte-identical.
"""
import io
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.core.config import Settings  # noqa: E402
from app.core.exceptions import UsageError  # noqa: E402
from app.core.logging_config import get_logger  # noqa: E402
from app.models.schemas import BootstrapResult, Provenance, RunReport, WeightDiagnostics  # noqa: E402
from app.utils.artifacts import (  # noqa: E402
    ENCODINGS,
    POLICIES,
    RunPaths,
    atomic_write_bytes,
    read_json,
    read_npz,
    require_artifact,
    sha256_file,
    write_csv,
    write_json,
)
from app.utils.features import N_ACTIONS, N_DOSE_BINS, action_bins  # noqa: E402

logger = get_logger(__name__)

AgreementMode = Literal["argmax", "tv"]
SVG_HASH_SALT = "sepsis-moe"
REPORT_ENCODING = "recurrent"
BOOTSTRAP_BASELINES = ("physician", "kernel", "dqn")


def policy_agreement(policy_a: np.ndarray, policy_b: np.ndarray, mode: AgreementMode = "argmax") -> float:
    """
    Share of states on which two policy tables [Q, 25] agree: matching argmax
    actions (ties go to the lowest index), or mean total-variation overlap
    """
    policy_a = np.atleast_2d(np.asarray(policy_a, dtype=np.float64))
    policy_b = np.atleast_2d(np.asarray(policy_b, dtype=np.float64))
    if policy_a.shape != policy_b.shape or policy_a.shape[0] == 0:
        raise UsageError("agreement needs two policy tables over the same non-empty set of states")
    if mode == "argmax":
        return float(np.mean(np.argmax(policy_a, axis=1) == np.argmax(policy_b, axis=1)))
    if mode == "tv":
        return float(1.0 - 0.5 * np.mean(np.abs(policy_a - policy_b).sum(axis=1)))
    raise UsageError(f"unknown agreement mode '{mode}'")


def agreement_matrix(policies: Mapping[str, np.ndarray], mode: AgreementMode = "argmax") -> Dict[str, Dict[str, float]]:
    names = list(policies)
    return {a: {b: policy_agreement(policies[a], policies[b], mode) for b in names} for a in names}


def action_distribution(policy: np.ndarray) -> np.ndarray:
    """
    Frequency of each argmax action on a 5x5 grid. Rows run from the highest IV
    bin (row 0) down to IV bin 0, columns from vasopressor bin 0 to 4, so action 0
    sits bottom-left and action 24 top-right.
    """
    policy = np.atleast_2d(np.asarray(policy, dtype=np.float64))
    if policy.shape[0] == 0 or policy.shape[1] != N_ACTIONS:
        raise UsageError(f"action_distribution needs a non-empty [Q, {N_ACTIONS}] policy table")
    counts = np.bincount(np.argmax(policy, axis=1), minlength=N_ACTIONS)
    grid = np.zeros((N_DOSE_BINS, N_DOSE_BINS))
    for action, count in enumerate(counts):
        iv_bin, vaso_bin = action_bins(action)
        grid[N_DOSE_BINS - 1 - iv_bin, vaso_bin] = count
    return grid / policy.shape[0]


def grid_frame(grid: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(grid, columns=[f"vaso_bin_{j}" for j in range(N_DOSE_BINS)])
    frame.insert(0, "iv_bin", list(range(N_DOSE_BINS - 1, -1, -1)))
    return frame


def save_svg(figure, path: Path) -> Path:
    buffer = io.BytesIO()
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(figure)
    return atomic_write_bytes(path, buffer.getvalue())


def plot_action_grid(grid: np.ndarray, title: str):
    figure, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(grid, cmap="Blues", vmin=0.0, vmax=max(float(grid.max()), 1e-12))
    ax.set_xticks(range(N_DOSE_BINS))
    ax.set_yticks(range(N_DOSE_BINS))
    ax.set_yticklabels([str(b) for b in range(N_DOSE_BINS - 1, -1, -1)])
    ax.set_xlabel("Vasopressor dose bin")
    ax.set_ylabel("IV fluid dose bin")
    ax.set_title(title)
    for row in range(N_DOSE_BINS):
        for column in range(N_DOSE_BINS):
            ax.text(column, row, f"{grid[row, column]:.2f}", ha="center", va="center", fontsize=7)
    figure.colorbar(image, ax=ax)
    figure.tight_layout()
    return figure


def plot_weight_histogram(diagnostics: WeightDiagnostics, title: str):
    labels = list(diagnostics.histogram)
    figure, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(labels)), [diagnostics.histogram[label] for label in labels], color="#4c72b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("Count")
    ax.set_title(f"{title}\nnonzero {100 * diagnostics.fraction_nonzero_weights:.1f}%, "
                 f"final nonzero {100 * diagnostics.fraction_nonzero_final_weights:.1f}%")
    figure.tight_layout()
    return figure


def plot_log_odds(histogram: pd.DataFrame):
    figure, ax = plt.subplots(figsize=(6, 3.5))
    width = histogram["bin_right"] - histogram["bin_left"]
    ax.bar(histogram["bin_left"], histogram["survivor"], width=width, align="edge", alpha=0.6, label="survivors")
    ax.bar(histogram["bin_left"], histogram["non_survivor"], width=width, align="edge", alpha=0.6, label="non-survivors")
    ax.set_xlabel("Predicted mortality log-odds")
    ax.set_ylabel("Observations")
    ax.legend()
    figure.tight_layout()
    return figure


def plot_bootstrap(result: BootstrapResult):
    figure, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(result.differences, bins=30, color="#55a868")
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.axvline(result.original_difference, color="#c44e52", linestyle="--", label="original")
    ax.set_xlabel(f"WDR({result.policy_a}) - WDR({result.policy_b})")
    ax.set_ylabel("Resamples")
    ax.legend()
    figure.tight_layout()
    return figure


def bootstrap_summary(result: BootstrapResult) -> Dict[str, float]:
    summary = result.model_dump(exclude={"differences", "policy_a", "policy_b"})
    summary["n_resamples"] = len(result.differences)
    return {key: float(value) for key, value in summary.items()}


def policy_value_frame(policy_values: Mapping[str, Mapping[str, float]]) -> pd.DataFrame:
    rows = []
    for encoding, values in policy_values.items():
        for cell, value in values.items():
            policy, variates = cell.split("/")
            rows.append({"encoding": encoding, "policy": policy, "variates": variates, "wdr": value})
    return pd.DataFrame(rows, columns=["encoding", "policy", "variates", "wdr"])


class ReportService:
    """Assembles report.json, CSV tables and SVG figures from the artifacts of a run"""

    def __init__(self, settings: Settings, paths: Optional[RunPaths] = None):
        self.settings = settings
        self.paths = paths or RunPaths(settings.OUTPUT_DIR)
        self.consumed: List[Path] = []
        self.skipped: List[str] = []

    def _use(self, path: Path) -> Path:
        self.consumed.append(path)
        return path

    def _optional(self, path: Path, figures: List[str]) -> Optional[Path]:
        if path.exists():
            return self._use(path)
        logger.warning(f"{path.name} not found; skipping {', '.join(figures)}")
        self.skipped.extend(figures)
        return None

    def load_policy_tables(self, kind: str) -> Dict[str, np.ndarray]:
        path = self._use(require_artifact(self.paths.policy_tables(kind), "evaluate"))
        tables = read_npz(path)
        return {policy: tables[policy] for policy in POLICIES}

    def emit_report(self) -> RunReport:
        self.consumed, self.skipped = [], []
        mode = self.settings.REPORT_AGREEMENT
        evaluation = read_json(self._use(require_artifact(self.paths.evaluation, "evaluate")))

        agreement = {}
        for kind in ENCODINGS:
            matrix = agreement_matrix(self.load_policy_tables(kind), mode)
            agreement[kind] = matrix
            write_csv(self.paths.table(f"agreement_{kind}"), pd.DataFrame(matrix).T.rename_axis("policy").reset_index())

        grids = {}
        for policy, table in self.load_policy_tables(REPORT_ENCODING).items():
            grid = action_distribution(table)
            grids[policy] = grid.tolist()
            write_csv(self.paths.table(f"action_grid_{policy}"), grid_frame(grid))
            save_svg(plot_action_grid(grid, f"{policy} ({REPORT_ENCODING})"), self.paths.figure(f"action_grid_{policy}"))

        diagnostics = {key: WeightDiagnostics(**value) for key, value in evaluation["diagnostics"].items()}
        for kind in ENCODINGS:
            key = f"{kind}/moe"
            if key in diagnostics:
                save_svg(plot_weight_histogram(diagnostics[key], f"MoE importance weights ({kind})"),
                         self.paths.figure(f"weights_{kind}_moe"))

        write_csv(self.paths.table("policy_values"), policy_value_frame(evaluation["policy_values"]))

        bootstrap = {}
        bootstrap_path = self._optional(self.paths.bootstrap, [f"bootstrap_moe_minus_{b}" for b in BOOTSTRAP_BASELINES])
        if bootstrap_path is not None:
            for name, payload in read_json(bootstrap_path).items():
                result = BootstrapResult(**payload)
                bootstrap[name] = bootstrap_summary(result)
                save_svg(plot_bootstrap(result), self.paths.figure(f"bootstrap_{name}"))

        histogram_path = self._optional(self.paths.log_odds_histogram, ["log_odds"])
        if histogram_path is not None:
            save_svg(plot_log_odds(pd.read_csv(histogram_path)), self.paths.figure("log_odds"))

        reward_summary = {}
        summary_path = self._optional(self.paths.reward_summary, [])
        if summary_path is not None:
            reward_summary = read_json(summary_path)

        self._write_timing_table()

        gate_summary = {
            f"{kind}/{key}": value
            for kind, summary in evaluation["gate_summary"].items()
            for key, value in summary.items()
        }
        report = RunReport(
            policy_values=evaluation["policy_values"],
            agreement=agreement[REPORT_ENCODING],
            action_grids=grids,
            diagnostics=diagnostics,
            bootstrap=bootstrap,
            reward_summary=reward_summary,
            gate_summary=gate_summary,
            skipped_figures=sorted(self.skipped),
            provenance=self._provenance(),
        )
        write_json(self.paths.report, report.model_dump(mode="json"))
        logger.info(f"Report written to {self.paths.report} ({len(self.skipped)} figures skipped)")
        return report

    def _write_timing_table(self) -> None:
        if not self.paths.timings.exists():
            return
        timings = read_json(self.paths.timings)
        frame = pd.DataFrame(sorted(timings.items()), columns=["subcommand", "seconds"])
        write_csv(self.paths.table("timings"), frame)

    def _provenance(self) -> Provenance:
        artifacts = {}
        for path in self.consumed:
            artifacts[path.relative_to(self.paths.root).as_posix()] = sha256_file(path)
        return Provenance(
            config_hash=self.settings.config_hash(),
            seed=self.settings.SEED,
            scale=self.settings.SCALE,
            artifacts=artifacts,
        )
