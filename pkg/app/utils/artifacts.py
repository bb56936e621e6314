"""Artifact IO: atomic writes, JSON/CSV/NPZ helpers and the checkpoint codec"""
import hashlib
import io
import json
import os
import struct
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import pandas as pd

from app.core.exceptions import DataError, DependencyError
from app.core.logging_config import get_logger

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"SEPMOE-CKPT-v1\n"
NPZ_TIMESTAMP = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)
    return atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format="%.10g", lineterminator="\n")
    return atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def write_npz(path: PathLike, **arrays: np.ndarray) -> Path:
    """Uncompressed .npz with fixed member timestamps, loadable by np.load"""
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asanyarray(arrays[name]), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_TIMESTAMP), member.getvalue())
    return atomic_write_bytes(path, buffer.getvalue())


def read_npz(path: PathLike) -> Dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as data:
        return {key: data[key] for key in data.files}


def require_artifact(path: PathLike, producer: str) -> Path:
    """Fail with a DependencyError naming the subcommand that writes the artifact"""
    path = Path(path)
    if not path.exists():
        raise DependencyError(str(path), producer)
    return path


def save_checkpoint(path: PathLike, header: Mapping[str, Any], blocks: Mapping[str, np.ndarray]) -> Path:
    """
    Checkpoint layout: magic, 8-byte little-endian header length, UTF-8 JSON header,
    then every block as contiguous little-endian float64 in header order
    """
    block_table = []
    payloads = []
    for name, values in blocks.items():
        flat = np.ascontiguousarray(values, dtype="<f8").ravel()
        block_table.append({"name": name, "shape": list(np.shape(values)), "size": int(flat.size)})
        payloads.append(flat.tobytes())

    full_header = dict(header)
    full_header["blocks"] = block_table
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(payloads)
    logger.debug(f"Writing checkpoint {path} ({len(payload):,} bytes, {len(block_table)} blocks)")
    return atomic_write_bytes(path, payload)


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint (bad magic)")

    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack("<Q", raw[offset:offset + 8])
    offset += 8
    header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    blocks = {}
    for entry in header["blocks"]:
        n_bytes = entry["size"] * 8
        flat = np.frombuffer(raw[offset:offset + n_bytes], dtype="<f8").astype(np.float64)
        blocks[entry["name"]] = flat.reshape(entry["shape"])
        offset += n_bytes

    if offset != len(raw):
        raise DataError(f"{path} has {len(raw) - offset} trailing bytes")
    return header, blocks


ENCODINGS = ("sparse", "recurrent")
POLICIES = ("physician", "kernel", "dqn", "moe")
VARIATES = ("V_d", "V_b")


class RunPaths:
    """File names of every artifact under one output directory"""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    @property
    def cohort_csv(self) -> Path:
        return self.root / "cohort.csv"

    @property
    def ground_truth(self) -> Path:
        return self.root / "ground_truth.json"

    @property
    def preprocess_stats(self) -> Path:
        return self.root / "preprocess_stats.json"

    @property
    def action_space(self) -> Path:
        return self.root / "action_space.json"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    def processed(self, part: str) -> Path:
        return self.root / f"{part}.npz"

    def encoder(self, kind: str) -> Path:
        return self.root / f"encoder_{kind}.ckpt"

    def states(self, kind: str) -> Path:
        return self.root / f"states_{kind}.npz"

    @property
    def encoder_summary(self) -> Path:
        return self.root / "encoder_summary.json"

    @property
    def predictor(self) -> Path:
        return self.root / "predictor.ckpt"

    @property
    def rewards(self) -> Path:
        return self.root / "rewards.npz"

    @property
    def reward_summary(self) -> Path:
        return self.root / "reward_summary.json"

    @property
    def log_odds_histogram(self) -> Path:
        return self.root / "log_odds_histogram.csv"

    @property
    def input_gradients(self) -> Path:
        return self.root / "input_gradients.csv"

    @property
    def gradient_correlations(self) -> Path:
        return self.root / "input_gradient_correlations.csv"

    def dqn(self, kind: str) -> Path:
        return self.root / f"dqn_{kind}.ckpt"

    def policies(self, kind: str) -> Path:
        return self.root / f"policies_{kind}.npz"

    def kernel_selection(self, kind: str) -> Path:
        return self.root / f"kernel_selection_{kind}.json"

    def gate(self, kind: str) -> Path:
        return self.root / f"gate_{kind}.json"

    def wdr(self, kind: str, policy: str, variates: str) -> Path:
        return self.root / "wdr" / f"{kind}_{policy}_{variates}.json"

    def policy_tables(self, kind: str) -> Path:
        return self.root / f"test_policies_{kind}.npz"

    @property
    def evaluation(self) -> Path:
        return self.root / "evaluate.json"

    @property
    def bootstrap(self) -> Path:
        return self.root / "bootstrap.json"

    def bootstrap_csv(self, baseline: str) -> Path:
        return self.root / "tables" / f"bootstrap_moe_minus_{baseline}.csv"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    def table(self, name: str) -> Path:
        return self.root / "tables" / f"{name}.csv"

    def figure(self, name: str) -> Path:
        return self.root / "figures" / f"{name}.svg"

    @property
    def timings(self) -> Path:
        return self.root / "timings.json"

    @property
    def logs(self) -> Path:
        return self.root / "logs"


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
