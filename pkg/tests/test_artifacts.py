import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import ConfigurationError, DataError, DependencyError
from app.utils.artifacts import (
    load_checkpoint, read_json, read_npz, require_artifact, save_checkpoint, sha256_file, write_csv,
    write_json, write_npz,
)
from app.utils.validators import check_stochastic_rows, is_distribution, validate_probability


def test_checkpoint_round_trip(tmp_path, rng):
    blocks = {"W0": rng.normal(size=(3, 4)), "b0": rng.normal(size=4), "scalar": np.array(2.5)}
    path = save_checkpoint(tmp_path / "model.ckpt", {"kind": "dense", "widths": [3, 4]}, blocks)

    header, loaded = load_checkpoint(path)
    assert header["kind"] == "dense"
    assert [entry["name"] for entry in header["blocks"]] == ["W0", "b0", "scalar"]
    for name, values in blocks.items():
        np.testing.assert_array_equal(loaded[name], values)
        assert loaded[name].shape == np.shape(values)


def test_checkpoint_rejects_corruption(tmp_path, rng):
    path = save_checkpoint(tmp_path / "model.ckpt", {}, {"W": rng.normal(size=5)})
    raw = path.read_bytes()

    (tmp_path / "trailing.ckpt").write_bytes(raw + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(tmp_path / "trailing.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"X" + raw[1:])
    with pytest.raises(DataError, match="bad magic"):
        load_checkpoint(tmp_path / "magic.ckpt")


def test_npz_bytes_are_deterministic(tmp_path, rng):
    arrays = {"b": rng.random(7), "a": np.arange(6).reshape(2, 3)}
    first = write_npz(tmp_path / "one.npz", **arrays)
    second = write_npz(tmp_path / "two.npz", **dict(reversed(list(arrays.items()))))
    assert first.read_bytes() == second.read_bytes()
    assert sha256_file(first) == sha256_file(second)

    loaded = read_npz(first)
    np.testing.assert_array_equal(loaded["a"], arrays["a"])
    np.testing.assert_array_equal(loaded["b"], arrays["b"])


def test_json_and_csv_writes(tmp_path):
    path = write_json(tmp_path / "nested" / "payload.json", {"b": 1, "a": [1.5, None]})
    assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')
    assert read_json(path) == {"a": [1.5, None], "b": 1}
    assert not list(path.parent.glob("*.tmp"))

    frame = pd.DataFrame({"x": [0.1, 2.0], "y": ["u", "v"]})
    csv = write_csv(tmp_path / "frame.csv", frame)
    pd.testing.assert_frame_equal(pd.read_csv(csv), frame)


def test_require_artifact_names_producer(tmp_path):
    with pytest.raises(DependencyError) as info:
        require_artifact(tmp_path / "missing.npz", "fit-kernel")
    assert info.value.producer == "fit-kernel"
    assert info.value.exit_code == 1

    present = tmp_path / "present.json"
    write_json(present, {})
    assert require_artifact(present, "simulate") == present


def test_distribution_validators():
    assert is_distribution([0.25, 0.75])
    assert is_distribution(np.full((3, 4), 0.25))
    assert not is_distribution([0.5, 0.6])
    assert not is_distribution([1.5, -0.5])
    assert not is_distribution([np.nan, 1.0])
    assert not is_distribution([])

    check_stochastic_rows(np.full((2, 3, 4), 0.25), "transition")
    table = np.full((2, 3, 4), 0.25)
    table[1, 2] = [0.5, 0.5, 0.5, -0.5]
    with pytest.raises(ConfigurationError, match=r"transition\[1,2\]") as info:
        check_stochastic_rows(table, "transition")
    assert info.value.field == "transition"

    table[1, 2] = [0.3, 0.3, 0.3, 0.3]
    with pytest.raises(ConfigurationError, match="sums to"):
        check_stochastic_rows(table, "transition")

    assert validate_probability(0.7, "ratio") == 0.7
    with pytest.raises(ConfigurationError):
        validate_probability(1.0, "ratio")
