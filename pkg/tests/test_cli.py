import json

import numpy as np
import pytest
import yaml

from modmoe.cli import main
from modmoe.config import RunConfig, run_config_from_dict, run_config_to_dict

TINY = {
    "generator": {"participants": 40, "feature_dims": [4, 4, 4, 4]},
    "model": {"feature_dims": [4, 4, 4, 4], "model_dim": 8, "encoder_hidden": 8, "heads": 2, "head_hidden": 8},
    "routing": {"expert_hidden": 8},
    "train": {"max_epochs": 2, "patience": 2, "seeds": [0, 1]},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


def test_gen_data_is_byte_identical(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert _run(capsys, "gen-data", "--config", config, "--seed", 7, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a/dataset.jsonl").read_bytes() == (tmp_path / "b/dataset.jsonl").read_bytes()
    resolved = yaml.safe_load((tmp_path / "a/config.resolved.yaml").read_text())
    assert resolved["generator"]["seed"] == 7


def test_gen_data_binary(tmp_path, config, capsys):
    assert _run(capsys, "gen-data", "--config", config, "--binary", "--out", tmp_path)[0] == 0
    assert (tmp_path / "dataset.bin").read_bytes().startswith(b"MMDS")


def test_full_pipeline(tmp_path, config, capsys):
    out = tmp_path / "run"
    common = ["--config", config, "--out", out]
    assert _run(capsys, "gen-data", *common)[0] == 0
    assert _run(capsys, "split", *common, "--data", out / "dataset.jsonl")[0] == 0
    report = json.loads((out / "split_report.json").read_text())
    assert sum(v["subjects"] for v in report.values()) == len((out / "dataset.jsonl").read_text().splitlines()) - 1
    owners = {}
    for name in ("train", "val", "test"):
        for line in (out / f"{name}.jsonl").read_text().splitlines()[1:]:
            assert owners.setdefault(json.loads(line)["participant_id"], name) == name

    assert _run(capsys, "augment", *common, "--data", out)[0] == 0
    assert _run(capsys, "train", *common, "--data", out, "--strategy", "per-modality")[0] == 0
    assert (out / "model_seed0.npz").exists() and (out / "model_seed1.npz").exists()
    assert len((out / "history_seed0.jsonl").read_text().splitlines()) == 2

    assert _run(capsys, "eval", *common, "--data", out)[0] == 0
    metrics = json.loads((out / "metrics.json").read_text())
    overall = metrics["cells"][0]
    assert overall["section"] == "overall" and np.isfinite(overall["mean"])
    assert len(overall["per_seed"]) == 2

    assert _run(capsys, "routing-stats", *common, "--data", out)[0] == 0
    header = (out / "routing_trace.csv").read_text().splitlines()[0]
    assert header == "sample_id,modality_label,availability_bitmask,expert_index,gate_weight,selected"
    summary = json.loads((out / "activation_summary.json").read_text())
    assert len(summary["router_entropy"]) == 4
    assert (out / "activation.csv").exists()


def _error(err):
    lines = err.strip().splitlines()
    return json.loads(lines[-1])


def test_missing_file_is_io_error(tmp_path, config, capsys):
    code, err = _run(capsys, "split", "--config", config, "--out", tmp_path, "--data", tmp_path / "nope.jsonl")
    assert code == 3
    assert _error(err)["error"] == "io"


def test_malformed_line_is_parse_error(tmp_path, config, capsys):
    _run(capsys, "gen-data", "--config", config, "--out", tmp_path)
    path = tmp_path / "dataset.jsonl"
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:-10]
    path.write_text("\n".join(lines) + "\n")
    code, err = _run(capsys, "split", "--config", config, "--out", tmp_path, "--data", path)
    assert code == 4
    msg = _error(err)
    assert msg["error"] == "parse" and ":3:" in msg["message"]


def test_too_few_experts_is_config_error(tmp_path, config, capsys):
    code, err = _run(capsys, "gen-data", "--config", config, "--experts", 8, "--out", tmp_path)
    assert code == 2
    msg = _error(err)
    assert msg["error"] == "config" and "16" in msg["message"]


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  learning_rat: 0.1\n")
    code, err = _run(capsys, "gen-data", "--config", bad, "--out", tmp_path)
    assert code == 2 and "learning_rat" in _error(err)["message"]


def test_default_config_round_trips():
    data = run_config_to_dict(RunConfig())
    assert run_config_from_dict(yaml.safe_load(yaml.safe_dump(data))) == RunConfig()
