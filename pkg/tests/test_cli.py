"""Tests for the command line entry point."""

import json
from unittest.mock import MagicMock, patch

import pytest

from aiogenrl.cli import COMMANDS, PipelineConfig, resolve_workers, run_subcommand
from aiogenrl.const import CONFIG_ECHO_FILE, MANIFEST_FILE, WORKERS_ENV_VAR
from aiogenrl.errors import InvalidConfig, SeedCollision, UsageError

SMALL_CONFIG = {
    "seed": 0,
    "grid": {"width": 9, "height": 9, "num_walls": 2},
    "ppo": {"n_steps": 16, "batch_size": 8, "n_epochs": 1, "hidden_sizes": [8, 8]},
    "forge": {
        "n_agents": 12,
        "steps_per_agent": 32,
        "step_tiers": [16, 32, 48],
        "n_eval_envs": 3,
        "eval_seed_base": 1000,
    },
    "predictor": {"epochs": 20, "min_samples": 5},
    "selection_threshold": 0.0,
    "compare": {
        "n_agents": 2,
        "total_steps": 32,
        "eval_every": 16,
        "n_eval_envs": 2,
        "train_seed_base": 5000,
        "eval_seed_base": 6000,
    },
}


def write_config(tmp_path, data=None, **overrides):
    """Write a pipeline config and return its path."""
    data = json.loads(json.dumps(SMALL_CONFIG if data is None else data))
    for section, values in overrides.items():
        data[section].update(values)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def relabel(manifest_path):
    """Give every agent a distinct label in [0, 1]."""
    data = json.loads(manifest_path.read_text(encoding="utf-8"))
    count = len(data["records"])
    for position, record in enumerate(data["records"]):
        record["zeta"] = position / (count - 1)
    manifest_path.write_text(json.dumps(data), encoding="utf-8")


def test_unknown_flag_is_a_usage_error(capsys):
    """Test that an unknown flag exits with code 2."""
    assert run_subcommand(["verify", "--manifest", "x", "--bogus"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_missing_command_is_a_usage_error():
    """Test that no subcommand exits with code 2."""
    assert run_subcommand([]) == 2


def test_help_exits_cleanly(capsys):
    """Test that --help exits with code 0."""
    assert run_subcommand(["--help"]) == 0
    assert "predict-train" in capsys.readouterr().out


def test_missing_manifest_is_a_domain_error(tmp_path):
    """Test that verifying a missing dataset exits with code 1."""
    assert run_subcommand(["verify", "--manifest", str(tmp_path / "nope.json")]) == 1


def test_forge_then_verify(tmp_path):
    """Test that a forged dataset verifies and a tampered one does not."""
    config = write_config(tmp_path, forge={"n_agents": 2})
    out = tmp_path / "dataset"
    argv = ["--seed", "7", "forge", "--config", config, "--out", str(out)]
    assert run_subcommand(argv) == 0
    echo = json.loads((out / CONFIG_ECHO_FILE).read_text(encoding="utf-8"))
    assert echo["seed"] == 7
    assert echo["config"]["forge"]["noise"]["seed"] == 7
    assert run_subcommand(["verify", "--manifest", str(out / MANIFEST_FILE)]) == 0
    weights = next((out / "weights").iterdir())
    weights.write_bytes(weights.read_bytes()[:-1])
    assert run_subcommand(["verify", "--manifest", str(out / MANIFEST_FILE)]) == 1


def test_dataset_without_agents_is_a_domain_error(tmp_path, monkeypatch):
    """Test that a dataset whose agents all failed exits with code 1."""
    monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
    config = write_config(tmp_path, forge={"n_agents": 2})
    out = tmp_path / "dataset"
    with patch("aiogenrl.forge.PpoTrainer", side_effect=RuntimeError("boom")):
        assert run_subcommand(["forge", "--config", config, "--out", str(out)]) == 0
    manifest = str(out / MANIFEST_FILE)
    for command, out_name in (("features", "features"), ("predict-train", "predictor")):
        argv = [command, "--manifest", manifest, "--out", str(tmp_path / out_name)]
        assert run_subcommand(argv) == 1


def test_value_error_is_a_domain_error(tmp_path):
    """Test that a ValueError raised by a subcommand exits with code 1."""
    failing = MagicMock(side_effect=ValueError("bad data"))
    with patch.dict(COMMANDS, {"verify": failing}):
        assert run_subcommand(["verify", "--manifest", str(tmp_path / "m.json")]) == 1
    failing.assert_called_once()


def test_workers_come_from_flag_or_environment(monkeypatch):
    """Test worker resolution from the flag and the environment variable."""
    monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
    assert resolve_workers(None) is None
    monkeypatch.setenv(WORKERS_ENV_VAR, "3")
    assert resolve_workers(None) == 3
    assert resolve_workers(2) == 2
    monkeypatch.setenv(WORKERS_ENV_VAR, "many")
    with pytest.raises(UsageError):
        resolve_workers(None)
    with pytest.raises(UsageError):
        resolve_workers(0)


def test_bad_worker_environment_is_a_usage_error(tmp_path, monkeypatch):
    """Test that an invalid worker variable exits with code 2 before any work."""
    monkeypatch.setenv(WORKERS_ENV_VAR, "-1")
    out = tmp_path / "dataset"
    argv = ["forge", "--config", write_config(tmp_path), "--out", str(out)]
    assert run_subcommand(argv) == 2
    assert not out.exists()


def test_config_sections_inherit_shared_defaults():
    """Test that top-level grid and ppo sections flow into forge and compare."""
    config = PipelineConfig.from_dict(SMALL_CONFIG)
    assert config.forge.ppo.n_steps == 16
    assert config.compare.ppo.hidden_sizes == (8, 8)
    assert config.forge.grid.width == 9
    assert config.forge.step_tiers == (16, 32, 48)
    assert PipelineConfig.from_dict(config.to_dict()) == config
    seeded = config.with_seed(11)
    assert seeded.forge.noise.seed == seeded.compare.noise.seed == 11
    assert seeded.predictor.seed == 11
    assert seeded.with_workers(4).forge.workers == 4


def test_config_errors(tmp_path):
    """Test unreadable configs and colliding seed pools."""
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(InvalidConfig):
        PipelineConfig.load(str(path))
    path.write_text(json.dumps({"ppo": {"bogus": 1}}), encoding="utf-8")
    with pytest.raises(InvalidConfig):
        PipelineConfig.load(str(path))
    data = json.loads(json.dumps(SMALL_CONFIG))
    data["compare"]["train_seed_base"] = 5
    with pytest.raises(SeedCollision):
        PipelineConfig.from_dict(data)


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    """Test every subcommand end to end on tiny worlds."""
    config = write_config(tmp_path)
    dataset = tmp_path / "dataset"
    manifest = dataset / MANIFEST_FILE
    assert run_subcommand(["forge", "--config", config, "--out", str(dataset)]) == 0
    relabel(manifest)
    assert run_subcommand(["verify", "--manifest", str(manifest)]) == 0

    features = tmp_path / "features"
    argv = ["features", "--manifest", str(manifest), "--out", str(features)]
    assert run_subcommand(argv + ["--threshold", "0"]) == 0
    assert (features / "features.csv").is_file() and (features / "mask.json").is_file()

    predictor = tmp_path / "predictor"
    argv = ["predict-train", "--manifest", str(manifest), "--out", str(predictor)]
    assert run_subcommand(argv + ["--config", config]) == 0
    evaluation = tmp_path / "evaluation"
    argv = ["predict-eval", "--manifest", str(manifest), "--predictor", str(predictor)]
    assert run_subcommand(argv + ["--out", str(evaluation)]) == 0
    report = json.loads((evaluation / "report.json").read_text(encoding="utf-8"))
    assert report["n"] == 2 and report["disjoint"] is True

    agent = tmp_path / "agent"
    argv = ["agent-train", "--config", config, "--predictor", str(predictor)]
    assert run_subcommand(argv + ["--out", str(agent)]) == 0
    assert (agent / "checkpoints.csv").is_file() and (agent / "policy.rlwb").is_file()

    comparison = tmp_path / "comparison"
    argv = ["compare", "--config", config, "--predictor", str(predictor)]
    assert run_subcommand(argv + ["--out", str(comparison)]) == 0
    assert (comparison / "curves.svg").is_file()
    assert (comparison / "sign_test.csv").is_file()
