"""Tests for forging a labelled agent population."""

from concurrent.futures import Future, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import replace
import json
from unittest.mock import MagicMock, patch

import pytest

from aiogenrl.const import MANIFEST_FILE
from aiogenrl.env import GridSpec, NoiseConfig, derive_specs, generate
from aiogenrl.errors import (
    EmptyEvalSet,
    HashMismatch,
    InvalidConfig,
    ManifestError,
    MissingWeights,
    SeedCollision,
)
from aiogenrl.forge import (
    AgentRecord,
    DatasetManifest,
    ForgeConfig,
    async_forge,
    compute_zeta,
    config_hash,
    forge,
    forge_agent,
    make_executor,
    ranges_overlap,
    run_greedy_episode,
    verify_manifest,
    zeta_from_returns,
)
from aiogenrl.ppo import PolicyNet, PpoConfig
from aiogenrl.seeding import make_rng

GRID = GridSpec()
TINY_PPO = PpoConfig(n_steps=16, batch_size=8, n_epochs=1, hidden_sizes=(8, 8))


def create_small_config(**kwargs):
    """Return a forge config that trains in well under a second per agent."""
    defaults = dict(
        n_agents=3,
        steps_per_agent=32,
        grid=GRID,
        n_eval_envs=3,
        eval_seed_base=1000,
        ppo=TINY_PPO,
    )
    defaults.update(kwargs)
    return ForgeConfig(**defaults)


def create_mock_executor():
    """Create an executor mock that runs submitted work inline."""

    def submit(fn, *args):
        future = Future()
        try:
            future.set_result(fn(*args))
        except Exception as err:  # pylint: disable=broad-except
            future.set_exception(err)
        return future

    mock_executor = MagicMock()
    mock_executor.submit.side_effect = submit
    return mock_executor


def create_mock_record(config, index, out_dir):
    """Return a successful record without training."""
    return AgentRecord(
        agent_id=f"agent-{index:04d}",
        index=index,
        train_seed=config.train_seed_base + index,
        init_seed=index,
        steps=config.steps_per_agent,
        weights_path=None,
        weights_sha256=None,
        zeta=0.5,
        eval_seed_start=config.eval_seed_base,
        eval_seed_count=config.n_eval_envs,
        wall_clock=0.0,
        config_hash="",
    )


def without_wall_clock(records):
    """Drop the timing field, which is the only non-deterministic one."""
    return [replace(r, wall_clock=0.0) for r in records]


def test_zeta_is_the_mean_return():
    """Test that zeta averages the evaluation returns."""
    assert zeta_from_returns([1.0, 0.0, 0.5, 0.5]) == 0.5
    assert zeta_from_returns([0.0]) == 0.0


def test_empty_evaluation_set_raises():
    """Test that scoring over nothing raises EmptyEvalSet."""
    with pytest.raises(EmptyEvalSet):
        zeta_from_returns([])
    policy = PolicyNet.create(make_rng(0), hidden_sizes=(8, 8))
    with pytest.raises(EmptyEvalSet):
        compute_zeta(policy, [], NoiseConfig())


def test_greedy_returns_are_in_unit_range():
    """Test that greedy evaluation returns stay in [0, 1] and repeat."""
    policy = PolicyNet.create(make_rng(0), hidden_sizes=(8, 8))
    specs = derive_specs(GRID, 50, 4)
    first = compute_zeta(policy, specs, NoiseConfig(amplitude=0.05, seed=2))
    assert 0.0 <= first <= 1.0
    assert compute_zeta(policy, specs, NoiseConfig(amplitude=0.05, seed=2)) == first
    assert 0.0 <= run_greedy_episode(policy, generate(specs[0])) <= 1.0


def test_seed_pools_must_be_disjoint():
    """Test that overlapping training and evaluation seeds raise SeedCollision."""
    assert ranges_overlap(range(0, 10), range(9, 12))
    assert not ranges_overlap(range(0, 10), range(10, 12))
    with pytest.raises(SeedCollision):
        create_small_config(n_agents=10, train_seed_base=0, eval_seed_base=5)


def test_seeds_a_layout_period_apart_collide():
    """Test that seeds agreeing modulo the layout count count as shared."""
    assert ranges_overlap(range(0, 3), range(588, 591), 588)
    assert not ranges_overlap(range(0, 3), range(588, 591))
    assert not ranges_overlap(range(0, 3), range(591, 594), 588)
    assert ranges_overlap(range(0, 588), range(10**6, 10**6 + 1), 588)
    assert not ranges_overlap(range(0), range(0, 5), 588)
    with pytest.raises(SeedCollision):
        create_small_config(train_seed_base=0, eval_seed_base=588)
    with pytest.raises(SeedCollision):
        create_small_config(
            n_agents=200,
            train_seed_base=1_000,
            n_eval_envs=100,
            eval_seed_base=1_000_000,
        )
    create_small_config(
        n_agents=200, train_seed_base=0, n_eval_envs=100, eval_seed_base=1_000_000
    )


def test_config_rejects_short_budgets():
    """Test that a budget below one rollout raises InvalidConfig."""
    with pytest.raises(InvalidConfig):
        create_small_config(steps_per_agent=8)
    with pytest.raises(InvalidConfig):
        create_small_config(step_tiers=(32, 8))
    with pytest.raises(InvalidConfig):
        create_small_config(workers=0)


def test_step_tiers_cycle_over_agents():
    """Test that tiered budgets alternate by agent index."""
    config = create_small_config(step_tiers=(16, 32))
    assert [config.steps_for(i) for i in range(4)] == [16, 32, 16, 32]
    assert ForgeConfig.from_dict(config.to_dict()) == config


def test_config_hash_tracks_training_inputs():
    """Test that the hash is stable and changes with the budget."""
    assert config_hash(TINY_PPO, GRID, 32) == config_hash(TINY_PPO, GRID, 32)
    assert config_hash(TINY_PPO, GRID, 32) != config_hash(TINY_PPO, GRID, 48)


def test_forge_agent_records_failures(tmp_path):
    """Test that a failing agent is recorded instead of raised."""
    with patch("aiogenrl.forge.PpoTrainer", side_effect=RuntimeError("boom")):
        record = forge_agent(create_small_config(), 1, tmp_path)
    assert not record.ok
    assert record.error == "RuntimeError: boom"
    assert record.weights_path is None and record.zeta is None
    assert record.train_seed == 1


@pytest.mark.asyncio
async def test_small_forge_writes_a_verifiable_dataset(tmp_path):
    """Test a full forge run on tiny worlds."""
    config = create_small_config()
    manifest = await async_forge(config, tmp_path)
    assert [r.agent_id for r in manifest.records] == [
        "agent-0000",
        "agent-0001",
        "agent-0002",
    ]
    assert all(r.ok for r in manifest.records)
    assert all(0.0 <= r.zeta <= 1.0 for r in manifest.records)
    assert all((tmp_path / r.weights_path).is_file() for r in manifest.records)
    assert manifest.labels().shape == (3,)
    assert manifest.snapshots()[0].shapes == ((147, 8), (8, 8), (8, 7))
    loaded = verify_manifest(tmp_path / MANIFEST_FILE)
    assert loaded == manifest


def test_forge_is_reproducible(tmp_path):
    """Test that rerunning a forge gives identical records apart from timing."""
    config = create_small_config(n_agents=2)
    first = forge(config, tmp_path / "first")
    second = forge(config, tmp_path / "second")
    assert without_wall_clock(first.records) == without_wall_clock(second.records)
    assert first.records[0].init_seed != first.records[1].init_seed


def test_worker_count_does_not_change_the_dataset(tmp_path):
    """Test that one and two workers forge identical manifests and records."""
    single = forge(create_small_config(n_agents=2, workers=1), tmp_path / "single")
    double = forge(create_small_config(n_agents=2, workers=2), tmp_path / "double")
    assert without_wall_clock(single.records) == without_wall_clock(double.records)
    assert "workers" not in single.config.to_dict()
    assert single.config.to_dict() == double.config.to_dict()

    def saved(directory):
        data = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
        for record in data["records"]:
            record["wall_clock"] = 0.0
        return data

    assert saved(tmp_path / "single") == saved(tmp_path / "double")


@pytest.mark.asyncio
async def test_verify_detects_missing_and_altered_weights(tmp_path):
    """Test that verification catches removed or changed weight files."""
    manifest = await async_forge(create_small_config(n_agents=2), tmp_path)
    weights = tmp_path / manifest.records[1].weights_path
    weights.write_bytes(weights.read_bytes() + b"\0")
    with pytest.raises(HashMismatch):
        verify_manifest(tmp_path / MANIFEST_FILE)
    weights.unlink()
    with pytest.raises(MissingWeights):
        verify_manifest(tmp_path / MANIFEST_FILE)


@pytest.mark.asyncio
async def test_verify_detects_bad_labels_and_versions(tmp_path):
    """Test that invalid labels and unknown versions raise ManifestError."""
    await async_forge(create_small_config(n_agents=1), tmp_path)
    path = tmp_path / MANIFEST_FILE
    data = json.loads(path.read_text(encoding="utf-8"))
    data["records"][0]["zeta"] = 1.5
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ManifestError):
        verify_manifest(path)
    data["format_version"] = 99
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ManifestError):
        DatasetManifest.load(path)
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError):
        DatasetManifest.load(path)


@pytest.mark.asyncio
async def test_executor_is_shut_down(tmp_path):
    """Test that the worker pool is shut down after a forge."""
    mock_executor = create_mock_executor()
    with patch("aiogenrl.forge.ThreadPoolExecutor", return_value=mock_executor), patch(
        "aiogenrl.forge.forge_agent", side_effect=create_mock_record
    ):
        manifest = await async_forge(create_small_config(), tmp_path)
    assert len(manifest.records) == 3
    assert mock_executor.submit.call_count == 3
    mock_executor.shutdown.assert_called_once_with(wait=True)


@pytest.mark.asyncio
async def test_executor_is_shut_down_on_error(tmp_path):
    """Test that the worker pool is shut down when a task raises."""
    mock_executor = create_mock_executor()
    with patch("aiogenrl.forge.ThreadPoolExecutor", return_value=mock_executor), patch(
        "aiogenrl.forge.forge_agent", side_effect=OSError("disk full")
    ):
        with pytest.raises(OSError):
            await async_forge(create_small_config(), tmp_path)
    mock_executor.shutdown.assert_called_once_with(wait=True)
    assert not (tmp_path / MANIFEST_FILE).exists()


def test_make_executor_picks_pool_by_worker_count():
    """Test that one worker uses a thread and more use processes."""
    single = make_executor(1)
    multi = make_executor(2)
    try:
        assert isinstance(single, ThreadPoolExecutor)
        assert isinstance(multi, ProcessPoolExecutor)
    finally:
        single.shutdown(wait=True)
        multi.shutdown(wait=True)
