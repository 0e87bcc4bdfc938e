"""Scaled-down experimental reproductions.

These train hundreds of agents and take hours of CPU; they only run with
``pytest -m slow``.
"""

import numpy as np
import pytest

from aiogenrl.const import ARM_STANDARD, ARM_UPGRADED
from aiogenrl.env import GridSpec, generate
from aiogenrl.features import build_weight_image, feature_matrix, select_features
from aiogenrl.forge import ForgeConfig, forge
from aiogenrl.harness import CompareConfig, compare
from aiogenrl.ppo import PpoConfig, PpoTrainer
from aiogenrl.predictor import (
    PredictorHyper,
    evaluate_predictor,
    split_indices,
    train_cnn,
    train_dnn,
)

PINNED_SEEDS = [0, 1, 2]
# Per seed, the four pools select disjoint layouts out of the 588 crossings.
FORGE_TRAIN_SEED_BASES = {0: 0, 1: 540, 2: 500}
COMPARE_TRAIN_SEED_BASES = {0: 500_000, 1: 500_120, 2: 500_500}
STEP_TIERS = (5_000, 20_000, 50_000, 100_000)

pytestmark = pytest.mark.slow


def create_forge_config(seed):
    """Return the forge config of one pinned seed."""
    return ForgeConfig(
        n_agents=200,
        step_tiers=STEP_TIERS,
        train_seed_base=FORGE_TRAIN_SEED_BASES[seed],
        workers=4,
    )


@pytest.fixture(scope="module", params=PINNED_SEEDS)
def dataset(request, tmp_path_factory):
    """Forge 200 agents with mixed budgets under one pinned seed."""
    seed = request.param
    out_dir = tmp_path_factory.mktemp(f"forge-{seed}")
    manifest = forge(create_forge_config(seed), out_dir)
    return seed, manifest.snapshots(), manifest.labels()


def test_standard_trainer_learns_the_crossing():
    """Test that 200k steps of plain PPO solve the default crossing world."""
    trainer = PpoTrainer(generate(GridSpec(seed=0)), PpoConfig(seed=0))
    result = trainer.train(200_000)
    final = result.log[-1]
    assert final.step == 200_000
    assert final.train_mean_reward is not None
    assert final.train_mean_reward > 0.7


def held_out(artifact, snapshots, labels):
    """Evaluate an artifact on the agents it never trained on."""
    test_ids = set(artifact.metadata["test_ids"])
    keep = [i for i, s in enumerate(snapshots) if s.agent_id in test_ids]
    return evaluate_predictor(artifact, [snapshots[i] for i in keep], labels[keep])


def test_score_spread(dataset):
    """Test that the population spans poor and good generalizers."""
    _, _, labels = dataset
    assert labels.min() < 0.1
    assert labels.max() > 0.5


def test_dense_predictor_fidelity(dataset):
    """Test that the dense predictor reaches a strong held-out correlation."""
    seed, snapshots, labels = dataset
    hyper = PredictorHyper(seed=seed)
    features = feature_matrix(snapshots)
    train, test = split_indices(len(snapshots), hyper.test_fraction, hyper.seed)
    assert (train.size, test.size) == (160, 40)
    mask = select_features(features[train], labels[train])
    ids = [s.agent_id for s in snapshots]
    artifact = train_dnn(features, labels, mask, hyper, ids, snapshots[0].shapes)
    report = held_out(artifact, snapshots, labels)
    assert report.disjoint
    assert report.pearson >= 0.5


def test_image_predictor_sanity(dataset):
    """Test that the convolutional predictor carries a usable signal."""
    seed, snapshots, labels = dataset
    images = [build_weight_image(s) for s in snapshots]
    ids = [s.agent_id for s in snapshots]
    artifact = train_cnn(images, labels, PredictorHyper(seed=seed), ids)
    report = held_out(artifact, snapshots, labels)
    assert report.pearson >= 0.4


def test_upgraded_training_generalizes_better(dataset):
    """Test that the upgraded arm ends ahead of the standard arm."""
    seed, snapshots, labels = dataset
    hyper = PredictorHyper(seed=seed)
    features = feature_matrix(snapshots)
    train, _ = split_indices(len(snapshots), hyper.test_fraction, hyper.seed)
    mask = select_features(features[train], labels[train])
    ids = [s.agent_id for s in snapshots]
    artifact = train_dnn(features, labels, mask, hyper, ids, snapshots[0].shapes)
    config = CompareConfig(train_seed_base=COMPARE_TRAIN_SEED_BASES[seed], workers=4)
    config.check_seed_hygiene(create_forge_config(seed))
    result = compare(config, artifact)
    final_step = max(p.step for p in result.points)
    final = {p.arm: p.mean_zeta for p in result.points if p.step == final_step}
    assert final[ARM_UPGRADED] >= final[ARM_STANDARD]
    assert result.sign_test.wins >= 6
    assert np.isfinite(result.sign_test.p_value)
