"""Tests for the generalization predictors."""

import csv
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from aiogenrl.errors import InvalidConfig, MaskMismatch, TooFewSamples
from aiogenrl.features import (
    FeatureMask,
    WeightSnapshot,
    build_weight_image,
    feature_matrix,
    select_features,
)
from aiogenrl.nn import numerical_gradient, relative_error
from aiogenrl.predictor import (
    PredictorArtifact,
    PredictorHyper,
    PredictorKind,
    Standardizer,
    evaluate_predictor,
    gen_score_with_gradient,
    predict,
    score_predictions,
    split_indices,
    train_cnn,
    train_dnn,
)
from aiogenrl.seeding import make_rng

SMALL_SHAPES = ((5, 4), (4, 3))


def create_mock_dataset(n=30, seed=0, shapes=SMALL_SHAPES):
    """Create snapshots whose label follows the mean of their first layer."""
    rng = make_rng(seed)
    snapshots = [
        WeightSnapshot(
            [rng.normal(loc=rng.uniform(-0.2, 0.2), scale=0.1, size=s) for s in shapes],
            f"agent-{i:04d}",
        )
        for i in range(n)
    ]
    signal = np.array([0.5 + 2.0 * s.matrices[0].mean() for s in snapshots])
    labels = signal + rng.normal(scale=0.01, size=n)
    return snapshots, labels


def create_mock_artifact(epochs=50, n=30, seed=0):
    """Train a small dense predictor on the mock dataset."""
    snapshots, labels = create_mock_dataset(n, seed)
    features = feature_matrix(snapshots)
    mask = select_features(features, labels, 0.0)
    hyper = PredictorHyper(epochs=epochs, min_samples=5)
    ids = [s.agent_id for s in snapshots]
    artifact = train_dnn(features, labels, mask, hyper, ids, SMALL_SHAPES)
    return artifact, snapshots, labels


def full_mask(n):
    """Return a mask selecting all of ``n`` features."""
    names = [f"f{i}" for i in range(n)]
    return FeatureMask(np.ones(n, dtype=bool), 0.0, np.zeros(n), names)


def test_dense_predictor_fits_linear_target():
    """Test that the dense predictor recovers a linear target on held-out rows."""
    rng = make_rng(1)
    features = rng.normal(size=(120, 3))
    labels = features @ np.array([0.3, -0.2, 0.1]) + 0.5
    hyper = PredictorHyper(epochs=300, learning_rate=3e-3)
    artifact = train_dnn(features, labels, full_mask(3), hyper)
    assert artifact.metadata["test_pearson"] >= 0.95
    test = np.array([int(i) for i in artifact.metadata["test_ids"]])
    inputs = artifact.standardizer.transform(features[test])
    preds = artifact.network.forward(inputs).reshape(-1)
    report = score_predictions([str(i) for i in test], labels[test], preds)
    assert report.r2 >= 0.9


def test_dense_predictor_fits_constant_target():
    """Test that a constant target is learned with a full-batch fit."""
    features = make_rng(2).normal(size=(40, 2))
    labels = np.full(40, 0.25)
    hyper = PredictorHyper(epochs=3000, batch_size=40, test_fraction=0.0)
    artifact = train_dnn(features, labels, full_mask(2), hyper)
    standardized = artifact.standardizer.transform(features)
    preds = artifact.network.forward(standardized).reshape(-1)
    assert np.max(np.abs(preds - 0.25)) < 1e-3
    assert artifact.metadata["train_pearson"] is None
    assert artifact.metadata["test_ids"] == []


def test_training_is_deterministic():
    """Test that the same data and hyperparameters give the same parameters."""
    first, _, _ = create_mock_artifact()
    second, _, _ = create_mock_artifact()
    assert first.fingerprint() == second.fingerprint()
    assert first.metadata["train_ids"] == second.metadata["train_ids"]


def test_too_few_samples_raises():
    """Test that an undersized training split raises TooFewSamples."""
    features = make_rng(0).normal(size=(10, 3))
    with pytest.raises(TooFewSamples):
        train_dnn(features, np.arange(10.0), full_mask(3))


def test_min_samples_counts_before_the_split():
    """Test that ``min_samples`` pairs suffice although the split holds some out."""
    rng = make_rng(4)
    features = rng.normal(size=(20, 3))
    hyper = PredictorHyper(epochs=2)
    artifact = train_dnn(features, features[:, 0], full_mask(3), hyper)
    assert len(artifact.metadata["train_ids"]) == 16
    assert len(artifact.metadata["test_ids"]) == 4


def test_split_indices_partition():
    """Test that splits are disjoint, cover every index and repeat per seed."""
    train, test = split_indices(50, 0.2, 7)
    assert test.size == 10
    assert sorted(train.tolist() + test.tolist()) == list(range(50))
    again_train, again_test = split_indices(50, 0.2, 7)
    assert np.array_equal(train, again_train) and np.array_equal(test, again_test)
    train, test = split_indices(5, 0.0, 7)
    assert train.tolist() == [0, 1, 2, 3, 4] and test.size == 0


def test_standardizer_handles_constant_columns():
    """Test that constant columns get unit scale."""
    x = np.array([[1.0, 3.0], [3.0, 3.0]])
    standardizer = Standardizer.fit(x)
    assert standardizer.std.tolist() == [1.0, 1.0]
    assert np.array_equal(standardizer.inverse(standardizer.transform(x)), x)


def test_hyper_validation_and_defaults():
    """Test hyperparameter checks and per-architecture epoch defaults."""
    with pytest.raises(InvalidConfig):
        PredictorHyper(batch_size=0)
    with pytest.raises(InvalidConfig):
        PredictorHyper(test_fraction=1.0)
    assert PredictorHyper().epochs_for(PredictorKind.DNN) == 500
    assert PredictorHyper().epochs_for(PredictorKind.CNN) == 100
    assert PredictorHyper(epochs=3).epochs_for(PredictorKind.CNN) == 3


def test_predict_is_pure_and_order_free():
    """Test that prediction neither mutates inputs nor depends on call order."""
    artifact, snapshots, _ = create_mock_artifact()
    before = [m.copy() for m in snapshots[0].matrices]
    fingerprint = artifact.fingerprint()
    forward = [predict(artifact, s) for s in snapshots]
    backward = [predict(artifact, s) for s in reversed(snapshots)][::-1]
    assert forward == backward
    assert all(np.array_equal(a, b) for a, b in zip(before, snapshots[0].matrices))
    assert artifact.fingerprint() == fingerprint


def test_mask_mismatch_raises():
    """Test that a mask that does not fit the network raises MaskMismatch."""
    artifact, snapshots, _ = create_mock_artifact()
    selected = artifact.mask.selected.copy()
    selected[np.flatnonzero(selected)[0]] = False
    mask = artifact.mask
    artifact.mask = FeatureMask(selected, 0.0, mask.scores, mask.names)
    with pytest.raises(MaskMismatch):
        predict(artifact, snapshots[0])


@pytest.mark.parametrize("seed", range(3))
def test_gen_score_gradient_matches_finite_differences(seed):
    """Test the score gradient with respect to the weights numerically."""
    artifact, _, _ = create_mock_artifact(seed=seed)
    snapshot = create_mock_dataset(1, seed=100 + seed)[0][0]
    score, grads = gen_score_with_gradient(artifact, snapshot)
    assert score == pytest.approx(predict(artifact, snapshot))
    for index, matrix in enumerate(snapshot.matrices):
        numeric = numerical_gradient(lambda: predict(artifact, snapshot), matrix)
        assert relative_error(grads.params[f"L{index + 1}"], numeric) < 1e-5


def test_zero_last_layer_gives_zero_score_and_gradient():
    """Test that a zeroed output layer scores zero with a zero gradient."""
    artifact, snapshots, _ = create_mock_artifact()
    last = artifact.network.layers[-1]
    last.W[...] = 0.0
    last.b[...] = 0.0
    score, grads = gen_score_with_gradient(artifact, snapshots[0])
    assert score == 0.0
    assert all(not g.any() for g in grads.params.values())


def test_scaling_output_layer_scales_score_and_gradient():
    """Test that doubling the output layer doubles the score and the gradient."""
    artifact, snapshots, _ = create_mock_artifact()
    score, grads = gen_score_with_gradient(artifact, snapshots[1])
    last = artifact.network.layers[-1]
    last.W *= 2.0
    last.b *= 2.0
    doubled, doubled_grads = gen_score_with_gradient(artifact, snapshots[1])
    assert doubled == pytest.approx(2.0 * score)
    for name, value in grads.params.items():
        assert np.allclose(doubled_grads.params[name], 2.0 * value)


def test_gen_score_leaves_predictor_frozen():
    """Test that scoring with gradients never changes the predictor."""
    artifact, snapshots, _ = create_mock_artifact()
    fingerprint = artifact.fingerprint()
    for snapshot in snapshots[:5]:
        gen_score_with_gradient(artifact, snapshot)
    assert artifact.fingerprint() == fingerprint


def test_cnn_trains_and_predicts():
    """Test the convolutional predictor on small weight images."""
    snapshots, labels = create_mock_dataset(24, seed=3, shapes=((6, 9),))
    images = [build_weight_image(s, 9) for s in snapshots]
    hyper = PredictorHyper(epochs=3, min_samples=5)
    ids = [s.agent_id for s in snapshots]
    artifact = train_cnn(images, labels, hyper, ids, ((6, 9),))
    assert artifact.kind == PredictorKind.CNN
    assert artifact.image_width == 9
    value = predict(artifact, snapshots[0])
    assert np.isfinite(value)
    again = train_cnn(images, labels, hyper, [s.agent_id for s in snapshots], ((6, 9),))
    assert again.fingerprint() == artifact.fingerprint()
    with pytest.raises(InvalidConfig):
        gen_score_with_gradient(artifact, snapshots[0])


@pytest.mark.parametrize("kind", list(PredictorKind))
def test_artifact_save_and_load(tmp_path, kind):
    """Test that artifacts survive their directory form."""
    if kind == PredictorKind.DNN:
        artifact, snapshots, _ = create_mock_artifact()
    else:
        snapshots, labels = create_mock_dataset(24, seed=3, shapes=((6, 9),))
        images = [build_weight_image(s, 9) for s in snapshots]
        artifact = train_cnn(images, labels, PredictorHyper(epochs=2, min_samples=5))
    artifact.save(tmp_path / "predictor")
    loaded = PredictorArtifact.load(tmp_path / "predictor")
    assert loaded.kind == kind
    assert loaded.fingerprint() == artifact.fingerprint()
    assert predict(loaded, snapshots[2]) == predict(artifact, snapshots[2])
    assert loaded.metadata["train_ids"] == artifact.metadata["train_ids"]


def test_report_metrics_for_perfect_predictions(tmp_path):
    """Test report metrics when predictions equal the labels."""
    report = score_predictions(["a", "b", "c"], [0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert report.pearson == pytest.approx(1.0)
    assert report.mse == 0.0
    assert report.r2 == 1.0
    assert report.grade == "very strong"
    assert report.proper_signal
    report.write_csv(tmp_path / "predictions.csv")
    with open(tmp_path / "predictions.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["agent_id"] for r in rows] == ["a", "b", "c"]
    assert report.to_dict()["n"] == 3


def test_evaluate_predictor_tracks_disjointness():
    """Test that evaluation reports whether the agents were held out."""
    artifact, snapshots, labels = create_mock_artifact()
    by_id = {s.agent_id: (s, y) for s, y in zip(snapshots, labels)}
    held_out = [by_id[i] for i in artifact.metadata["test_ids"]]
    trained = [by_id[i] for i in artifact.metadata["train_ids"]]
    snaps, ys = zip(*held_out)
    report = evaluate_predictor(artifact, list(snaps), list(ys))
    assert report.disjoint is True
    assert len(report.rows) == len(held_out)
    snaps, ys = zip(*trained)
    report = evaluate_predictor(artifact, list(snaps), list(ys))
    assert report.disjoint is False


def create_mean_pixel_images(n, seed=0, size=8):
    """Create nearly flat images whose label is their mean pixel."""
    rng = make_rng(seed)
    base = rng.uniform(0.1, 0.9, size=(n, 1, 1))
    images = base + rng.uniform(-0.05, 0.05, size=(n, size, size))
    return list(images), images.mean(axis=(1, 2))


def test_cnn_learns_mean_pixel():
    """Test that the convolutional predictor learns the mean pixel of unseen images."""
    images, labels = create_mean_pixel_images(80, seed=5)
    hyper = PredictorHyper(epochs=300, learning_rate=3e-3)
    artifact = train_cnn(images, labels, hyper)
    test = np.array([int(i) for i in artifact.metadata["test_ids"]])
    assert test.size == 16
    preds = artifact.network.forward(np.stack(images)[test][:, None]).reshape(-1)
    report = score_predictions([str(i) for i in test], labels[test], preds)
    assert report.r2 >= 0.9


def test_cnn_fits_constant_target():
    """Test that a full-batch convolutional fit matches a constant label."""
    images = list(make_rng(6).uniform(size=(12, 8, 8)))
    hyper = PredictorHyper(epochs=2000, batch_size=12, test_fraction=0.0, min_samples=5)
    artifact = train_cnn(images, np.full(12, 0.25), hyper)
    preds = artifact.network.forward(np.stack(images)[:, None]).reshape(-1)
    assert np.max(np.abs(preds - 0.25)) < 1e-3


def test_evaluate_predictor_with_offset_predictions():
    """Test that a constant offset keeps a perfect correlation at its squared error."""
    artifact, snapshots, labels = create_mock_artifact()
    by_id = dict(zip((s.agent_id for s in snapshots), labels))

    def shifted(_, snapshot):
        return by_id[snapshot.agent_id] + 0.25

    with patch("aiogenrl.predictor.predict", side_effect=shifted):
        report = evaluate_predictor(artifact, snapshots, labels)
    assert report.pearson == pytest.approx(1.0)
    assert report.mse == pytest.approx(0.0625)
    assert [row[2] for row in report.rows] == pytest.approx(list(labels + 0.25))


def test_evaluate_predictor_with_unrelated_predictions():
    """Test that random predictions against random labels show no correlation."""
    rng = make_rng(7)
    snapshots = [WeightSnapshot([np.zeros((1, 1))], f"x-{i}") for i in range(1000)]
    labels = rng.uniform(size=1000)
    predictions = iter(rng.uniform(size=1000))
    artifact = MagicMock(metadata={})
    with patch("aiogenrl.predictor.predict", side_effect=lambda *_: next(predictions)):
        report = evaluate_predictor(artifact, snapshots, labels)
    assert abs(report.pearson) < 0.1
    assert report.disjoint is None
    assert not report.proper_signal
