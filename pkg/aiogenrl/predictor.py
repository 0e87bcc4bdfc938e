"""Define the generalization predictors that score an agent from its weights."""
import csv
from dataclasses import asdict, dataclass, field
from enum import Enum
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .const import (
    ARTIFACT_META_FILE,
    ARTIFACT_PARAMS_FILE,
    CNN_CHANNELS,
    CNN_POOL_GRID,
    DEFAULT_CNN_EPOCHS,
    DEFAULT_MIN_SAMPLES,
    DEFAULT_PREDICTOR_BATCH_SIZE,
    DEFAULT_PREDICTOR_EPOCHS,
    DEFAULT_PREDICTOR_LR,
    DEFAULT_TEST_FRACTION,
    HIDDEN_SIZE,
    IMAGE_WIDTH,
)
from .errors import (
    InvalidConfig,
    MaskMismatch,
    ShapeMismatch,
    TooFewSamples,
    ZeroVariance,
)
from .features import (
    FeatureMask,
    WeightSnapshot,
    build_weight_image,
    decode_matrices,
    encode_matrices,
    extract_stats,
    grade_pearson,
    is_proper_signal,
    pearson,
    stats_vjp,
)
from .nn import (
    Activation,
    Adam,
    AdaptiveMeanPool,
    ConvLayer,
    DenseLayer,
    Flatten,
    GradientSet,
    Sequential,
    Tape,
    mlp,
)
from .seeding import SALT_INIT, SALT_MINIBATCH, SALT_SPLIT, child_rng

_LOGGER = logging.getLogger(__name__)


class PredictorKind(str, Enum):
    """Predictor architectures."""

    DNN = "dnn"
    CNN = "cnn"


@dataclass
class Standardizer:
    """Per-feature affine standardization fitted on the training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        """Fit to the rows of ``x``; zero deviations are replaced by 1."""
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0.0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        return cls(
            np.array(data["mean"], dtype=np.float64),
            np.array(data["std"], dtype=np.float64),
        )


@dataclass
class PredictorHyper:
    """Training hyperparameters of a predictor.

    ``epochs`` of ``None`` selects the architecture's default.
    """

    epochs: Optional[int] = None
    batch_size: int = DEFAULT_PREDICTOR_BATCH_SIZE
    learning_rate: float = DEFAULT_PREDICTOR_LR
    seed: int = 0
    test_fraction: float = DEFAULT_TEST_FRACTION
    min_samples: int = DEFAULT_MIN_SAMPLES

    def __post_init__(self) -> None:
        if self.epochs is not None and self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InvalidConfig(
                f"test_fraction must be in [0, 1), got {self.test_fraction}"
            )
        if self.min_samples < 1:
            raise InvalidConfig(f"min_samples must be >= 1, got {self.min_samples}")

    def epochs_for(self, kind: PredictorKind) -> int:
        if self.epochs is not None:
            return self.epochs
        if kind == PredictorKind.DNN:
            return DEFAULT_PREDICTOR_EPOCHS
        return DEFAULT_CNN_EPOCHS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PredictorHyper":
        return cls(**data)


def build_dnn(n_inputs: int, rng: np.random.Generator) -> Sequential:
    """Build the dense regressor over the selected statistics."""
    return mlp(
        [n_inputs, HIDDEN_SIZE, HIDDEN_SIZE, 1],
        [Activation.RELU, Activation.RELU, Activation.IDENTITY],
        rng,
    )


def build_cnn(rng: np.random.Generator) -> Sequential:
    """Build the convolutional regressor over the weight image."""
    pooled = CNN_CHANNELS * CNN_POOL_GRID[0] * CNN_POOL_GRID[1]
    return Sequential(
        [
            ConvLayer.create(1, CNN_CHANNELS, 3, Activation.RELU, rng),
            ConvLayer.create(CNN_CHANNELS, CNN_CHANNELS, 3, Activation.RELU, rng),
            AdaptiveMeanPool(CNN_POOL_GRID),
            Flatten(),
            DenseLayer.create(pooled, HIDDEN_SIZE, Activation.RELU, rng),
            DenseLayer.create(HIDDEN_SIZE, 1, Activation.IDENTITY, rng),
        ]
    )


def _as_matrix(value: np.ndarray) -> np.ndarray:
    if value.ndim == 1:
        return value.reshape(1, -1)
    return value.reshape(value.shape[0], -1)


def _as_shapes(shapes: Optional[Sequence]) -> Optional[tuple[tuple[int, int], ...]]:
    return None if shapes is None else tuple(tuple(s) for s in shapes)


@dataclass
class PredictorArtifact:
    """A trained predictor with everything needed to score a snapshot."""

    kind: PredictorKind
    network: Sequential
    mask: Optional[FeatureMask] = None
    standardizer: Optional[Standardizer] = None
    layer_shapes: Optional[tuple[tuple[int, int], ...]] = None
    image_width: int = IMAGE_WIDTH
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        """Return the DNN input size."""
        return self.network.layers[0].W.shape[1]

    def check_mask(self) -> None:
        """Check that the mask fits the network input.

        :raises MaskMismatch: If it does not
        """
        if self.kind != PredictorKind.DNN:
            return
        if self.mask is None or self.standardizer is None:
            raise MaskMismatch("A dense predictor needs a mask and a standardizer")
        expected = self.n_inputs
        if self.mask.count != expected or self.standardizer.mean.size != expected:
            raise MaskMismatch(
                f"Mask selects {self.mask.count} features, predictor expects {expected}"
            )

    def inputs_for(self, snapshot: WeightSnapshot) -> np.ndarray:
        """Return the network input derived from ``snapshot``.

        :raises ShapeMismatch: If the snapshot has the wrong shapes
        """
        if self.layer_shapes is not None:
            snapshot.validate(self.layer_shapes)
        if self.kind == PredictorKind.DNN:
            self.check_mask()
            return self.standardizer.transform(self.mask.apply(extract_stats(snapshot)))
        return build_weight_image(snapshot, self.image_width)[None]

    def parameter_matrices(self) -> list[np.ndarray]:
        return [_as_matrix(value) for value in self.network.parameters().values()]

    def fingerprint(self) -> str:
        """Return the SHA-256 of the parameter bytes."""
        return hashlib.sha256(encode_matrices(self.parameter_matrices())).hexdigest()

    def save(self, directory: Union[str, Path]) -> None:
        """Write the artifact directory."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        params = encode_matrices(self.parameter_matrices())
        (directory / ARTIFACT_PARAMS_FILE).write_bytes(params)
        dense = self.kind == PredictorKind.DNN
        standardizer = self.standardizer
        shapes = self.layer_shapes
        meta = {
            "kind": self.kind.value,
            "n_inputs": self.n_inputs if dense else None,
            "mask": None if self.mask is None else self.mask.to_dict(),
            "standardizer": None if standardizer is None else standardizer.to_dict(),
            "layer_shapes": None if shapes is None else [list(s) for s in shapes],
            "image_width": self.image_width,
            "fingerprint": self.fingerprint(),
            "metadata": self.metadata,
        }
        text = json.dumps(meta, indent=2, sort_keys=True)
        (directory / ARTIFACT_META_FILE).write_text(text, encoding="utf-8")
        _LOGGER.info("Saved %s predictor to %s", self.kind.value, directory)

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PredictorArtifact":
        """Read an artifact directory.

        :raises ShapeMismatch: If the parameters do not fit the architecture
        """
        directory = Path(directory)
        meta = json.loads((directory / ARTIFACT_META_FILE).read_text(encoding="utf-8"))
        kind = PredictorKind(meta["kind"])
        rng = child_rng(0, SALT_INIT)
        if kind == PredictorKind.DNN:
            network = build_dnn(meta["n_inputs"], rng)
        else:
            network = build_cnn(rng)
        own = network.parameters()
        stored = decode_matrices((directory / ARTIFACT_PARAMS_FILE).read_bytes())
        if len(stored) != len(own):
            raise ShapeMismatch(
                f"Artifact stores {len(stored)} tensors, architecture has {len(own)}"
            )
        network.load_parameters(
            {
                name: matrix.reshape(value.shape)
                for (name, value), matrix in zip(own.items(), stored)
            }
        )
        mask = meta["mask"]
        scaler = meta["standardizer"]
        return cls(
            kind=kind,
            network=network,
            mask=None if mask is None else FeatureMask.from_dict(mask),
            standardizer=None if scaler is None else Standardizer.from_dict(scaler),
            layer_shapes=_as_shapes(meta["layer_shapes"]),
            image_width=meta["image_width"],
            metadata=meta["metadata"],
        )


def split_indices(
    n: int, test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``range(n)`` into sorted train and test indices."""
    if test_fraction <= 0.0:
        return np.arange(n), np.arange(0)
    order = child_rng(seed, SALT_SPLIT).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _fit(
    network: Sequential,
    inputs: np.ndarray,
    targets: np.ndarray,
    hyper: PredictorHyper,
    epochs: int,
) -> float:
    optimizer = Adam(network.parameters(), hyper.learning_rate)
    rng = child_rng(hyper.seed, SALT_MINIBATCH)
    n = inputs.shape[0]
    loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            tape = Tape()
            error = network.forward(inputs[batch], tape).reshape(-1) - targets[batch]
            total += float(np.sum(error * error))
            grads = network.backward(tape, (2.0 * error / batch.size)[:, None])
            optimizer.step(grads.params)
        loss = total / n
        if epoch % 50 == 0 or epoch == epochs - 1:
            _LOGGER.debug("Epoch %s/%s: mse=%.6f", epoch + 1, epochs, loss)
    return loss


def _safe_pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    try:
        return pearson(x, y)
    except (ZeroVariance, ShapeMismatch):
        return None


def _train(
    kind: PredictorKind,
    network: Sequential,
    inputs: np.ndarray,
    labels: np.ndarray,
    train: np.ndarray,
    test: np.ndarray,
    ids: list[str],
    hyper: PredictorHyper,
) -> tuple[float, dict[str, Any]]:
    epochs = hyper.epochs_for(kind)
    _LOGGER.info(
        "Training %s predictor on %s agents for %s epochs",
        kind.value,
        train.size,
        epochs,
    )
    loss = _fit(network, inputs[train], labels[train], hyper, epochs)
    train_pred = network.forward(inputs[train]).reshape(-1)
    test_pred = network.forward(inputs[test]).reshape(-1) if test.size else np.zeros(0)
    metadata = {
        "hyper": hyper.to_dict(),
        "epochs": epochs,
        "final_train_mse": loss,
        "train_ids": [ids[i] for i in train],
        "test_ids": [ids[i] for i in test],
        "train_pearson": _safe_pearson(train_pred, labels[train]),
        "test_pearson": _safe_pearson(test_pred, labels[test]),
    }
    if metadata["test_pearson"] is None and test.size:
        _LOGGER.warning(
            "Held-out Pearson is undefined for this %s predictor", kind.value
        )
    return loss, metadata


def _prepare(
    labels: Sequence[float],
    agent_ids: Optional[Sequence[str]],
    hyper: PredictorHyper,
) -> tuple:
    labels = np.asarray(labels, dtype=np.float64)
    ids = [str(i) for i in range(labels.size)] if agent_ids is None else list(agent_ids)
    if len(ids) != labels.size:
        raise ShapeMismatch(f"{len(ids)} agent ids for {labels.size} labels")
    if labels.size < hyper.min_samples:
        raise TooFewSamples(
            f"{labels.size} samples, at least {hyper.min_samples} required"
        )
    train, test = split_indices(labels.size, hyper.test_fraction, hyper.seed)
    if train.size == 0:
        raise TooFewSamples(f"No training samples left after holding out {test.size}")
    return labels, ids, train, test


def train_dnn(
    features: np.ndarray,
    labels: Sequence[float],
    mask: FeatureMask,
    hyper: Optional[PredictorHyper] = None,
    agent_ids: Optional[Sequence[str]] = None,
    layer_shapes: Optional[Sequence[tuple[int, int]]] = None,
) -> PredictorArtifact:
    """Train the dense predictor on the masked statistics.

    :param features: Full feature matrix, one row per agent
    :type features: ``numpy.ndarray``
    :param labels: Generalization scores
    :type labels: sequence of ``float``
    :param mask: Features to feed the network
    :type mask: :class:`FeatureMask`
    :raises TooFewSamples: If there are fewer than ``min_samples`` pairs
    :rtype: :class:`PredictorArtifact`
    """
    hyper = hyper or PredictorHyper()
    labels, ids, train, test = _prepare(labels, agent_ids, hyper)
    masked = mask.apply(np.asarray(features, dtype=np.float64))
    standardizer = Standardizer.fit(masked[train])
    network = build_dnn(mask.count, child_rng(hyper.seed, SALT_INIT))
    inputs = standardizer.transform(masked)
    _, metadata = _train(
        PredictorKind.DNN, network, inputs, labels, train, test, ids, hyper
    )
    return PredictorArtifact(
        kind=PredictorKind.DNN,
        network=network,
        mask=mask,
        standardizer=standardizer,
        layer_shapes=_as_shapes(layer_shapes),
        metadata=metadata,
    )


def train_cnn(
    images: Sequence[np.ndarray],
    labels: Sequence[float],
    hyper: Optional[PredictorHyper] = None,
    agent_ids: Optional[Sequence[str]] = None,
    layer_shapes: Optional[Sequence[tuple[int, int]]] = None,
) -> PredictorArtifact:
    """Train the convolutional predictor on weight images of equal shape.

    :raises TooFewSamples: If there are fewer than ``min_samples`` pairs
    :rtype: :class:`PredictorArtifact`
    """
    hyper = hyper or PredictorHyper()
    labels, ids, train, test = _prepare(labels, agent_ids, hyper)
    inputs = np.stack([np.asarray(image, dtype=np.float64) for image in images])
    inputs = inputs[:, None]
    network = build_cnn(child_rng(hyper.seed, SALT_INIT))
    _, metadata = _train(
        PredictorKind.CNN, network, inputs, labels, train, test, ids, hyper
    )
    return PredictorArtifact(
        kind=PredictorKind.CNN,
        network=network,
        layer_shapes=_as_shapes(layer_shapes),
        image_width=inputs.shape[-1],
        metadata=metadata,
    )


def predict(artifact: PredictorArtifact, snapshot: WeightSnapshot) -> float:
    """Return the predicted generalization score of ``snapshot``.

    :raises ShapeMismatch: If the snapshot does not fit the artifact
    :rtype: ``float``
    """
    inputs = artifact.inputs_for(snapshot)
    return float(artifact.network.forward(inputs[None]).reshape(-1)[0])


def gen_score_with_gradient(
    artifact: PredictorArtifact, snapshot: WeightSnapshot
) -> tuple[float, GradientSet]:
    """Return the dense predictor's score and its gradient w.r.t. the weight matrices.

    The artifact is read only. Gradients are keyed ``L1``, ``L2``, ... in the
    orientation of ``snapshot.matrices``.

    :raises InvalidConfig: If the artifact is not a dense predictor
    :raises ShapeMismatch: If the snapshot does not fit the artifact
    """
    if artifact.kind != PredictorKind.DNN:
        raise InvalidConfig("Only dense predictors can score inside the training loop")
    inputs = artifact.inputs_for(snapshot)
    tape = Tape()
    score = float(artifact.network.forward(inputs, tape)[0])
    grads = artifact.network.backward(tape, np.ones(1))
    upstream = np.zeros(artifact.mask.selected.size)
    upstream[artifact.mask.selected] = grads.inputs / artifact.standardizer.std
    return score, stats_vjp(snapshot, upstream)


@dataclass
class PredictorReport:
    """Held-out metrics and the per-agent table behind them."""

    pearson: float
    mse: float
    r2: float
    grade: str
    proper_signal: bool
    disjoint: Optional[bool]
    rows: list[tuple[str, float, float]]

    def to_dict(self) -> dict:
        return {
            "pearson": self.pearson,
            "mse": self.mse,
            "r2": self.r2,
            "grade": self.grade,
            "proper_signal": self.proper_signal,
            "disjoint": self.disjoint,
            "n": len(self.rows),
        }

    def write_csv(self, path: Union[str, Path]) -> None:
        """Write ``agent_id,label,prediction`` rows."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["agent_id", "label", "prediction"])
            for agent_id, label, prediction in self.rows:
                writer.writerow([agent_id, repr(label), repr(prediction)])


def score_predictions(
    agent_ids: Sequence[str],
    labels: Sequence[float],
    predictions: Sequence[float],
    disjoint: Optional[bool] = None,
) -> PredictorReport:
    """Compute the report metrics for paired labels and predictions.

    :raises ZeroVariance: If labels or predictions are constant
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    r = pearson(p, y)
    residual = p - y
    mse = float(np.mean(residual * residual))
    r2 = 1.0 - float(np.sum(residual * residual)) / float(np.sum((y - y.mean()) ** 2))
    rows = [(str(a), float(yi), float(pi)) for a, yi, pi in zip(agent_ids, y, p)]
    return PredictorReport(
        r, mse, r2, grade_pearson(r), is_proper_signal(r), disjoint, rows
    )


def evaluate_predictor(
    artifact: PredictorArtifact,
    snapshots: Sequence[WeightSnapshot],
    labels: Sequence[float],
) -> PredictorReport:
    """Score ``snapshots`` and compare with ``labels``.

    ``disjoint`` in the report records whether none of the agents was in the
    artifact's training split; it is ``None`` when the artifact keeps no ids.
    """
    predictions = [predict(artifact, s) for s in snapshots]
    ids = [s.agent_id for s in snapshots]
    train_ids = artifact.metadata.get("train_ids")
    disjoint = None if train_ids is None else not set(ids) & set(train_ids)
    if disjoint is False:
        _LOGGER.warning("Evaluation set overlaps the predictor's training agents")
    report = score_predictions(ids, labels, predictions, disjoint)
    _LOGGER.info(
        "Predictor pearson=%.3f (%s), mse=%.5f",
        report.pearson,
        report.grade,
        report.mse,
    )
    return report
