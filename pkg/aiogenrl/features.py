"""Define weight snapshots, their statistical features and the weight file format."""
import csv
from dataclasses import dataclass, field
import logging
from math import ceil, floor
from pathlib import Path
import struct
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .const import (
    DEFAULT_SELECTION_THRESHOLD,
    IMAGE_WIDTH,
    PERCENTILES,
    POLICY_LAYER_SHAPES,
    PROPER_SIGNAL_PEARSON,
    STAT_NAMES,
    STATS_PER_LAYER,
    WEIGHT_FILE_MAGIC,
    WEIGHT_FILE_VERSION,
)
from .errors import (
    AllFiltered,
    BadMagic,
    EmptyInput,
    ShapeMismatch,
    TruncatedFile,
    VersionUnsupported,
    ZeroVariance,
)
from .nn import GradientSet

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHB")
_LAYER_HEADER = struct.Struct("<II")


def feature_names(n_layers: int = len(POLICY_LAYER_SHAPES)) -> list[str]:
    """Return the layer-major feature names ``L{layer}_{stat}``."""
    return [
        f"L{layer}_{stat}" for layer in range(1, n_layers + 1) for stat in STAT_NAMES
    ]


def column_names(n_columns: int) -> list[str]:
    """Return layer names for whole layers of statistics, else ``f{index}``."""
    if n_columns % STATS_PER_LAYER == 0:
        return feature_names(n_columns // STATS_PER_LAYER)
    return [f"f{i}" for i in range(n_columns)]


FEATURE_NAMES: list[str] = feature_names()


@dataclass
class WeightSnapshot:
    """The policy weight matrices of one agent, stored input-major (in x out)."""

    matrices: list[np.ndarray]
    agent_id: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_policy(
        cls, policy: Any, agent_id: str = "", **metadata: Any
    ) -> "WeightSnapshot":
        """Snapshot anything exposing ``weight_matrices()``."""
        matrices = [np.array(m, dtype=np.float64) for m in policy.weight_matrices()]
        return cls(matrices, agent_id, metadata)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        """Return the matrix shapes."""
        return tuple(tuple(m.shape) for m in self.matrices)

    def validate(self, shapes: Sequence[tuple[int, int]] = POLICY_LAYER_SHAPES) -> None:
        """Check the matrix shapes and finiteness.

        :raises ShapeMismatch: If the snapshot does not have ``shapes``
        """
        expected = tuple(tuple(s) for s in shapes)
        if self.shapes != expected:
            raise ShapeMismatch(
                f"Snapshot {self.agent_id!r} has shapes {self.shapes}, "
                f"expected {expected}"
            )
        if not all(np.all(np.isfinite(m)) for m in self.matrices):
            raise ShapeMismatch(f"Snapshot {self.agent_id!r} has non-finite weights")


@dataclass(frozen=True)
class LayerStats:
    """The seven summary statistics of one weight matrix."""

    mean: float
    var: float
    p0: float
    p25: float
    p50: float
    p75: float
    p100: float

    @classmethod
    def of(cls, matrix: np.ndarray) -> "LayerStats":
        """Summarise ``matrix`` with population variance and linear percentiles."""
        values = np.asarray(matrix, dtype=np.float64).reshape(-1)
        percentiles = np.percentile(values, PERCENTILES)
        return cls(
            float(values.mean()), float(values.var()), *(float(p) for p in percentiles)
        )

    def as_array(self) -> np.ndarray:
        """Return the statistics in feature order."""
        return np.array([getattr(self, name) for name in STAT_NAMES])


def extract_stats(snapshot: WeightSnapshot) -> np.ndarray:
    """Return the layer-major feature vector of ``snapshot``.

    :rtype: ``numpy.ndarray`` of length ``7 * len(snapshot.matrices)``
    """
    return np.concatenate([LayerStats.of(m).as_array() for m in snapshot.matrices])


def feature_matrix(snapshots: Iterable[WeightSnapshot]) -> np.ndarray:
    """Stack the feature vectors of several snapshots into rows.

    :raises EmptyInput: If there are no snapshots
    """
    rows = [extract_stats(s) for s in snapshots]
    if not rows:
        raise EmptyInput("No weight snapshots to extract features from")
    return np.vstack(rows)


def _order_index(values: np.ndarray, ordered: np.ndarray, rank: int) -> int:
    # Ties resolve to the lowest flat index holding the order statistic.
    return int(np.flatnonzero(values == ordered[rank])[0])


def layer_stats_vjp(matrix: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Return the vector-Jacobian product of the seven layer statistics."""
    values = np.asarray(matrix, dtype=np.float64).reshape(-1)
    n = values.size
    mean = values.mean()
    grad = np.full(n, upstream[0] / n)
    grad += upstream[1] * 2.0 * (values - mean) / n
    ordered = np.sort(values)
    for weight, q in zip(upstream[2:], PERCENTILES):
        if weight == 0.0:
            continue
        position = q / 100.0 * (n - 1)
        lower = floor(position)
        upper = min(lower + 1, n - 1)
        fraction = position - lower
        grad[_order_index(values, ordered, lower)] += weight * (1.0 - fraction)
        if fraction > 0.0:
            grad[_order_index(values, ordered, upper)] += weight * fraction
    return grad.reshape(np.shape(matrix))


def stats_vjp(snapshot: WeightSnapshot, upstream: np.ndarray) -> GradientSet:
    """Back-propagate ``upstream`` through :func:`extract_stats`.

    :param upstream: Gradient with respect to the feature vector
    :type upstream: ``numpy.ndarray``
    :return: Gradients keyed ``L1``, ``L2``, ... congruent with the matrices
    :rtype: :class:`GradientSet`
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = STATS_PER_LAYER * len(snapshot.matrices)
    if upstream.shape != (expected,):
        raise ShapeMismatch(
            f"Upstream gradient must have length {expected}, got {upstream.shape}"
        )
    per_layer = upstream.reshape(len(snapshot.matrices), STATS_PER_LAYER)
    return GradientSet(
        {
            f"L{index + 1}": layer_stats_vjp(matrix, per_layer[index])
            for index, matrix in enumerate(snapshot.matrices)
        }
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Return the sample Pearson correlation of ``x`` and ``y``.

    :raises ShapeMismatch: If lengths differ or are below two
    :raises ZeroVariance: If either input is constant
    :rtype: ``float``
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ShapeMismatch(
            "Pearson needs two equal vectors of length >= 2, "
            f"got {x.shape} and {y.shape}"
        )
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ZeroVariance("Pearson correlation is undefined for a constant input")
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.sum(dx * dy) / np.sqrt(np.sum(dx * dx) * np.sum(dy * dy)))
    return min(1.0, max(-1.0, r))


def grade_pearson(r: float) -> str:
    """Grade the magnitude of a correlation."""
    magnitude = abs(r)
    if magnitude >= 0.8:
        return "very strong"
    if magnitude >= 0.5:
        return "strong"
    if magnitude >= 0.3:
        return "moderate"
    if magnitude >= 0.1:
        return "weak"
    return "none"


def is_proper_signal(r: float) -> bool:
    """Return whether ``r`` is strong enough to train a predictor on."""
    return r > PROPER_SIGNAL_PEARSON


@dataclass
class FeatureMask:
    """Selected features with the threshold and the score of every feature."""

    selected: np.ndarray
    threshold: float
    scores: np.ndarray
    names: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))

    @property
    def indices(self) -> np.ndarray:
        """Return the indices of the selected features."""
        return np.flatnonzero(self.selected)

    @property
    def count(self) -> int:
        """Return the number of selected features."""
        return int(np.count_nonzero(self.selected))

    def selected_names(self) -> list[str]:
        """Return the names of the selected features."""
        return [self.names[i] for i in self.indices]

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Keep the selected columns of a vector or matrix."""
        features = np.asarray(features)
        if features.shape[-1] != self.selected.size:
            raise ShapeMismatch(
                f"Mask of {self.selected.size} features applied to {features.shape}"
            )
        return features[..., self.selected]

    def to_dict(self) -> dict:
        return {
            "selected": [bool(v) for v in self.selected],
            "threshold": self.threshold,
            "scores": [float(v) for v in self.scores],
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMask":
        return cls(
            np.array(data["selected"], dtype=bool),
            float(data["threshold"]),
            np.array(data["scores"], dtype=np.float64),
            list(data["names"]),
        )


def select_features(
    features: np.ndarray,
    labels: Sequence[float],
    threshold: float = DEFAULT_SELECTION_THRESHOLD,
    names: Optional[list[str]] = None,
) -> FeatureMask:
    """Select the features whose absolute Pearson score reaches ``threshold``.

    Constant columns score 0 and are never selected.

    :raises ShapeMismatch: If fewer than two rows are given
    :raises ZeroVariance: If the labels are constant
    :raises AllFiltered: If no feature passes
    :rtype: :class:`FeatureMask`
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2 or features.shape[0] != labels.size:
        raise ShapeMismatch(
            f"Need >= 2 rows matching {labels.size} labels, got {features.shape}"
        )
    if np.all(labels == labels[0]):
        raise ZeroVariance("Labels are constant")
    n_columns = features.shape[1]
    if names is None:
        names = column_names(n_columns)
    elif len(names) != n_columns:
        raise ShapeMismatch(f"{len(names)} names for {n_columns} features")

    scores = np.zeros(n_columns)
    constant = np.zeros(n_columns, dtype=bool)
    for column in range(n_columns):
        try:
            scores[column] = pearson(features[:, column], labels)
        except ZeroVariance:
            constant[column] = True
    selected = (np.abs(scores) >= threshold) & ~constant
    if not selected.any():
        raise AllFiltered(f"No feature reaches |pearson| >= {threshold}")
    _LOGGER.debug(
        "Selected %s of %s features at threshold %s",
        selected.sum(),
        selected.size,
        threshold,
    )
    return FeatureMask(selected, float(threshold), scores, list(names))


def image_rows(shapes: Sequence[tuple[int, int]], width: int = IMAGE_WIDTH) -> int:
    """Return the number of rows of the weight image for ``shapes``."""
    return ceil(sum(r * c for r, c in shapes) / width)


def build_weight_image(
    snapshot: WeightSnapshot, width: int = IMAGE_WIDTH
) -> np.ndarray:
    """Concatenate and min-max normalise all weights into a ``width``-wide image.

    All-equal weights map to 0.5. The tail after the last weight is zero.
    """
    flat = np.concatenate(
        [np.asarray(m, dtype=np.float64).reshape(-1) for m in snapshot.matrices]
    )
    low, high = flat.min(), flat.max()
    if high == low:
        normalized = np.full_like(flat, 0.5)
    else:
        normalized = (flat - low) / (high - low)
    image = np.zeros(ceil(flat.size / width) * width)
    image[: flat.size] = normalized
    return image.reshape(-1, width)


def weight_image_to_greyscale(image: np.ndarray) -> np.ndarray:
    """Return the image as an RGB ``uint8`` array with equal channels."""
    grey = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.repeat(grey[..., None], 3, axis=-1)


def encode_matrices(matrices: Sequence[np.ndarray]) -> bytes:
    """Encode 2-D matrices in the weight file format."""
    chunks = [_HEADER.pack(WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION, len(matrices))]
    for matrix in matrices:
        matrix = np.asarray(matrix, dtype="<f8")
        if matrix.ndim != 2:
            raise ShapeMismatch(f"Only 2-D matrices can be stored, got {matrix.shape}")
        chunks.append(_LAYER_HEADER.pack(*matrix.shape))
        chunks.append(np.ascontiguousarray(matrix).tobytes())
    return b"".join(chunks)


def decode_matrices(data: bytes) -> list[np.ndarray]:
    """Decode the weight file format.

    :raises BadMagic: If the magic bytes are wrong
    :raises VersionUnsupported: If the version is not supported
    :raises TruncatedFile: If the payload ends early
    """
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"Header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != WEIGHT_FILE_MAGIC:
        raise BadMagic(f"Bad magic {magic!r}")
    if version != WEIGHT_FILE_VERSION:
        raise VersionUnsupported(f"Weight file version {version} is not supported")
    offset = _HEADER.size
    matrices = []
    for _ in range(count):
        if len(data) < offset + _LAYER_HEADER.size:
            raise TruncatedFile(f"Layer header at byte {offset} is cut off")
        rows, cols = _LAYER_HEADER.unpack_from(data, offset)
        offset += _LAYER_HEADER.size
        size = rows * cols * 8
        if len(data) < offset + size:
            raise TruncatedFile(f"Layer of {rows}x{cols} at byte {offset} is cut off")
        block = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
        matrices.append(block.reshape(rows, cols).astype(np.float64))
        offset += size
    return matrices


def save_matrices(path: Union[str, Path], matrices: Sequence[np.ndarray]) -> None:
    """Write matrices to ``path``."""
    Path(path).write_bytes(encode_matrices(matrices))


def load_matrices(path: Union[str, Path]) -> list[np.ndarray]:
    """Read matrices from ``path``."""
    return decode_matrices(Path(path).read_bytes())


def save_snapshot(path: Union[str, Path], snapshot: WeightSnapshot) -> None:
    """Write the weight matrices of ``snapshot`` to ``path``."""
    save_matrices(path, snapshot.matrices)


def load_snapshot(
    path: Union[str, Path], agent_id: Optional[str] = None
) -> WeightSnapshot:
    """Read a snapshot; the agent id defaults to the file stem."""
    path = Path(path)
    return WeightSnapshot(
        load_matrices(path), path.stem if agent_id is None else agent_id
    )


def write_feature_csv(
    path: Union[str, Path],
    agent_ids: Sequence[str],
    features: np.ndarray,
    labels: Optional[Sequence[float]] = None,
) -> None:
    """Write one row per agent with named feature columns and an optional zeta."""
    names = column_names(features.shape[1])
    fieldnames = ["agent_id", *names] + (["zeta"] if labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row_index, agent_id in enumerate(agent_ids):
            values = features[row_index]
            row = {"agent_id": agent_id}
            row.update({n: repr(float(v)) for n, v in zip(names, values)})
            if labels is not None:
                row["zeta"] = repr(float(labels[row_index]))
            writer.writerow(row)


def write_correlation_csv(path: Union[str, Path], mask: FeatureMask) -> None:
    """Write every feature's Pearson score and whether it was selected."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=["feature", "pearson", "abs_pearson", "selected", "threshold"],
        )
        writer.writeheader()
        for name, score, chosen in zip(mask.names, mask.scores, mask.selected):
            writer.writerow(
                {
                    "feature": name,
                    "pearson": repr(float(score)),
                    "abs_pearson": repr(abs(float(score))),
                    "selected": int(chosen),
                    "threshold": mask.threshold,
                }
            )
