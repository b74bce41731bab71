'''Scatter graphs built from attributed scattering center (ASC) parameter sets.

A graph is fully connected over its K centers. Edge weights come from a
Gaussian kernel on the (x, y) positions and the node feature matrix H0 keeps
the 7 raw ASC parameters per row.
'''
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import DegenerateGraphException, UnknownAlphaException, ValidationException
from .schema import CENTER_FIELDS, DatasetRecord, ScatteringCenter

logger = logging.getLogger(__name__)

AUTO = "auto"
ALPHA_COLUMN = 1
POSITION_COLUMNS = (5, 6)
CONTINUOUS_COLUMNS = (0, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class DiscreteCodebook:
    '''
    Ordered set of permitted alpha values plus one bucket for anything else.

    Args:
        values (tuple): permitted alpha values, strictly increasing
        unknown_index (int): index returned for alpha values outside the codebook
        strict (bool): raise UnknownAlphaException instead of using the unknown bucket
        tolerance (float): absolute tolerance used when matching a value
    '''
    values: Tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    unknown_index: int = 5
    strict: bool = False
    tolerance: float = 1e-9

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if not values:
            raise ValidationException("A codebook needs at least one alpha value.")
        if any(not math.isfinite(v) for v in values):
            raise ValidationException("Codebook values must be finite.")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValidationException("Codebook values must be strictly increasing.")
        if self.unknown_index != len(values):
            raise ValidationException(
                f"The unknown bucket must follow the codebook values (expected index {len(values)}).")

    @property
    def size(self) -> int:
        '''Number of embedding rows: every codebook value plus the unknown bucket.'''
        return len(self.values) + 1


def alpha_to_index(alpha: float, codebook: DiscreteCodebook = DiscreteCodebook()) -> int:
    '''Map a frequency-dependence value to its integer codebook index.

    Args:
        alpha (float): the alpha parameter of a scattering center
        codebook (DiscreteCodebook): the permitted values

    Returns:
        int: position of the nearest codebook value within tolerance, else the unknown bucket
    '''
    values = np.asarray(codebook.values)
    distance = np.abs(values - float(alpha))
    nearest = int(np.argmin(distance))
    if distance[nearest] <= codebook.tolerance:
        return nearest
    if codebook.strict:
        raise UnknownAlphaException(f"alpha={alpha!r} is not one of {list(codebook.values)}.")
    return codebook.unknown_index


def alpha_indices(features: np.ndarray, codebook: DiscreteCodebook = DiscreteCodebook()) -> np.ndarray:
    return np.array([alpha_to_index(a, codebook) for a in features[:, ALPHA_COLUMN]], dtype=np.int64)


def as_center(values: Union[ScatteringCenter, Sequence[float]]) -> ScatteringCenter:
    '''Validate a 7-vector and return it as a ScatteringCenter.'''
    if isinstance(values, ScatteringCenter):
        center = values
    else:
        values = list(values)
        if len(values) != len(CENTER_FIELDS):
            raise ValidationException(
                f"A scattering center has {len(CENTER_FIELDS)} parameters, got {len(values)}.")
        try:
            center = ScatteringCenter(*(float(v) for v in values))
        except (TypeError, ValueError):
            raise ValidationException(f"Scattering center parameters must be numbers: {values!r}")

    for name, value in zip(CENTER_FIELDS, center):
        if not math.isfinite(value):
            raise ValidationException(f"Scattering center field {name} is not finite ({value}).")
    if center.amplitude < 0:
        raise ValidationException(f"Amplitude must be non-negative, got {center.amplitude}.")
    if center.length < 0:
        raise ValidationException(f"Length must be non-negative, got {center.length}.")
    return center


@dataclass(eq=False)
class ScatterGraph:
    '''
    Fully connected weighted graph over K scattering centers.

    Args:
        features (np.ndarray): H0, K x 7, row k holds the parameters of center k
        edges (np.ndarray): M x 2 unordered pairs (i, j) with i < j in lexicographic order
        weights (np.ndarray): M kernel weights in (0, 1]
        sigma_d (float): kernel bandwidth in meters
    '''
    features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    sigma_d: float
    _directed: Tuple[np.ndarray, np.ndarray, np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def positions(self) -> np.ndarray:
        return self.features[:, list(POSITION_COLUMNS)]

    def weight_matrix(self) -> np.ndarray:
        '''Symmetric K x K weights with an empty diagonal.'''
        k = self.num_nodes
        matrix = np.zeros((k, k))
        matrix[self.edges[:, 0], self.edges[:, 1]] = self.weights
        matrix[self.edges[:, 1], self.edges[:, 0]] = self.weights
        return matrix

    def edge_lookup(self) -> dict:
        return {(int(i), int(j)): m for m, (i, j) in enumerate(self.edges)}

    def directed(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        '''Both directed copies of every edge.

        Returns:
            tuple: (src, dst, edge_id) where src is the neighbor i, dst the center j
                   and edge_id the unordered edge the copy came from
        '''
        if self._directed is None:
            m = np.arange(self.num_edges)
            src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
            dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
            self._directed = (src, dst, np.concatenate([m, m]))
        return self._directed

    def with_weights(self, weights: np.ndarray) -> "ScatterGraph":
        '''Copy of the graph with replaced edge weights (same topology).'''
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != self.weights.shape:
            raise ValidationException(f"Expected {self.num_edges} weights, got {weights.shape}.")
        if np.any(weights <= 0) or np.any(weights > 1) or not np.all(np.isfinite(weights)):
            raise ValidationException("Edge weights must lie in (0, 1].")
        return ScatterGraph(self.features.copy(), self.edges.copy(), weights.copy(), self.sigma_d)


def complete_edges(k: int) -> np.ndarray:
    rows, cols = np.triu_indices(k, 1)
    return np.stack([rows, cols], axis=1).astype(np.int64)


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def median_bandwidth(positions: np.ndarray) -> float:
    '''Median of all pairwise distances; 1.0 when the median is not positive.'''
    rows, cols = np.triu_indices(positions.shape[0], 1)
    median = float(np.median(pairwise_distances(positions)[rows, cols]))
    return median if median > 0 else 1.0


def build_graph(centers: Iterable[Union[ScatteringCenter, Sequence[float]]],
                sigma_d: Union[float, str] = AUTO) -> ScatterGraph:
    '''Compile a set of scattering centers into a fully connected scatter graph.

    Args:
        centers: scattering centers or raw 7-vectors
        sigma_d: kernel bandwidth in meters, or "auto" for the median pairwise distance

    Returns:
        ScatterGraph: K(K-1)/2 edges weighted by exp(-|p_i - p_j|^2 / 2 sigma_d^2)
    '''
    rows = [as_center(c) for c in centers]
    if len(rows) < 2:
        raise DegenerateGraphException(f"A scatter graph needs at least two centers, got {len(rows)}.")

    features = np.array(rows, dtype=np.float64)
    positions = features[:, list(POSITION_COLUMNS)]

    if isinstance(sigma_d, str):
        if sigma_d != AUTO:
            raise ValidationException(f"sigma_d must be positive or '{AUTO}', got {sigma_d!r}.")
        sigma = median_bandwidth(positions)
    else:
        sigma = float(sigma_d)
        if not math.isfinite(sigma) or sigma <= 0:
            raise ValidationException(f"sigma_d must be positive, got {sigma_d!r}.")

    edges = complete_edges(len(rows))
    distances = pairwise_distances(positions)[edges[:, 0], edges[:, 1]]
    weights = np.exp(-(distances ** 2) / (2.0 * sigma ** 2))
    # far pairs underflow; weights stay strictly positive
    weights = np.maximum(weights, np.finfo(np.float64).tiny)
    return ScatterGraph(features, edges, weights, sigma)


def permute_graph(g: ScatterGraph, perm: Sequence[int]) -> ScatterGraph:
    '''Relabel nodes so old node k becomes node perm[k].

    Args:
        g (ScatterGraph): the graph to relabel
        perm: a bijection of {0..K-1}

    Returns:
        ScatterGraph: same weights on relabeled endpoints, edges back in canonical order
    '''
    perm = np.asarray(perm)
    k = g.num_nodes
    if perm.shape != (k,) or not np.issubdtype(perm.dtype, np.integer) \
            or not np.array_equal(np.sort(perm), np.arange(k)):
        raise ValidationException(f"perm must be a permutation of 0..{k - 1}.")

    features = np.empty_like(g.features)
    features[perm] = g.features

    relabeled = perm[g.edges]
    relabeled.sort(axis=1)
    order = np.lexsort((relabeled[:, 1], relabeled[:, 0]))
    return ScatterGraph(features, relabeled[order], g.weights[order].copy(), g.sigma_d)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    perm = np.asarray(perm)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.shape[0])
    return inverse


###########
# Dataset #
###########

def validate_record(record: dict, class_count: int = None) -> DatasetRecord:
    '''Check one interchange record and return it with normalised types.'''
    if not isinstance(record, dict) or "label" not in record or "centers" not in record:
        raise ValidationException("A record needs 'label' and 'centers' keys.")
    label = record["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise ValidationException(f"Record label must be an integer, got {label!r}.")
    if label < 0 or (class_count is not None and label >= class_count):
        raise ValidationException(f"Record label {label} is outside [0, {class_count}).")
    centers = [list(as_center(c)) for c in record["centers"]]
    return DatasetRecord(label=label, centers=centers)


def record_to_centers(record: DatasetRecord) -> List[ScatteringCenter]:
    return [as_center(c) for c in record["centers"]]


def read_jsonl(path: Union[str, pathlib.Path]) -> List[DatasetRecord]:
    '''Read a JSONL dataset, one record per line; blank lines are skipped.'''
    records = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationException(f"{path}:{line_number}: invalid JSON ({e.msg}).")
            try:
                records.append(validate_record(raw))
            except ValidationException as e:
                raise ValidationException(f"{path}:{line_number}: {e.message}")
    logger.info("Read %d records from %s", len(records), path)
    return records


def dumps_record(record: DatasetRecord) -> str:
    return json.dumps({"label": int(record["label"]),
                       "centers": [[float(v) for v in c] for c in record["centers"]]},
                      sort_keys=True)


def write_jsonl(records: Iterable[DatasetRecord], path: Union[str, pathlib.Path]) -> int:
    '''Write records as UTF-8 JSON lines. Returns the number written.'''
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps_record(record))
            f.write("\n")
            count += 1
    logger.info("Wrote %d records to %s", count, path)
    return count
