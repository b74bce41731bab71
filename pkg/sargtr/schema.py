from typing import List, NamedTuple, Optional, TypedDict

import numpy as np


CENTER_FIELDS = ("amplitude", "alpha", "length", "phi", "gamma", "x", "y")


class ScatteringCenter(NamedTuple):
    '''One attributed scattering center: the 7 ASC parameters in interchange order.
    amplitude and length are non-negative, phi is in radians, x and y are in meters.'''
    amplitude: float
    alpha: float
    length: float
    phi: float
    gamma: float
    x: float
    y: float


class DatasetRecord(TypedDict):
    '''A labeled ASC set, one per JSONL line.
    Each entry of centers is [A, alpha, L, phi, gamma, x, y].'''
    label: int
    centers: List[List[float]]


class SpectralDecomposition(NamedTuple):
    '''Eigenvalues in ascending order and the matching orthonormal eigenvectors as columns.'''
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


class ParamCheck(NamedTuple):
    '''Finite-difference comparison for one parameter tensor.'''
    name: str
    relative_error: float
    checked_entries: int
    passed: bool


class GradCheckReport(NamedTuple):
    '''Outcome of grad_check over every parameter tensor.'''
    params: List[ParamCheck]
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_relative_error(self) -> float:
        return max((p.relative_error for p in self.params), default=0.0)


class EpochMetrics(TypedDict):
    '''One JSON line of the training metrics stream.'''
    epoch: int
    loss: float
    train_acc: float
    val_acc: Optional[float]


class EvalResult(NamedTuple):
    '''Probability of correct classification and the class_count x class_count confusion matrix.
    Rows are true labels, columns are predictions.'''
    pcc: float
    confusion: np.ndarray
    total: int


class Prediction(NamedTuple):
    '''Predicted labels and softmax class probabilities for a list of graphs.'''
    labels: np.ndarray
    probabilities: np.ndarray
