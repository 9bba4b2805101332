"""
OsC toolkit - grid containers
2D scalar fields, binary masks, label masks and per-class probability stacks.

Arrays are indexed [row, column] == [y, x] with pixel spacing 1. All
containers keep read-only copies of their data, so instances can be shared
between workers freely.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from errors import InvalidMask, NonFiniteValue, NotNormalized, ShapeMismatch

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_2d(array: np.ndarray, what: str) -> None:
    if array.ndim != 2:
        raise InvalidMask(f"{what} must be 2D, got {array.ndim} dimensions")
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise InvalidMask(f"{what} must be at least 1x1, got {array.shape}")


def finite_check(field: Union["ScalarField", np.ndarray]) -> None:
    """Raise NonFiniteValue at the first NaN/Inf in row-major order.

    Coordinates are reported as (x, y) for 2D data and (class, x, y) for
    class stacks.
    """
    values = field.values if isinstance(field, ScalarField) else np.asarray(field, dtype=float)
    bad = ~np.isfinite(values)
    if not bad.any():
        return
    flat_index = int(np.flatnonzero(bad)[0])
    index = np.unravel_index(flat_index, values.shape)
    value = float(values[index])
    if values.ndim == 2:
        row, col = index
        coordinate = (col, row)
    elif values.ndim == 3:
        cls, row, col = index
        coordinate = (cls, col, row)
    else:
        coordinate = tuple(index)
    raise NonFiniteValue(coordinate, value)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real value per pixel (probabilities, distances, gradients)"""

    values: np.ndarray

    def __post_init__(self):
        array = np.asarray(self.values, dtype=np.float64)
        _check_2d(array, "ScalarField")
        finite_check(array)
        object.__setattr__(self, "values", _frozen(array, np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """One bit per pixel"""

    bits: np.ndarray

    def __post_init__(self):
        array = np.asarray(self.bits)
        _check_2d(array, "BinaryMask")
        if array.dtype != np.bool_:
            if not np.isin(array, (0, 1)).all():
                raise InvalidMask("BinaryMask values must be 0 or 1")
        object.__setattr__(self, "bits", _frozen(array, np.bool_))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Class index per pixel in [0, num_classes)"""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        array = np.asarray(self.labels)
        _check_2d(array, "LabelMask")
        if self.num_classes < 2:
            raise InvalidMask(f"num_classes must be >= 2, got {self.num_classes}")
        if not np.issubdtype(array.dtype, np.integer):
            if not np.all(np.equal(np.mod(array, 1), 0)):
                raise InvalidMask("labels must be integers")
        if array.min() < 0 or array.max() >= self.num_classes:
            raise InvalidMask(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(array, np.int64))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-class probabilities, stored as a (num_classes, height, width) stack"""

    probs: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        array = np.asarray(self.probs, dtype=np.float64)
        if array.ndim != 3 or array.shape[0] < 2:
            raise InvalidMask(f"ProbMap must be (K>=2, H, W), got {array.shape}")
        _check_2d(array[0], "ProbMap channel")
        finite_check(array)
        if array.min() < 0.0 or array.max() > 1.0:
            raise InvalidMask("probabilities must lie in [0, 1]")
        if self.normalized:
            deviation = float(np.abs(array.sum(axis=0) - 1.0).max())
            if deviation > NORMALIZATION_TOLERANCE:
                raise NotNormalized(deviation)
        object.__setattr__(self, "probs", _frozen(array, np.float64))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probs.shape[1:]


def require_same_shape(expected, actual, what: str = "field") -> None:
    if tuple(expected) != tuple(actual):
        raise ShapeMismatch(expected, actual, what)


def one_hot(mask: LabelMask) -> ProbMap:
    """Encode labels as a normalized 0/1 probability stack"""
    classes = np.arange(mask.num_classes).reshape(-1, 1, 1)
    probs = (mask.labels[np.newaxis, :, :] == classes).astype(np.float64)
    return ProbMap(probs, normalized=True)


def argmax(probmap: ProbMap) -> LabelMask:
    # ties resolve to the lowest class index
    return LabelMask(np.argmax(probmap.probs, axis=0), probmap.num_classes)


def threshold(field: ScalarField, t: float) -> BinaryMask:
    """Binarize with ties going to foreground (value >= t)"""
    if not np.isfinite(t):
        raise InvalidMask(f"threshold must be finite, got {t}")
    return BinaryMask(field.values >= t)


def complement(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(~mask.bits)


def channel(probmap: ProbMap, c: int) -> ScalarField:
    return ScalarField(probmap.probs[c])


def binary_from_labels(mask: LabelMask, c: int) -> BinaryMask:
    """One-vs-rest mask for class c"""
    return BinaryMask(mask.labels == c)


def softmax(logits: np.ndarray) -> ProbMap:
    """Per-pixel softmax over the class axis of a (K, H, W) logit stack"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=0, keepdims=True)
    return ProbMap(probs, normalized=True)
