"""Dense volumetric containers and per-voxel primitives.

Tensors are plain numpy arrays in C (row-major) order. Probability maps are
channel-major: shape ``(K, D, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_ATOL = 1e-5


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"invalid spacing {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise ValueError(f"label map must be 3-D, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() >= self.num_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "data", np.ascontiguousarray(raw, dtype=np.uint8))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim < 2 or data.shape[0] < 2:
            raise ValueError(f"prob map needs a class axis of size >= 2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("prob map contains non-finite values")
        if data.min() < -PROB_ATOL or data.max() > 1 + PROB_ATOL:
            raise ValueError("probabilities outside [0, 1]")
        if np.abs(data.sum(axis=0, dtype=np.float64) - 1.0).max() > PROB_ATOL:
            raise ValueError("probabilities do not sum to 1")
        object.__setattr__(self, "data", data)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class ClassWeights:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1 or not np.all(np.isfinite(values)) or values.min() < 0:
            raise ValueError(f"class weights must be finite and non-negative, got {values}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values.tolist())


def softmax_array(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0, stabilised by the per-voxel max logit."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 1 or z.shape[0] < 2:
        raise ValueError("invalid logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("invalid logits")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax(logits: np.ndarray) -> ProbMap:
    return ProbMap(softmax_array(logits))


def argmax_labels(p: ProbMap | np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the class axis; ties go to the lowest class index."""
    arr = p.data if isinstance(p, ProbMap) else np.asarray(p)
    # np.argmax returns the first maximal index.
    return np.argmax(arr, axis=0).astype(np.uint8)


def argmax_labelmap(p: ProbMap, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    return LabelMap(argmax_labels(p), p.num_classes, spacing)


def class_voxel_counts(labels: LabelMap | np.ndarray, num_classes: int) -> np.ndarray:
    if isinstance(labels, LabelMap):
        if labels.num_classes != num_classes:
            raise ValueError("num_classes does not match label map")
        labels = labels.data
    flat = np.asarray(labels).reshape(-1).astype(np.int64)
    return np.bincount(flat, minlength=num_classes).astype(np.int64)
