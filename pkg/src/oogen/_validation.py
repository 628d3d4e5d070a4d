"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .split import OOGSplit


def check_split(split, meta_sets=()) -> OOGSplit:
    if not isinstance(split, OOGSplit):
        raise TypeError(f"expected an OOGSplit, got {type(split).__name__}")
    for name in meta_sets:
        if name not in split.meta_sets:
            raise ValueError(f"split has no meta-set {name!r}")
    return split


def check_triplets(rows, n_entities: int | None = None, n_relations: int | None = None) -> np.ndarray:
    arr = np.asarray(rows)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"triplets must have shape (n, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("triplet ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("triplet ids must be non-negative")
    if n_entities is not None and arr[:, [0, 2]].max() >= n_entities:
        raise ValueError("entity id out of range")
    if n_relations is not None and arr[:, 1].max() >= n_relations:
        raise ValueError("relation id out of range")
    return arr


def check_int(value, name: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
