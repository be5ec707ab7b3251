"""Input validation helpers shared across loaders, fusion, and the estimator."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


Box = tuple[float, float, float, float]


def check_box(box: Sequence[float], image_size: Sequence[float], what: str = "box") -> Box:
    if len(box) != 4:
        raise ValidationError(f"{what} must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = (float(v) for v in image_size)
    if w <= 0 or h <= 0:
        raise ValidationError(f"image size must be positive, got {image_size}")
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise ValidationError(
            f"{what} {tuple(box)} violates 0 <= x1 < x2 <= {w}, 0 <= y1 < y2 <= {h}"
        )
    return (x1, y1, x2, y2)


def check_vector(vec: np.ndarray, dim: int, what: str = "feature vector") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float32)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] != dim:
        raise ValidationError(f"{what} has length {arr.shape[0]}, declared dim is {dim}")
    return arr


def check_positive(value: float, what: str) -> float:
    if value <= 0:
        raise ValidationError(f"{what} must be positive, got {value}")
    return value


def check_fraction(value: float, what: str) -> float:
    if not (0.0 < value <= 1.0):
        raise ValidationError(f"{what} must lie in (0, 1], got {value}")
    return value


def check_choice(value: str, choices: Sequence[str], what: str) -> str:
    if value not in choices:
        raise ValidationError(f"{what} must be one of {list(choices)}, got {value!r}")
    return value
