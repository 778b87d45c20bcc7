"""Optional coordinatewise preprocessing applied around the flow.

A ColumnTransform maps each column independently (optional log, then an
affine rescale). Coordinatewise monotone maps keep block-triangular
structure intact, so conditional sampling commutes with them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError

TRANSFORM_KINDS = ("none", "standardize", "log", "log_standardize")


@dataclass
class ColumnTransform:
    """Per-column map u = (g(v) - shift) / scale with g = log or identity."""

    log: bool
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if self.shift.shape != self.scale.shape:
            raise ValidationError("shift and scale must have equal length")
        if not np.all(self.scale > 0):
            raise ValidationError("scales must be positive")

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    def forward(self, values: np.ndarray, offset: int = 0) -> np.ndarray:
        """Transform columns [offset : offset + width) of the full layout."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        width = values.shape[1]
        if offset + width > self.dim:
            raise ValidationError("transform slice out of range")
        if self.log:
            if np.any(values <= 0):
                raise ValidationError("log transform requires strictly positive values")
            values = np.log(values)
        return (values - self.shift[offset : offset + width]) / self.scale[
            offset : offset + width
        ]

    def inverse(self, values: np.ndarray, offset: int = 0) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        width = values.shape[1]
        if offset + width > self.dim:
            raise ValidationError("transform slice out of range")
        out = values * self.scale[offset : offset + width] + self.shift[
            offset : offset + width
        ]
        return np.exp(out) if self.log else out

    def to_json_dict(self) -> dict:
        return {
            "log": self.log,
            "shift": [float(v) for v in self.shift],
            "scale": [float(v) for v in self.scale],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ColumnTransform":
        return cls(
            bool(doc["log"]),
            np.array(doc["shift"], dtype=np.float64),
            np.array(doc["scale"], dtype=np.float64),
        )


def fit_column_transform(points: np.ndarray, kind: str) -> ColumnTransform | None:
    """Fit a transform of the requested kind to data columns; None for "none"."""
    if kind not in TRANSFORM_KINDS:
        raise ValidationError(f"unknown transform kind {kind!r}")
    if kind == "none":
        return None
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dim = points.shape[1]
    use_log = kind in ("log", "log_standardize")
    if use_log:
        if np.any(points <= 0):
            raise ValidationError(f"transform {kind!r} requires strictly positive data")
        points = np.log(points)
    if kind == "log":
        return ColumnTransform(True, np.zeros(dim), np.ones(dim))
    shift = points.mean(axis=0)
    scale = np.std(points, axis=0, ddof=1) if points.shape[0] > 1 else np.ones(dim)
    scale = np.where(scale > 0, scale, 1.0)
    return ColumnTransform(use_log, shift, scale)
