"""Remission to glucose mapping.

The curve is a set of knots ``(r_C, g)`` with ``g`` strictly decreasing in
``r_C``; in between, glucose is interpolated linearly and outside the knot
range it is clamped to the end values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression


class CalibrationError(ValueError):
    """Not enough distinct glucose levels to build a curve."""


@dataclass(frozen=True)
class CalibrationCurve:
    knots: np.ndarray  # (K, 2) rows (r_C, g), r_C ascending
    fitted_at: Optional[str] = None
    source_dataset: Optional[str] = None

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 2 or k.shape[1] != 2 or len(k) < 2:
            raise CalibrationError("a calibration curve needs at least two (r, g) knots")
        if np.any(np.diff(k[:, 0]) <= 0) or np.any(np.diff(k[:, 1]) >= 0):
            raise CalibrationError("knots must have increasing r and strictly decreasing g")
        object.__setattr__(self, "knots", k)

    @property
    def remission_range(self) -> tuple[float, float]:
        return float(self.knots[0, 0]), float(self.knots[-1, 0])

    def map(self, r_c):
        return map_glucose(self, r_c)

    def to_dict(self) -> dict:
        return {
            "knots": [[float(r), float(g)] for r, g in self.knots],
            "fitted_at": self.fitted_at,
            "source_dataset": self.source_dataset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationCurve":
        return cls(np.asarray(d["knots"], dtype=float), d.get("fitted_at"), d.get("source_dataset"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationCurve":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit(remission: Sequence[float], glucose: Sequence[float], *, fitted_at: Optional[str] = None,
        source_dataset: Optional[str] = None) -> CalibrationCurve:
    """Fit knots from ``(r_C, g)`` pairs.

    Remission is averaged per glucose level, made non-increasing in glucose by
    weighted isotonic regression, and levels pooled to the same remission are
    merged into one knot at their count-weighted mean glucose.
    """
    r = np.asarray(remission, dtype=float)
    g = np.asarray(glucose, dtype=float)
    if r.shape != g.shape or r.ndim != 1:
        raise ValueError("remission and glucose must be 1-d arrays of equal length")
    levels, inverse, counts = np.unique(g, return_inverse=True, return_counts=True)
    if len(levels) < 2:
        raise CalibrationError("calibration needs at least two distinct glucose levels")
    means = np.bincount(inverse, weights=r) / counts
    iso = isotonic_regression(means, weights=counts.astype(float), increasing=False).x
    # pooled blocks share one remission value; collapse them to a single knot
    knots_r, knots_g = [], []
    i = 0
    while i < len(iso):
        j = i
        while j + 1 < len(iso) and iso[j + 1] == iso[i]:
            j += 1
        w = counts[i:j + 1]
        knots_r.append(float(iso[i]))
        knots_g.append(float(w @ levels[i:j + 1] / w.sum()))
        i = j + 1
    if len(knots_r) < 2:
        raise CalibrationError("remission does not vary with glucose; cannot build a curve")
    order = np.argsort(knots_r)
    knots = np.column_stack([np.asarray(knots_r)[order], np.asarray(knots_g)[order]])
    return CalibrationCurve(knots, fitted_at, source_dataset)


def map_glucose(curve: CalibrationCurve, r_c):
    """Piecewise-linear, end-clamped, non-negative glucose for remission ``r_c``."""
    out = np.maximum(np.interp(r_c, curve.knots[:, 0], curve.knots[:, 1]), 0.0)
    return float(out) if np.ndim(out) == 0 else out
