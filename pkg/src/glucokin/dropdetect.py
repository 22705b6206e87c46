"""Reaction-onset detection by a variance test on mean-adjusted frames.

Before the drop every pixel is the dry strip plus i.i.d. Gaussian noise of
variance ``sigma1_sq``; afterwards the wetted region darkens and the spread
of the frame grows.  The statistic is the sum of squared deviations from the
frame mean, compared against a threshold from the Gaussian approximation of
the chi-square law of ``T / sigma1_sq``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.stats import norm

MIN_PIXELS = 30


@dataclass(frozen=True)
class DropDetectorConfig:
    sigma1_sq: Optional[float] = None
    p_fa: float = 1e-3
    min_consecutive: int = 3

    def __post_init__(self):
        if self.sigma1_sq is not None and not self.sigma1_sq > 0:
            raise ValueError("sigma1_sq must be positive")
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError("p_fa must lie in (0, 1)")
        if self.min_consecutive < 1:
            raise ValueError("min_consecutive must be at least 1")


@dataclass
class DropDecision:
    n_drop: Optional[int]
    threshold: float
    statistics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_D": self.n_drop, "threshold": self.threshold}


def test_statistic(x) -> float:
    """Sum of squared deviations of ``x`` from its mean."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("test statistic needs at least two pixels")
    d = x - x.mean()
    return float(d @ d)


# not a pytest test
test_statistic.__test__ = False


def threshold(cfg: DropDetectorConfig, n_pixels: int, sigma1_sq: Optional[float] = None) -> float:
    """``sigma1^2 * (L + sqrt(2L) * Qinv(p_fa))``."""
    s2 = cfg.sigma1_sq if sigma1_sq is None else sigma1_sq
    if s2 is None or not s2 > 0:
        raise ValueError("threshold needs a positive pre-reaction variance")
    if n_pixels < MIN_PIXELS:
        raise ValueError(f"Gaussian approximation needs L >= {MIN_PIXELS}, got {n_pixels}")
    if not 0.0 < cfg.p_fa < 1.0:
        raise ValueError("p_fa must lie in (0, 1)")
    return s2 * (n_pixels + math.sqrt(2.0 * n_pixels) * float(norm.isf(cfg.p_fa)))


def estimate_sigma1_sq(calibration: np.ndarray) -> float:
    """Pooled sample variance of mean-adjusted calibration frames."""
    stack = np.asarray(calibration, dtype=float)
    stack = stack.reshape(len(stack), -1)
    if stack.shape[1] < 2:
        raise ValueError("calibration frames need at least two pixels")
    dev = stack - stack.mean(axis=1, keepdims=True)
    return float((dev ** 2).sum() / (stack.shape[0] * (stack.shape[1] - 1)))


class DropDetector:
    """Streaming detector; feed frames in index order with :meth:`push`."""

    def __init__(self, cfg: DropDetectorConfig, n_pixels: int, sigma1_sq: Optional[float] = None):
        self.cfg = cfg
        self.threshold = threshold(cfg, n_pixels, sigma1_sq)
        self.statistics: list[float] = []
        self.n_drop: Optional[int] = None
        self._run_start: Optional[int] = None
        self._run = 0

    def push(self, n: int, frame) -> Optional[int]:
        t = test_statistic(frame)
        self.statistics.append(t)
        if self.n_drop is not None:
            return self.n_drop
        if t > self.threshold:
            if self._run == 0:
                self._run_start = n
            self._run += 1
            if self._run >= self.cfg.min_consecutive:
                self.n_drop = self._run_start
        else:
            self._run = 0
        return self.n_drop


def detect(frames: Iterable, cfg: DropDetectorConfig, sigma1_sq: Optional[float] = None,
           first_index: int = 0) -> DropDecision:
    """Scan pre-processed frames for the first run of ``min_consecutive`` H1 decisions."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to scan")
    n_pixels = np.asarray(frames[0]).size
    det = DropDetector(cfg, n_pixels, sigma1_sq)
    for n, frame in enumerate(frames, start=first_index):
        if det.push(n, frame) is not None:
            break
    return DropDecision(det.n_drop, det.threshold, det.statistics)
