"""Kinetic-curve model, rate regression and convergence detection.

After the drop, remission decays exponentially from ``r_D`` towards the
converged value ``r_C``::

    r(t) = (r_D - r_C) * exp(t * tau) + r_C,    tau = delta_tau * r_C + tau0

with ``t`` frames since the drop.  ``tau`` is negative, so the exponent
decays; darker end points (high glucose) have the steeper rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

PRE_DROP = "pre-drop"
DECAY = "decay"
CONVERGED = "converged"

# exp(50) is far beyond any physical curve; larger arguments mean a runaway state
MAX_EXPONENT = 50.0


@dataclass(frozen=True)
class KineticModelParams:
    delta_tau: float
    tau0: float
    noise_var: float = 0.25

    def __post_init__(self):
        if not self.delta_tau > 0:
            raise ValueError(f"delta_tau must be positive, got {self.delta_tau}")
        if not self.tau0 < 0:
            raise ValueError(f"tau0 must be negative, got {self.tau0}")
        if not self.noise_var > 0:
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")

    def tau(self, r_c):
        return self.delta_tau * np.asarray(r_c, dtype=float) + self.tau0

    def to_dict(self) -> dict:
        return {"delta_tau": self.delta_tau, "tau0": self.tau0, "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d: dict) -> "KineticModelParams":
        return cls(float(d["delta_tau"]), float(d["tau0"]), float(d["noise_var"]))


@dataclass
class KineticTrace:
    """Per-frame remission estimates with the drop index."""

    r_hat: np.ndarray
    n_drop: Optional[int] = None
    stages: list = field(default_factory=list)

    def __post_init__(self):
        self.r_hat = np.asarray(self.r_hat, dtype=float)
        if self.n_drop is not None and not 0 <= self.n_drop < len(self.r_hat):
            raise ValueError("drop index outside the trace")

    @property
    def r_drop(self) -> Optional[float]:
        return None if self.n_drop is None else float(self.r_hat[self.n_drop])

    def post_drop(self) -> np.ndarray:
        if self.n_drop is None:
            raise ValueError("trace has no drop")
        return self.r_hat[self.n_drop:]


@dataclass
class ConvergenceDecision:
    method: str
    n_c: int
    r_c_hat: float

    def to_dict(self) -> dict:
        return {"method": self.method, "n_C": self.n_c, "r_C_hat": self.r_c_hat}


# -- model ---------------------------------------------------------------------

def _exponent(t, tau):
    arg = np.asarray(t, dtype=float) * tau
    clamped = bool(np.any(arg > MAX_EXPONENT))
    return np.minimum(arg, MAX_EXPONENT), clamped


def model_eval(t, r_d: float, r_c: float, params: KineticModelParams):
    """Noise-free remission ``t`` frames after the drop."""
    arg, _ = _exponent(t, params.tau(r_c))
    out = (r_d - r_c) * np.exp(arg) + r_c
    return float(out) if np.ndim(out) == 0 else out


def model_jacobian(t, r_d: float, r_c: float, params: KineticModelParams):
    """``d model_eval / d r_C``."""
    t = np.asarray(t, dtype=float)
    arg, _ = _exponent(t, params.tau(r_c))
    dt = params.delta_tau * t
    out = 1.0 - np.exp(arg) * (1.0 - r_d * dt + r_c * dt)
    return float(out) if np.ndim(out) == 0 else out


# -- fitting ---------------------------------------------------------------------

@dataclass
class ExpFit:
    r_d: float
    r_c: float
    tau: float
    rms: float
    ok: bool
    message: str = ""

    @property
    def noise_var(self) -> float:
        return self.rms ** 2


def _initial_guess(t: np.ndarray, r: np.ndarray) -> tuple[float, float, float]:
    r_d, r_c = float(r[0]), float(r[-1])
    amp = r - r_c
    scale = abs(r_d - r_c)
    use = np.abs(amp) > 0.05 * scale
    use &= np.sign(amp) == np.sign(r_d - r_c)
    tau = -1.0 / max(len(t), 1)
    if use.sum() >= 2:
        slope = np.polyfit(t[use], np.log(np.abs(amp[use])), 1)[0]
        if slope < 0:
            tau = float(slope)
    return r_d, r_c, tau


def fit_exponential(values: Sequence[float], t: Optional[Sequence[float]] = None) -> ExpFit:
    """Levenberg-Marquardt fit of ``(r_D - r_C) exp(t tau) + r_C`` to post-drop samples."""
    r = np.asarray(values, dtype=float)
    if r.size < 10:
        raise ValueError(f"need at least 10 post-drop samples, got {r.size}")
    t = np.arange(r.size, dtype=float) if t is None else np.asarray(t, dtype=float)
    if np.ptp(r) == 0:
        v = float(r[0])
        return ExpFit(v, v, float("nan"), 0.0, False, "constant trace: rate unidentifiable")

    def resid(p):
        arg = np.minimum(t * p[2], MAX_EXPONENT)
        return (p[0] - p[1]) * np.exp(arg) + p[1] - r

    x0 = _initial_guess(t, r)
    sol = least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    r_d, r_c, tau = (float(v) for v in sol.x)
    rms = float(np.sqrt(np.mean(sol.fun ** 2)))
    ok = bool(sol.success) and tau < 0 and np.isfinite(rms)
    return ExpFit(r_d, r_c, tau, rms, ok, sol.message)


def regress_tau(r_c: Sequence[float], tau: Sequence[float]) -> KineticModelParams:
    """Least-squares line ``tau = delta_tau * r_C + tau0``.

    The residual variance of the line seeds ``noise_var``; callers with
    curve-fit residuals should replace it.
    """
    x = np.asarray(r_c, dtype=float)
    y = np.asarray(tau, dtype=float)
    if x.size != y.size:
        raise ValueError("r_C and tau differ in length")
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("regression needs at least two distinct r_C values")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    var = max(float(np.mean(resid ** 2)), 1e-12)
    return KineticModelParams(float(slope), float(intercept), var)


# -- slope-threshold convergence ---------------------------------------------------

class SlopeMonitor:
    """Streaming least-squares slope rule over the last ``window`` frames."""

    def __init__(self, n_drop: int, t_slope: float = 1e-2, window: int = 15):
        if not t_slope > 0:
            raise ValueError("t_slope must be positive")
        if window < 2:
            raise ValueError("window must be at least 2")
        self.n_drop = n_drop
        self.t_slope = t_slope
        self.window = window
        self._buf: list[float] = []
        self._run = 0
        self.decision: Optional[ConvergenceDecision] = None

    def push(self, n: int, r: float) -> Optional[ConvergenceDecision]:
        if self.decision is not None or n < self.n_drop:
            return self.decision
        self._buf.append(float(r))
        if len(self._buf) > self.window:
            self._buf.pop(0)
        if len(self._buf) < 2:
            return None
        y = np.asarray(self._buf)
        x = np.arange(y.size, dtype=float)
        x -= x.mean()
        slope = float(x @ (y - y.mean()) / (x @ x))
        self._run = self._run + 1 if abs(slope) < self.t_slope else 0
        if self._run >= self.window:
            self.decision = ConvergenceDecision("standard", n, float(r))
        return self.decision


def standard_convergence(r_hat: Sequence[float], n_drop: int, t_slope: float = 1e-2,
                         window: int = 15) -> Optional[ConvergenceDecision]:
    """First frame after the drop where the slope stayed below ``t_slope`` for ``window`` frames."""
    mon = SlopeMonitor(n_drop, t_slope, window)
    for n in range(n_drop, len(r_hat)):
        if mon.push(n, r_hat[n]) is not None:
            return mon.decision
    return None


# -- extended Kalman filter -------------------------------------------------------

@dataclass(frozen=True)
class EkfState:
    r_c: float
    P: float
    Q: float
    R: float
    n: int = 0
    clamped: bool = False

    def __post_init__(self):
        if self.P < 0 or self.Q < 0:
            raise ValueError("P and Q must be non-negative")
        if not self.R > 0:
            raise ValueError("R must be positive")


def ekf_step(state: EkfState, measurement: float, r_d: float, params: KineticModelParams,
             t: Optional[int] = None) -> EkfState:
    """Predict (static state) and correct with the remission at ``t`` frames after the origin."""
    t = state.n + 1 if t is None else t
    p_pred = state.P + state.Q
    _, clamped = _exponent(t, params.tau(state.r_c))
    h = model_jacobian(t, r_d, state.r_c, params)
    innov = measurement - model_eval(t, r_d, state.r_c, params)
    s = h * h * p_pred + state.R
    gain = p_pred * h / s
    r_c = state.r_c + gain * innov
    p = max((1.0 - gain * h) * p_pred, 0.0)
    if not math.isfinite(r_c):
        return replace(state, n=t, P=p_pred, clamped=True)
    return EkfState(float(np.clip(r_c, 0.0, 100.0)), p, state.Q, state.R, t, clamped)


def ekf_convergence(history: Sequence[float], tol_state: float, window: int = 15) -> Optional[int]:
    """Index of the first step ending ``window`` consecutive updates with ``|dr_C| < tol_state``."""
    if not tol_state > 0:
        raise ValueError("tol_state must be positive")
    run = 0
    for i in range(1, len(history)):
        run = run + 1 if abs(history[i] - history[i - 1]) < tol_state else 0
        if run >= window:
            return i
    return None


@dataclass(frozen=True)
class EkfConfig:
    q: float = 1e-4
    p0: float = 25.0
    init_offset: float = 5.0
    skip: int = 10
    tol_state: float = 0.02
    window: int = 15
    noise_var: Optional[float] = None  # overrides params.noise_var when set


class EkfTracker:
    """Runs the filter frame by frame from ``n_drop + skip``.

    The filter's time origin is the first frame it sees, with ``r_D`` taken
    as the remission at that frame; by the shift invariance of the model this
    matches the drop-origin curve while stepping over the post-drop dip.
    """

    def __init__(self, n_drop: int, params: KineticModelParams, cfg: EkfConfig = EkfConfig()):
        self.params = params
        self.cfg = cfg
        self.n0 = n_drop + cfg.skip
        self.r_d: Optional[float] = None
        self.state: Optional[EkfState] = None
        self.history: list[float] = []
        self.variances: list[float] = []
        self._run = 0
        self.decision: Optional[ConvergenceDecision] = None

    def push(self, n: int, r: float) -> Optional[ConvergenceDecision]:
        if self.decision is not None or n < self.n0:
            return self.decision
        if self.state is None:
            self.r_d = float(r)
            R = self.cfg.noise_var if self.cfg.noise_var is not None else self.params.noise_var
            self.state = EkfState(float(np.clip(r - self.cfg.init_offset, 0.0, 100.0)),
                                  self.cfg.p0, self.cfg.q, R, 0)
        else:
            prev = self.state.r_c
            self.state = ekf_step(self.state, float(r), self.r_d, self.params, n - self.n0)
            if self.state.clamped:
                log.debug("EKF exponent clamped at frame %d", n)
            self._run = self._run + 1 if abs(self.state.r_c - prev) < self.cfg.tol_state else 0
            if self._run >= self.cfg.window:
                self.decision = ConvergenceDecision("ekf", n, self.state.r_c)
        self.history.append(self.state.r_c)
        self.variances.append(self.state.P)
        return self.decision


def run_ekf(r_hat: Sequence[float], n_drop: int, params: KineticModelParams,
            cfg: EkfConfig = EkfConfig()) -> tuple[Optional[ConvergenceDecision], EkfTracker]:
    tracker = EkfTracker(n_drop, params, cfg)
    for n in range(n_drop, len(r_hat)):
        if tracker.push(n, r_hat[n]) is not None:
            break
    return tracker.decision, tracker
