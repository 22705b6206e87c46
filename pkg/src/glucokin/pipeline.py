"""Measurement pipeline: drop detection, per-frame segmentation, convergence
and glucose mapping, plus dataset-level training and evaluation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import calibrate, kinetics, metrics, roi
from .dropdetect import DropDetector, DropDetectorConfig, estimate_sigma1_sq
from .frames import Measurement, pixel_coordinates, preprocess, vectorize
from .modeseek import KernelConfig, SparseOptions, VARIANTS, segment

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
METHODS = ("ekf", "standard")


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    # drop detection
    p_fa: float = 1e-3
    min_consecutive: int = 3
    sigma1_sq: Optional[float] = None
    bin_size: Optional[int] = None
    # segmentation
    variant: str = "meds"
    bandwidth: float = 0.6
    spatial: bool = False
    spatial_bandwidth: float = 4.0
    sparse_n: Optional[int] = None
    t_nu: float = 1e-3
    # convergence
    method: str = "ekf"
    t_slope: float = 1e-2
    window: int = 15
    tol_state: float = 0.02
    q: float = 1e-4
    p0: float = 25.0
    init_offset: float = 5.0
    skip: int = 10
    # trained artefacts
    kinetics_path: Optional[str] = None
    calibration_path: Optional[str] = None

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown convergence method {self.method!r}")
        if not self.bandwidth > 0 or not self.spatial_bandwidth > 0:
            raise ValueError("bandwidths must be positive")
        for name in ("kinetics_path", "calibration_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{name} {path} does not exist")

    @property
    def detector(self) -> DropDetectorConfig:
        return DropDetectorConfig(self.sigma1_sq, self.p_fa, self.min_consecutive)

    @property
    def kernel(self) -> KernelConfig:
        if self.spatial:
            return KernelConfig((self.bandwidth, self.spatial_bandwidth, self.spatial_bandwidth))
        return KernelConfig(self.bandwidth)

    @property
    def sparse(self) -> SparseOptions:
        return SparseOptions(n=self.sparse_n, t_nu=self.t_nu)

    @property
    def ekf(self) -> kinetics.EkfConfig:
        return kinetics.EkfConfig(q=self.q, p0=self.p0, init_offset=self.init_offset,
                                  skip=self.skip, tol_state=self.tol_state, window=self.window)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **overrides) -> "PipelineConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(d)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


def load_kinetics(path) -> kinetics.KineticModelParams:
    return kinetics.KineticModelParams.from_dict(json.loads(Path(path).read_text()))


def save_kinetics(params: kinetics.KineticModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class FrameRecord:
    n: int
    r_hat: float
    clusters: int
    single_region: bool
    basis_size: Optional[int] = None


@dataclass
class MeasurementResult:
    id: str
    n_drop: Optional[int]
    threshold: float
    decisions: dict = field(default_factory=dict)
    method: str = "ekf"
    glucose: Optional[float] = None
    g_hat: Optional[float] = None
    frames: list = field(default_factory=list)
    ekf_trace: list = field(default_factory=list)

    @property
    def decision(self) -> Optional[kinetics.ConvergenceDecision]:
        return self.decisions.get(self.method)

    @property
    def n_c(self) -> Optional[int]:
        d = self.decision
        return None if d is None else d.n_c

    @property
    def r_c_hat(self) -> Optional[float]:
        d = self.decision
        return None if d is None else d.r_c_hat

    @property
    def complete(self) -> bool:
        return self.n_drop is not None and self.decision is not None

    @property
    def r_hat(self) -> np.ndarray:
        return np.asarray([f.r_hat for f in self.frames])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "n_D": self.n_drop,
            "threshold": self.threshold,
            "method": self.method,
            "n_C": self.n_c,
            "r_C_hat": self.r_c_hat,
            "g_hat": self.g_hat,
            "glucose": self.glucose,
            "complete": self.complete,
            "decisions": {k: v.to_dict() for k, v in sorted(self.decisions.items())},
            "frames": [asdict(f) for f in self.frames],
        }

    def track_rows(self) -> list:
        """Rows ``(n, r_hat, stage, r_C_hat, P)`` for every segmented frame."""
        ekf = {row[0]: row for row in self.ekf_trace}
        n_c = self.n_c
        rows = []
        for f in self.frames:
            stage = kinetics.CONVERGED if n_c is not None and f.n >= n_c else kinetics.DECAY
            e = ekf.get(f.n)
            rows.append((f.n, f.r_hat, stage, None if e is None else e[1], None if e is None else e[2]))
        return rows


def features(frame: np.ndarray, spatial: bool) -> np.ndarray:
    x = vectorize(frame)
    if not spatial:
        return x
    rows, cols = frame.shape
    return np.column_stack([x, pixel_coordinates(rows, cols)])


def segment_frame(frame: np.ndarray, cfg: PipelineConfig):
    """Segment one normalised frame; returns ``(assignment, clusters, result)``."""
    result, clusters = segment(features(frame, cfg.spatial), cfg.variant, cfg.kernel,
                               sparse=cfg.sparse)
    return roi.assign(clusters), clusters, result


def run_pipeline(measurement: Measurement, cfg: PipelineConfig,
                 params: Optional[kinetics.KineticModelParams] = None,
                 curve: Optional[calibrate.CalibrationCurve] = None,
                 methods: Sequence[str] = (), mid: str = "measurement",
                 max_frames: Optional[int] = None) -> MeasurementResult:
    """Process frames in order until the configured method converges.

    Frames before the drop are only used for detection.  Extra ``methods``
    are tracked on the same remission trace, and processing continues until
    all of them have decided (or the frames run out).
    """
    track = [cfg.method] + [m for m in methods if m != cfg.method]
    if "ekf" in track and params is None:
        raise ValueError("the EKF needs kinetic model parameters")
    frames, calib = preprocess(measurement, cfg.bin_size)
    if max_frames is not None:
        frames = frames[:max_frames]
    sigma1_sq = cfg.sigma1_sq if cfg.sigma1_sq is not None else estimate_sigma1_sq(calib)
    detector = DropDetector(cfg.detector, frames[0].size, sigma1_sq)
    res = MeasurementResult(mid, None, detector.threshold, method=cfg.method,
                            glucose=measurement.glucose)

    n = 0
    while n < len(frames) and detector.push(n, frames[n]) is None:
        n += 1
    if detector.n_drop is None:
        return res
    n_drop = res.n_drop = detector.n_drop

    monitors = {}
    if "standard" in track:
        monitors["standard"] = kinetics.SlopeMonitor(n_drop, cfg.t_slope, cfg.window)
    if "ekf" in track:
        monitors["ekf"] = kinetics.EkfTracker(n_drop, params, cfg.ekf)
    for n in range(n_drop, len(frames)):
        assignment, clusters, result = segment_frame(frames[n], cfg)
        basis = None if result.basis is None else int(result.basis.N)
        res.frames.append(FrameRecord(n, assignment.r_hat, len(clusters), assignment.single_region, basis))
        for name, mon in monitors.items():
            if name not in res.decisions:
                decision = mon.push(n, assignment.r_hat)
                if decision is not None:
                    res.decisions[name] = decision
        ekf = monitors.get("ekf")
        if ekf is not None and ekf.state is not None and n >= ekf.n0:
            res.ekf_trace.append((n, ekf.state.r_c, ekf.state.P))
        if len(res.decisions) == len(monitors):
            break
    if curve is not None and res.r_c_hat is not None:
        res.g_hat = calibrate.map_glucose(curve, res.r_c_hat)
    return res


# -- training ---------------------------------------------------------------------

@dataclass
class TrainingResult:
    params: kinetics.KineticModelParams
    curve: calibrate.CalibrationCurve
    fits: list


def _trace_for_training(m: Measurement, cfg: PipelineConfig, mid: str):
    # run until the slope rule fires, plus one window, so the curve has flattened
    res = run_pipeline(m, cfg.replace(method="standard"), mid=mid)
    if res.n_drop is None:
        return res, None
    stop = res.n_c
    r = res.r_hat
    if stop is not None:
        frames, _ = preprocess(m, cfg.bin_size)
        extra = range(stop + 1, min(stop + 1 + cfg.window, len(frames)))
        tail = [segment_frame(frames[n], cfg)[0].r_hat for n in extra]
        r = np.concatenate([r, tail])
    return res, r


def train(measurements: Sequence[tuple[str, Measurement]], cfg: PipelineConfig,
          source: Optional[str] = None) -> TrainingResult:
    """Fit kinetic parameters and the calibration curve on a training split.

    Each trace is fitted with the exponential model from ``skip`` frames after
    the drop; the rate line is regressed on the fitted end points, with the
    median fit residual variance as measurement noise.  The calibration curve
    then maps the configured method's converged remission to glucose.
    """
    traces = []
    fits = []
    for mid, m in measurements:
        if m.glucose is None:
            raise ValueError(f"{mid}: training measurement without glucose truth")
        res, r = _trace_for_training(m, cfg, mid)
        if r is None:
            log.warning("%s: no drop detected; skipped", mid)
            continue
        fit = kinetics.fit_exponential(r[cfg.skip:]) if len(r) - cfg.skip >= 10 else None
        traces.append((mid, m.glucose, res.n_drop, r))
        if fit is not None and fit.ok:
            fits.append((mid, fit))
    if len(fits) < 2:
        raise ValueError("not enough usable training traces")
    base = kinetics.regress_tau([f.r_c for _, f in fits], [f.tau for _, f in fits])
    noise = float(np.median([f.noise_var for _, f in fits]))
    params = kinetics.KineticModelParams(base.delta_tau, base.tau0, max(noise, 1e-6))

    r_c, g = [], []
    for mid, glucose, n_drop, r in traces:
        decision = _converge(r, n_drop, cfg, params)
        if decision is not None:
            r_c.append(decision.r_c_hat)
            g.append(glucose)
    curve = calibrate.fit(r_c, g, source_dataset=source)
    return TrainingResult(params, curve, fits)


def _converge(r: np.ndarray, n_drop: int, cfg: PipelineConfig, params):
    full = np.concatenate([np.full(n_drop, np.nan), r])
    if cfg.method == "standard":
        return kinetics.standard_convergence(full, n_drop, cfg.t_slope, cfg.window)
    return kinetics.run_ekf(full, n_drop, params, cfg.ekf)[0]


# -- evaluation ---------------------------------------------------------------------

def _run_one(args):
    mid, m, cfg, params, curve, methods = args
    return run_pipeline(m, cfg, params, curve, methods=methods, mid=mid)


def run_many(items: Sequence[tuple[str, Measurement]], cfg: PipelineConfig, params=None, curve=None,
             methods: Sequence[str] = (), jobs: int = 1) -> list[MeasurementResult]:
    """Run the pipeline over many measurements; results come back sorted by id."""
    work = [(mid, m, cfg, params, curve, tuple(methods)) for mid, m in items]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    return sorted(results, key=lambda r: r.id)


def report(results: Sequence[MeasurementResult]) -> metrics.EvaluationReport:
    done = [r for r in results if r.g_hat is not None and r.glucose is not None]
    if not done:
        raise ValueError("no measurement produced a glucose estimate")
    g = [r.glucose for r in done]
    e = [r.g_hat for r in done]
    rc = [r.r_c_hat for r in done]
    return metrics.evaluate(g, e, rc)


def write_results(results: Sequence[MeasurementResult], path) -> None:
    payload = {"version": CONFIG_VERSION, "results": [r.to_dict() for r in results]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
