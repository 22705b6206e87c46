"""Synthetic test-strip measurements with known ground truth.

A scene is a dry strip (background) with a circular reaction region, a
ring of edge pixels that mixes region and background, and small bubbles
inside the region that stay dry.  Before the drop every pixel shows the
background; afterwards the region follows the kinetic model with a rate set
by its converged remission.  Frames are produced in raw sensor counts
through a per-pixel gain map, so normalisation against the calibration
frames is exercised as it would be on real data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .frames import Measurement, write_container
from .kinetics import KineticModelParams, model_eval

BACKGROUND, ROI, EDGE, ARTEFACT = 0, 1, 2, 3
G_MIN, G_MAX = 20.0, 600.0
RAW_SCALE = 1000.0
DEFAULT_LEVELS = tuple(float(g) for g in np.linspace(50, 550, 10))


@dataclass(frozen=True)
class SceneConfig:
    rows: int = 20
    cols: int = 20
    roi_radius: float = 5.5
    radius_jitter: float = 0.5
    center_jitter: float = 2.0
    edge_width: float = 1.0
    artefacts: int = 1
    artefact_radius: tuple = (0.8, 1.3)
    noise_sigma: float = 0.5
    background: float = 100.0
    drift: float = -1.0
    gain_range: tuple = (0.7, 0.9)
    n_frames: int = 580
    n_calibration: int = 10
    n_drop: int = 60
    drop_jitter: int = 10
    sample_rate: float = 30.0
    resolution: float = 30.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("frame dimensions must be positive")
        if self.roi_radius <= 0 or self.edge_width < 0:
            raise ValueError("radii must be positive")
        reach = self.roi_radius + self.radius_jitter + self.edge_width + self.center_jitter
        if 2 * reach > min(self.rows, self.cols) + 1:
            raise ValueError("ROI and edge ring do not fit in the frame")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.artefact_radius
        if self.artefacts < 0 or not 0 < lo <= hi:
            raise ValueError("invalid artefact settings")
        if not (0 <= self.n_drop - self.drop_jitter and self.n_drop + self.drop_jitter < self.n_frames):
            raise ValueError("drop index must fall inside the measurement")
        if self.n_calibration < 1:
            raise ValueError("need at least one calibration frame")


@dataclass(frozen=True)
class KineticDefaults:
    """Generator chemistry: rate line and how far the drop frame has already darkened."""

    delta_tau: float = 0.00044
    tau0: float = -0.0498
    drop_fraction: float = 0.3
    r_c_at_min: float = 95.0
    r_c_at_max: float = 45.0

    def r_c(self, g):
        slope = (self.r_c_at_max - self.r_c_at_min) / (G_MAX - G_MIN)
        return self.r_c_at_min + slope * (np.asarray(g, dtype=float) - G_MIN)

    def params(self) -> KineticModelParams:
        return KineticModelParams(self.delta_tau, self.tau0)


@dataclass
class GroundTruth:
    glucose: float
    r_c: float
    r_d: float
    tau: float
    n_drop: int
    roi_center: tuple
    roi_radius: float
    mask: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("mask")
        d["roi_center"] = [float(v) for v in self.roi_center]
        return d


def background_level(scene: SceneConfig, n, n_drop: int = 0):
    """Dry-strip level: constant until the drop, then a linear drift reaching
    ``background + drift`` at the last frame."""
    n = np.asarray(n, dtype=float)
    span = max(scene.n_frames - 1 - n_drop, 1)
    return scene.background + scene.drift * np.clip(n - n_drop, 0, None) / span


def roi_curve(truth: GroundTruth, scene: SceneConfig, kin: KineticDefaults, n):
    """Noise-free ROI remission at frames ``n``."""
    n = np.asarray(n, dtype=float)
    post = model_eval(np.maximum(n - truth.n_drop, 0), truth.r_d, truth.r_c, kin.params())
    return np.where(n >= truth.n_drop, post, background_level(scene, n, truth.n_drop))


def _disk(rows, cols, center, radius):
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return (r - center[0]) ** 2 + (c - center[1]) ** 2 <= radius ** 2


def _layout(scene: SceneConfig, rng: np.random.Generator):
    mid = ((scene.rows - 1) / 2.0, (scene.cols - 1) / 2.0)
    center = (mid[0] + rng.uniform(-scene.center_jitter, scene.center_jitter),
              mid[1] + rng.uniform(-scene.center_jitter, scene.center_jitter))
    radius = scene.roi_radius + rng.uniform(-scene.radius_jitter, scene.radius_jitter)
    mask = np.full((scene.rows, scene.cols), BACKGROUND, dtype=np.int8)
    mask[_disk(scene.rows, scene.cols, center, radius + scene.edge_width)] = EDGE
    mask[_disk(scene.rows, scene.cols, center, radius)] = ROI
    for _ in range(scene.artefacts):
        rad = rng.uniform(*scene.artefact_radius)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, max(radius - rad - 1.0, 0.0))
        at = (center[0] + dist * np.cos(ang), center[1] + dist * np.sin(ang))
        mask[_disk(scene.rows, scene.cols, at, rad) & (mask == ROI)] = ARTEFACT
    return center, radius, mask


def generate_measurement(scene: SceneConfig, g: float, kin: KineticDefaults = KineticDefaults(),
                         seed=None) -> tuple[Measurement, GroundTruth]:
    """One measurement at glucose ``g`` (mg/dl), deterministic given ``seed``."""
    if not G_MIN <= g <= G_MAX:
        raise ValueError(f"glucose {g} outside [{G_MIN}, {G_MAX}] mg/dl")
    rng = np.random.default_rng(seed)
    center, radius, mask = _layout(scene, rng)
    n_drop = scene.n_drop + int(rng.integers(-scene.drop_jitter, scene.drop_jitter + 1))
    r_c = float(kin.r_c(g))
    r_d = scene.background - kin.drop_fraction * (scene.background - r_c)
    truth = GroundTruth(float(g), r_c, float(r_d), float(kin.params().tau(r_c)), n_drop,
                        center, float(radius), mask)

    n = np.arange(scene.n_frames)
    bg = background_level(scene, n, n_drop)[:, None, None]
    roi = roi_curve(truth, scene, kin, n)[:, None, None]
    clean = np.where(mask == ROI, roi, bg)
    clean = np.where(mask == EDGE, 0.5 * (roi + bg), clean)

    gain = RAW_SCALE * rng.uniform(*scene.gain_range, size=(scene.rows, scene.cols))
    cal_clean = np.full((scene.n_calibration, scene.rows, scene.cols), scene.background)
    noise_cal = rng.standard_normal(cal_clean.shape)
    noise = rng.standard_normal(clean.shape)
    to_raw = gain / 100.0
    calibration = to_raw * (cal_clean + scene.noise_sigma * noise_cal)
    frames = to_raw * (clean + scene.noise_sigma * noise)
    m = Measurement(frames=np.maximum(frames, 0.0), calibration=calibration,
                    sample_rate=scene.sample_rate, resolution=scene.resolution,
                    bin_size=1, glucose=float(g))
    return m, truth


@dataclass(frozen=True)
class SyntheticCase:
    id: str
    glucose: float
    seed: int

    def generate(self, scene: SceneConfig = SceneConfig(), kin: KineticDefaults = KineticDefaults()):
        return generate_measurement(scene, self.glucose, kin, self.seed)


def generate_dataset(levels: Sequence[float] = DEFAULT_LEVELS, repeats: int = 5,
                     seed: int = 0, prefix: str = "m") -> list[SyntheticCase]:
    """``len(levels) * repeats`` cases, each with its own derived seed."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    for g in levels:
        if not G_MIN <= g <= G_MAX:
            raise ValueError(f"glucose {g} outside [{G_MIN}, {G_MAX}] mg/dl")
    total = len(levels) * repeats
    seeds = np.random.SeedSequence(seed).generate_state(total, dtype=np.uint64) if total else []
    cases = []
    k = 0
    for g in levels:
        for _ in range(repeats):
            cases.append(SyntheticCase(f"{prefix}{k:04d}", float(g), int(seeds[k])))
            k += 1
    return cases


def write_dataset(out_dir, cases: Sequence[SyntheticCase], scene: SceneConfig = SceneConfig(),
                  kin: KineticDefaults = KineticDefaults(), seed: Optional[int] = None) -> Path:
    """Write one container per case plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        m, truth = case.generate(scene, kin)
        name = f"{case.id}.glkf"
        write_container(out / name, m)
        entries.append({"id": case.id, "file": name, "seed": case.seed, "truth": truth.to_dict()})
    manifest = {
        "version": 1,
        "seed": seed,
        "scene": asdict(scene),
        "kinetics": asdict(kin),
        "measurements": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if "measurements" not in manifest:
        raise ValueError(f"{path}: not a dataset manifest")
    return manifest
