"""Frame containers, normalisation, binning and the on-disk frame format.

Frames are stored as ``(M_x, M_y)`` float arrays.  Vectorisation is
column-major (Fortran order), so pixel ``l`` sits at row ``l % M_x`` and
column ``l // M_x``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"GLKF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FrameFormatError(ValueError):
    """Raised for malformed frame containers or sidecars."""


@dataclass
class Frame:
    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError(f"frame must be a non-empty 2-d grid, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("frame contains non-finite pixels")
        if self.index < 0:
            raise ValueError("frame index must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def size(self) -> int:
        return self.pixels.size


@dataclass
class Measurement:
    """A timed frame sequence plus the dry-strip calibration frames.

    ``frames`` and ``calibration`` are ``(N, M_x, M_y)`` stacks.  Frame ``n``
    of the measurement is ``frames[n]``; calibration frames are not indexed.
    """

    frames: np.ndarray
    calibration: np.ndarray
    sample_rate: float = 30.0
    resolution: float = 30.0
    bin_size: int = 1
    glucose: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.calibration = np.asarray(self.calibration, dtype=float)
        if self.frames.ndim != 3 or self.calibration.ndim != 3:
            raise ValueError("frames and calibration must be (N, M_x, M_y) stacks")
        if len(self.calibration) == 0:
            raise ValueError("a measurement needs at least one calibration frame")
        if self.frames.shape[1:] != self.calibration.shape[1:]:
            raise ValueError("calibration frames and frames differ in size")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame(self, n: int) -> Frame:
        return Frame(self.frames[n], n)


def calibration_mean(calibration: np.ndarray) -> np.ndarray:
    """Pixel-wise mean over the calibration frames."""
    calibration = np.asarray(calibration, dtype=float)
    if calibration.ndim == 2:
        return calibration.copy()
    return calibration.mean(axis=0)


def normalize(raw: Frame, reference: np.ndarray | Frame) -> Frame:
    """Relative remission in percent: ``100 * raw / reference`` clamped to [0, 100]."""
    ref = reference.pixels if isinstance(reference, Frame) else np.asarray(reference, dtype=float)
    if ref.shape != raw.shape:
        raise ValueError(f"dimension mismatch: frame {raw.shape} vs reference {ref.shape}")
    if np.any(ref <= 0):
        raise ValueError("calibration reference must be strictly positive")
    return Frame(np.clip(100.0 * raw.pixels / ref, 0.0, 100.0), raw.index)


def normalize_stack(stack: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize` over an ``(N, M_x, M_y)`` stack."""
    reference = np.asarray(reference, dtype=float)
    if stack.shape[1:] != reference.shape:
        raise ValueError(f"dimension mismatch: frames {stack.shape[1:]} vs reference {reference.shape}")
    if np.any(reference <= 0):
        raise ValueError("calibration reference must be strictly positive")
    return np.clip(100.0 * stack / reference, 0.0, 100.0)


def bin_frame(frame: Frame, size: int) -> Frame:
    """Average non-overlapping ``size x size`` blocks."""
    return Frame(bin_pixels(frame.pixels, size), frame.index)


def bin_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    """Block-mean binning of a 2-d grid or an ``(N, M_x, M_y)`` stack."""
    if int(size) != size or size < 1:
        raise ValueError("bin size must be a positive integer")
    size = int(size)
    pixels = np.asarray(pixels, dtype=float)
    rows, cols = pixels.shape[-2:]
    if rows % size or cols % size:
        raise ValueError(f"bin size {size} does not divide frame dimensions {rows}x{cols}")
    if size == 1:
        return pixels.copy()
    lead = pixels.shape[:-2]
    blocks = pixels.reshape(*lead, rows // size, size, cols // size, size)
    return blocks.mean(axis=(-3, -1))


def vectorize(frame: Frame | np.ndarray) -> np.ndarray:
    """Column-major pixel vector of length ``M_x * M_y``."""
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    return pixels.ravel(order="F")


def unvectorize(values: Sequence[float], rows: int, cols: int, index: int = 0) -> Frame:
    values = np.asarray(values, dtype=float)
    if values.size != rows * cols:
        raise ValueError(f"cannot reshape {values.size} values into {rows}x{cols}")
    return Frame(values.reshape((rows, cols), order="F"), index)


def pixel_coordinates(rows: int, cols: int) -> np.ndarray:
    """``(L, 2)`` row/column coordinates in vectorisation order."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.column_stack([vectorize(r), vectorize(c)]).astype(float)


def preprocess(measurement: Measurement, bin_size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Normalise and bin a measurement.

    Returns ``(frames, calibration)`` stacks in percent remission.  Each
    calibration frame is normalised against the mean of the *other*
    calibration frames, so it carries the same reference noise as a
    measurement frame; the drop detector estimates the pre-reaction variance
    from them.  With a single calibration frame it is normalised against
    itself.
    """
    size = measurement.bin_size if bin_size is None else bin_size
    cal = measurement.calibration
    reference = calibration_mean(cal)
    frames = bin_pixels(normalize_stack(measurement.frames, reference), size)
    n_cal = len(cal)
    if n_cal > 1:
        others = (cal.sum(axis=0)[None] - cal) / (n_cal - 1)
        if np.any(others <= 0):
            raise ValueError("calibration reference must be strictly positive")
        held_out = np.clip(100.0 * cal / others, 0.0, 100.0)
    else:
        held_out = normalize_stack(cal, reference)
    return frames, bin_pixels(held_out, size)


# -- container I/O ------------------------------------------------------------

def sidecar_path(container: str | Path) -> Path:
    return Path(container).with_suffix(".json")


def write_container(path: str | Path, measurement: Measurement) -> Path:
    """Write a ``GLKF`` container and its JSON sidecar; returns the container path."""
    path = Path(path)
    stack = np.concatenate([measurement.calibration, measurement.frames], axis=0)
    n_f, rows, cols = stack.shape
    payload = np.ascontiguousarray(stack.transpose(0, 2, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols, n_f))
        fh.write(payload.tobytes())
    sidecar = {
        "sample_rate_fps": float(measurement.sample_rate),
        "resolution_um_per_px": float(measurement.resolution),
        "bin_size": int(measurement.bin_size),
        "glucose_mg_dl": None if measurement.glucose is None else float(measurement.glucose),
        "calibration_frame_count": int(len(measurement.calibration)),
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_container(path: str | Path) -> Measurement:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, version, rows, cols, n_f = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FrameFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n_f * rows * cols
    if len(data) != expected:
        raise FrameFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(float)
    stack = flat.reshape(n_f, cols, rows).transpose(0, 2, 1)

    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError as exc:
        raise FrameFormatError(f"{path}: missing sidecar {side}") from exc
    n_cal = int(meta.get("calibration_frame_count", 0))
    if not 0 < n_cal < n_f:
        raise FrameFormatError(f"{path}: calibration_frame_count {n_cal} out of range")
    return Measurement(
        frames=stack[n_cal:],
        calibration=stack[:n_cal],
        sample_rate=float(meta["sample_rate_fps"]),
        resolution=float(meta.get("resolution_um_per_px", 0.0)),
        bin_size=int(meta.get("bin_size", 1)),
        glucose=meta.get("glucose_mg_dl"),
    )
