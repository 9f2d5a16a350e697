"""Pulse-energy correction, acutance-based section selection and co-registration cropping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PasegError, SpectralCube, WavelengthAxis


class PreprocessError(PasegError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Frames (each (H, W) or (C, H, W)) with one laser pulse energy per frame, in mJ."""

    frames: Sequence[np.ndarray]
    pulse_energies: Sequence[float]

    def __post_init__(self):
        if len(self.frames) != len(self.pulse_energies):
            raise PreprocessError(
                f"{len(self.frames)} frames but {len(self.pulse_energies)} pulse energies"
            )
        if any(not e > 0 for e in self.pulse_energies):
            raise PreprocessError("pulse energies must be positive")


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    height: int
    width: int


def energy_correct(seq: FrameSequence) -> list[np.ndarray]:
    return [np.asarray(f) / e for f, e in zip(seq.frames, seq.pulse_energies)]


def acutance(image) -> float:
    """Mean gradient magnitude.

    Forward differences everywhere except the last row/column, which reuse the
    backward difference.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise PreprocessError(f"acutance needs a 2-D image of at least 2x2, got {img.shape}")
    dy = np.empty_like(img)
    dy[:-1] = img[1:] - img[:-1]
    dy[-1] = dy[-2]
    dx = np.empty_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dx[:, -1] = dx[:, -2]
    return float(np.sqrt(dx * dx + dy * dy).mean())


def section_bounds(n_frames: int, n_sections: int) -> list[tuple[int, int]]:
    """Contiguous near-equal parts; the first ``n_frames % n_sections`` parts get one extra frame."""
    base, extra = divmod(n_frames, n_sections)
    bounds, start = [], 0
    for i in range(n_sections):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def _sharpness_image(avg: np.ndarray) -> np.ndarray:
    # multispectral frames are judged on their mean over wavelengths
    return avg.mean(axis=0) if avg.ndim == 3 else avg


TIE_TOLERANCE = 1e-12


def select_best_section(seq: FrameSequence, n_sections: int = 4) -> np.ndarray:
    """Average each section and return the sharpest average (lowest index on ties)."""
    n = len(seq.frames)
    if n_sections < 1 or n < n_sections:
        raise PreprocessError(f"need at least {n_sections} frames, got {n}")
    frames = np.asarray(seq.frames, dtype=np.float64)
    best, best_score = None, 0.0
    for start, stop in section_bounds(n, n_sections):
        avg = frames[start:stop].mean(axis=0)
        score = acutance(_sharpness_image(avg))
        # scores within rounding of the best count as ties, which go to the earlier section
        if best is None or score > best_score + TIE_TOLERANCE * max(abs(best_score), 1.0):
            best, best_score = avg, score
    return best


def coregister_crop(pa: SpectralCube, spec: CropSpec) -> SpectralCube:
    if (spec.top < 0 or spec.left < 0 or spec.height < 1 or spec.width < 1
            or spec.top + spec.height > pa.height or spec.left + spec.width > pa.width):
        raise PreprocessError(f"crop {spec} does not fit a {pa.height}x{pa.width} image")
    values = pa.values[:, spec.top:spec.top + spec.height, spec.left:spec.left + spec.width]
    return SpectralCube(values.copy(), pa.axis)


def preprocess_sequence(seq: FrameSequence, crop: CropSpec | None = None, n_sections: int = 4,
                        axis=None) -> SpectralCube:
    """Energy correction, then best-section averaging, then cropping, for (C, H, W) frames."""
    corrected = FrameSequence(energy_correct(seq), [1.0] * len(seq.frames))
    best = select_best_section(corrected, n_sections)
    if best.ndim == 2:
        best = best[None]
    cube = SpectralCube(best.astype(np.float32), axis or WavelengthAxis(count=best.shape[0]))
    return coregister_crop(cube, crop) if crop else cube
