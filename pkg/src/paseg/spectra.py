"""Chromophore absorption spectra and class-wise mean spectra."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .core import LabelMap, PasegError, SpectralCube, TissueClass


class SpectrumDomainError(PasegError, ValueError):
    pass


class EmptyClassError(PasegError, ValueError):
    pass


class UndefinedCorrelationError(PasegError, ValueError):
    pass


@dataclass(frozen=True)
class ChromophoreSpectrum:
    name: str
    wavelengths_nm: tuple[float, ...]
    absorption: tuple[float, ...]

    def __post_init__(self):
        if len(self.wavelengths_nm) != len(self.absorption) or len(self.absorption) < 2:
            raise ValueError("need at least two (wavelength, absorption) pairs")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if min(self.absorption) <= 0:
            raise ValueError("absorption values must be positive")

    def __call__(self, wavelength_nm):
        return interpolate(self, wavelength_nm)


def interpolate(spectrum: ChromophoreSpectrum, wavelength_nm):
    """Piecewise-linear lookup; accepts a scalar or an array of wavelengths."""
    lam = np.asarray(wavelength_nm, dtype=float)
    lo, hi = spectrum.wavelengths_nm[0], spectrum.wavelengths_nm[-1]
    if np.any(lam < lo) or np.any(lam > hi):
        raise SpectrumDomainError(f"{spectrum.name}: wavelength outside [{lo}, {hi}] nm")
    out = np.interp(lam, spectrum.wavelengths_nm, spectrum.absorption)
    return float(out) if out.ndim == 0 else out


def parse_chromophore(text: str) -> ChromophoreSpectrum:
    """Parse the asset format: a ``# name`` line, further ``#`` comments, then ``wavelength value`` rows."""
    name = None
    wl, ab = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if name is None:
                name = line.lstrip("#").strip()
            continue
        w, v = line.split()
        wl.append(float(w))
        ab.append(float(v))
    if name is None:
        raise ValueError("chromophore file lacks a '# name' line")
    return ChromophoreSpectrum(name, tuple(wl), tuple(ab))


def load_chromophore(path) -> ChromophoreSpectrum:
    return parse_chromophore(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def reference_spectrum(name: str) -> ChromophoreSpectrum:
    """Bundled literature spectrum: ``oxyhemoglobin``, ``deoxyhemoglobin`` or ``melanin``."""
    text = resources.files("paseg.data").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return parse_chromophore(text)


def normalize(spectrum) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant spectrum maps to all zeros."""
    s = np.asarray(spectrum, dtype=float)
    span = s.max() - s.min()
    if span == 0:
        return np.zeros_like(s)
    return (s - s.min()) / span


def mean_class_spectrum(cube: SpectralCube, labels: LabelMap, cls: TissueClass) -> np.ndarray:
    mask = labels.values == int(cls)
    if not mask.any():
        raise EmptyClassError(f"class {TissueClass(cls).name} does not occur in the label map")
    mean = cube.values[:, mask].astype(np.float64).mean(axis=1)
    return normalize(mean)


def spectral_similarity(a, b) -> float:
    """Pearson correlation between two spectra."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise ValueError("spectra must be 1-D, of equal length and at least 3 long")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant spectrum")
    return float(np.clip(da @ db / (na * nb), -1.0, 1.0))
