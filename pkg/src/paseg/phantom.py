"""Synthetic co-registered PA / US / label phantoms.

Geometry is a stack of horizontal bands (heavy water, membrane, US gel, skin,
other tissue) with elliptical vessels in the tissue and an optional lateral
coupling-artefact wedge. Pixel-valued geometry in :class:`PhantomConfig` and
the site presets refers to a 128-row image; :meth:`PhantomConfig.scaled`
rescales it for other sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import (
    LOCATIONS,
    SIDES,
    SITES,
    ConfigurationError,
    LabelMap,
    Sample,
    SampleMeta,
    SampleRef,
    SpectralCube,
    TissueClass as T,
    UsImage,
    WavelengthAxis,
    write_manifest,
    write_tensor_file,
)
from .spectra import reference_spectrum

REFERENCE_HEIGHT = 128


def default_mu_eff(axis: WavelengthAxis, per_pixel_at_800: float = 0.025) -> tuple[float, ...]:
    """Effective attenuation (1/pixel) falling gently with wavelength."""
    lam = axis.wavelengths
    return tuple(float(v) for v in per_pixel_at_800 * (lam / 800.0) ** -1.2)


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 128
    width: int = 128
    axis: WavelengthAxis = field(default_factory=WavelengthAxis)
    heavy_water_rows: int = 14
    membrane_rows: int = 3
    gel_rows: int = 10
    skin_rows: int = 4
    surface_undulation: float = 4.0
    vessel_count: tuple[int, int] = (1, 4)
    vessel_radius: tuple[float, float] = (2.5, 7.0)
    vessel_depth: tuple[float, float] = (6.0, 50.0)
    so2: tuple[float, float] = (0.5, 1.0)
    mu_eff: tuple[float, ...] | None = None
    noise_std: float = 0.2
    artefact_probability: float = 0.3
    speckle_sigma: float = 0.5
    speckle_correlation: float = 0.0
    edge_gain: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("image dimensions must be positive")
        bands = self.heavy_water_rows + self.membrane_rows + self.gel_rows + self.skin_rows
        if bands + self.surface_undulation >= self.height:
            raise ConfigurationError(
                f"bands ({bands} rows + {self.surface_undulation} undulation) exceed image height {self.height}"
            )
        for name in ("vessel_count", "vessel_radius", "vessel_depth", "so2"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: empty range ({lo}, {hi})")
        if self.vessel_count[0] < 0 or self.vessel_radius[0] <= 0:
            raise ConfigurationError("vessel count must be >= 0 and radius > 0")
        if not 0 <= self.so2[0] <= self.so2[1] <= 1:
            raise ConfigurationError("so2 range must lie in [0, 1]")
        if self.noise_std < 0 or self.speckle_sigma < 0:
            raise ConfigurationError("noise_std and speckle_sigma must be >= 0")
        if not 0 <= self.artefact_probability <= 1:
            raise ConfigurationError("artefact_probability must be in [0, 1]")
        if self.mu_eff is not None and len(self.mu_eff) != self.axis.count:
            raise ConfigurationError(f"mu_eff has {len(self.mu_eff)} entries, axis has {self.axis.count}")

    @property
    def scale(self) -> float:
        return self.height / REFERENCE_HEIGHT

    def attenuation(self) -> np.ndarray:
        if self.mu_eff is not None:
            return np.asarray(self.mu_eff, dtype=float)
        return np.asarray(default_mu_eff(self.axis), dtype=float) / self.scale

    @classmethod
    def scaled(cls, height: int, width: int | None = None, **overrides) -> "PhantomConfig":
        """Default geometry resized for a ``height`` x ``width`` image."""
        width = width or height
        s = height / REFERENCE_HEIGHT
        base = cls()
        kw = dict(
            height=height,
            width=width,
            heavy_water_rows=max(1, round(base.heavy_water_rows * s)),
            membrane_rows=max(1, round(base.membrane_rows * s)),
            gel_rows=max(1, round(base.gel_rows * s)),
            skin_rows=max(1, round(base.skin_rows * s)),
            surface_undulation=base.surface_undulation * s,
            vessel_radius=tuple(r * s for r in base.vessel_radius),
            vessel_depth=tuple(d * s for d in base.vessel_depth),
            speckle_correlation=base.speckle_correlation * s,
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class SitePreset:
    """Per-site morphology overrides, in pixels of a 128-row image."""

    site: str
    vessel_count: tuple[int, int] | None = None
    vessel_radius: tuple[float, float] | None = None
    vessel_depth: tuple[float, float] | None = None
    skin_rows: int | None = None
    artefact_probability: float | None = None

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigurationError(f"unknown site {self.site!r}")

    def apply(self, config: PhantomConfig) -> PhantomConfig:
        s = config.scale
        kw = {}
        if self.vessel_count is not None:
            kw["vessel_count"] = self.vessel_count
        if self.vessel_radius is not None:
            kw["vessel_radius"] = tuple(r * s for r in self.vessel_radius)
        if self.vessel_depth is not None:
            kw["vessel_depth"] = tuple(d * s for d in self.vessel_depth)
        if self.skin_rows is not None:
            kw["skin_rows"] = max(1, round(self.skin_rows * s))
        if self.artefact_probability is not None:
            kw["artefact_probability"] = self.artefact_probability
        return replace(config, **kw)


SITE_PRESETS = {
    # many small superficial vessels
    "forearm": SitePreset("forearm", vessel_count=(2, 5), vessel_radius=(2.0, 4.5),
                          vessel_depth=(4.0, 30.0), skin_rows=3),
    "calf": SitePreset("calf", vessel_count=(1, 4), vessel_radius=(3.0, 6.0),
                       vessel_depth=(8.0, 45.0), skin_rows=4),
    # few large deep vessels; the neck scans carry no coupling artefacts
    "neck": SitePreset("neck", vessel_count=(1, 3), vessel_radius=(5.0, 9.0),
                       vessel_depth=(18.0, 60.0), skin_rows=3, artefact_probability=0.0),
}


@dataclass(frozen=True)
class Vessel:
    row: float
    col: float
    radius_rows: float
    radius_cols: float
    so2: float


@dataclass(frozen=True, eq=False)
class PhantomLayout:
    labels: LabelMap
    vessel_index: np.ndarray  # -1 outside vessels
    vessels: tuple[Vessel, ...]
    surface_row: int  # first row below the membrane; fluence depth origin
    skin_top: np.ndarray  # per column
    skin_bottom: np.ndarray
    artefact_side: str | None

    def so2_map(self) -> np.ndarray:
        out = np.full(self.vessel_index.shape, np.nan)
        for i, v in enumerate(self.vessels):
            out[self.vessel_index == i] = v.so2
        return out


def _ellipse_mask(h, w, v: Vessel) -> np.ndarray:
    rr, cc = np.ogrid[:h, :w]
    return ((rr - v.row) / v.radius_rows) ** 2 + ((cc - v.col) / v.radius_cols) ** 2 <= 1.0


def generate_layout(config: PhantomConfig, preset: SitePreset | None, rng: np.random.Generator,
                    max_tries: int = 200) -> PhantomLayout:
    cfg = preset.apply(config) if preset is not None else config
    h, w = cfg.height, cfg.width
    labels = np.full((h, w), T.OTHER_TISSUE, dtype=np.uint8)
    hw_end = cfg.heavy_water_rows
    mem_end = hw_end + cfg.membrane_rows
    labels[:hw_end] = T.HEAVY_WATER
    labels[hw_end:mem_end] = T.MEMBRANE

    cols = np.arange(w)
    amp = rng.uniform(0, cfg.surface_undulation)
    period = rng.uniform(0.8, 2.0) * w
    phase = rng.uniform(0, 2 * np.pi)
    wave = amp * (1 + np.sin(2 * np.pi * cols / period + phase)) / 2
    skin_top = np.round(mem_end + cfg.gel_rows + wave).astype(int)
    skin_bottom = skin_top + cfg.skin_rows
    rows = np.arange(h)[:, None]
    labels[(rows >= mem_end) & (rows < skin_top)] = T.US_GEL
    labels[(rows >= skin_top) & (rows < skin_bottom)] = T.SKIN

    tissue = labels == T.OTHER_TISSUE
    vessel_index = np.full((h, w), -1, dtype=np.int16)
    vessels = []
    n_vessels = int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))
    tries = 0
    while len(vessels) < n_vessels and tries < max_tries:
        tries += 1
        r = rng.uniform(*cfg.vessel_radius)
        aspect = rng.uniform(0.75, 1.3)
        col = rng.uniform(0, w - 1)
        row = skin_bottom[int(round(col))] + rng.uniform(*cfg.vessel_depth)
        v = Vessel(row, col, r, r * aspect, rng.uniform(*cfg.so2))
        mask = _ellipse_mask(h, w, v)
        if not mask.any():
            continue
        # whole ellipse inside the image, inside tissue, and one pixel clear of other vessels
        if (v.row - v.radius_rows < 0 or v.row + v.radius_rows > h - 1
                or v.col - v.radius_cols < 0 or v.col + v.radius_cols > w - 1):
            continue
        if not tissue[mask].all() or (ndimage.binary_dilation(mask) & (vessel_index >= 0)).any():
            continue
        vessel_index[mask] = len(vessels)
        vessels.append(v)
    labels[vessel_index >= 0] = T.BLOOD

    side = None
    if rng.random() < cfg.artefact_probability:
        side = SIDES[int(rng.integers(2))]
        w_top = rng.uniform(0.08, 0.2) * w
        w_bot = w_top + rng.uniform(0.0, 0.15) * w
        r = np.arange(h)[:, None].astype(float)
        width_at = w_top + (w_bot - w_top) * (r - mem_end) / max(h - 1 - mem_end, 1)
        edge = cols[None, :] if side == "left" else (w - 1 - cols)[None, :]
        wedge = (r >= mem_end) & (edge < width_at)
        labels[wedge] = T.COUPLING_ARTEFACT
        vessel_index[wedge] = -1

    return PhantomLayout(LabelMap(labels), vessel_index, tuple(vessels), mem_end,
                         skin_top, skin_bottom, side)


def generate_label_map(config: PhantomConfig, site_preset: SitePreset | None,
                       rng: np.random.Generator) -> LabelMap:
    return generate_layout(config, site_preset, rng).labels


# absorption scale constants, arbitrary units
BLOOD_SCALE = 1e-3
MELANIN_SCALE = 1.0 / 400
SKIN_BASELINE = 0.02
TISSUE_BASELINE = 0.05
TISSUE_BLOOD_FRACTION = 0.04
TISSUE_SO2 = 0.7
CONSTANT_ABSORPTION = {T.HEAVY_WATER: 0.01, T.US_GEL: 0.02, T.MEMBRANE: 0.12}


def blood_absorption(axis: WavelengthAxis, so2) -> np.ndarray:
    """(n_wavelengths,) for scalar sO2, or (n_wavelengths, n) for an array of sO2 values."""
    lam = axis.wavelengths
    hbo2 = reference_spectrum("oxyhemoglobin")(lam) * BLOOD_SCALE
    hb = reference_spectrum("deoxyhemoglobin")(lam) * BLOOD_SCALE
    so2 = np.asarray(so2, dtype=float)
    if so2.ndim == 0:
        return so2 * hbo2 + (1 - so2) * hb
    return so2[None, :] * hbo2[:, None] + (1 - so2[None, :]) * hb[:, None]


def class_absorption(axis: WavelengthAxis) -> dict[T, np.ndarray]:
    """Absorption spectra for every class except blood (which depends on sO2)."""
    lam = axis.wavelengths
    melanin = reference_spectrum("melanin")(lam) * MELANIN_SCALE
    out = {c: np.full(axis.count, v) for c, v in CONSTANT_ABSORPTION.items()}
    out[T.SKIN] = melanin + SKIN_BASELINE
    out[T.OTHER_TISSUE] = TISSUE_BASELINE + TISSUE_BLOOD_FRACTION * blood_absorption(axis, TISSUE_SO2)
    out[T.COUPLING_ARTEFACT] = np.zeros(axis.count)
    return out


def fluence(config: PhantomConfig, surface_row: int) -> np.ndarray:
    """exp(-mu_eff * depth) as (n_wavelengths, height); depth is zero above ``surface_row``."""
    depth = np.maximum(np.arange(config.height) - surface_row, 0).astype(float)
    return np.exp(-config.attenuation()[:, None] * depth[None, :])


def render_pa(labels, config: PhantomConfig, rng: np.random.Generator, so2=None,
              surface_row: int | None = None) -> SpectralCube:
    """Render a PA cube from a label map or a :class:`PhantomLayout`.

    Blood takes its sO2 from the layout's vessels, else from ``so2`` (scalar or
    per-pixel map), else the middle of the configured range.
    """
    if isinstance(labels, PhantomLayout):
        so2 = labels.so2_map() if so2 is None else so2
        surface_row = labels.surface_row if surface_row is None else surface_row
        labels = labels.labels
    lab = labels.values
    if surface_row is None:
        surface_row = config.heavy_water_rows + config.membrane_rows
    if so2 is None:
        so2 = 0.5 * (config.so2[0] + config.so2[1])
    axis = config.axis
    mu_a = np.zeros((axis.count,) + lab.shape)
    for cls, spec in class_absorption(axis).items():
        mask = lab == cls
        mu_a[:, mask] = spec[:, None]
    blood = lab == T.BLOOD
    if blood.any():
        so2_px = np.broadcast_to(np.asarray(so2, dtype=float), lab.shape)[blood]
        mu_a[:, blood] = blood_absorption(axis, so2_px)
    values = mu_a * fluence(config, surface_row)[:, :, None]
    if config.noise_std > 0:
        values = values + rng.normal(0.0, config.noise_std, size=values.shape)
    return SpectralCube(values.astype(np.float32), axis)


ECHOGENICITY = {
    T.BLOOD: 0.32,
    T.SKIN: 0.8,
    T.US_GEL: 0.06,
    T.MEMBRANE: 0.9,
    T.HEAVY_WATER: 0.03,
    T.OTHER_TISSUE: 0.42,
    T.COUPLING_ARTEFACT: 0.03,
}


def boundary_ridges(labels: np.ndarray, gain: float) -> np.ndarray:
    """``gain`` times the largest echogenicity jump to any 4-neighbour."""
    echo = np.vectorize(lambda c: ECHOGENICITY[T(c)])(np.arange(len(T)))[labels]
    jump = np.zeros_like(echo)
    jump[1:] = np.maximum(jump[1:], np.abs(echo[1:] - echo[:-1]))
    jump[:-1] = np.maximum(jump[:-1], np.abs(echo[1:] - echo[:-1]))
    jump[:, 1:] = np.maximum(jump[:, 1:], np.abs(echo[:, 1:] - echo[:, :-1]))
    jump[:, :-1] = np.maximum(jump[:, :-1], np.abs(echo[:, 1:] - echo[:, :-1]))
    return gain * jump


def speckle(shape, sigma: float, correlation: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean log-normal speckle, optionally spatially correlated."""
    z = rng.standard_normal(shape)
    if correlation > 0:
        z = ndimage.gaussian_filter(z, correlation, mode="wrap")
        z /= z.std()
    return np.exp(sigma * z - sigma ** 2 / 2)


def render_us(labels, config: PhantomConfig, rng: np.random.Generator, speckle_enabled: bool = True) -> UsImage:
    if isinstance(labels, PhantomLayout):
        labels = labels.labels
    lab = labels.values
    echo = np.vectorize(lambda c: ECHOGENICITY[T(c)])(np.arange(len(T)))[lab]
    if speckle_enabled and config.speckle_sigma > 0:
        echo = echo * speckle(lab.shape, config.speckle_sigma, config.speckle_correlation, rng)
    image = echo + boundary_ridges(lab, config.edge_gain)
    return UsImage(np.maximum(image, 0).astype(np.float32))


def sample_seed(master: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed: a SeedSequence hash of (master seed, sample index)."""
    return np.random.SeedSequence([master, index])


def sample_id(volunteer: int, site: str, side: str, location: int) -> str:
    return f"v{volunteer:02d}_{site}_{side}_{location}"


def generate_sample(config: PhantomConfig, meta: SampleMeta, seed: np.random.SeedSequence,
                    presets: dict[str, SitePreset] | None = None) -> tuple[Sample, PhantomLayout]:
    presets = SITE_PRESETS if presets is None else presets
    geo, pa_seed, us_seed = (np.random.default_rng(s) for s in seed.spawn(3))
    layout = generate_layout(config, presets.get(meta.site), geo)
    cfg = presets[meta.site].apply(config) if meta.site in presets else config
    pa = render_pa(layout, cfg, pa_seed)
    us = render_us(layout, cfg, us_seed)
    sid = sample_id(meta.volunteer_id, meta.site, meta.side, meta.location_index)
    return Sample(sid, pa, us, layout.labels, meta), layout


@dataclass(frozen=True)
class AcquisitionGrid:
    n_volunteers: int = 10
    sites: tuple[str, ...] = SITES
    sides: tuple[str, ...] = SIDES
    n_locations: int = 3

    def __post_init__(self):
        if self.n_volunteers < 1 or self.n_locations < 1 or not self.sites or not self.sides:
            raise ConfigurationError("acquisition grid counts must be positive")
        if self.n_locations > len(LOCATIONS):
            raise ConfigurationError(f"at most {len(LOCATIONS)} locations per site")

    def metas(self) -> list[SampleMeta]:
        return [SampleMeta(v, site, side, loc)
                for v in range(self.n_volunteers)
                for site in self.sites
                for side in self.sides
                for loc in range(self.n_locations)]


def generate_dataset(config: PhantomConfig, grid: AcquisitionGrid = AcquisitionGrid(),
                     seed: int | None = None, out_dir=None,
                     presets: dict[str, SitePreset] | None = None) -> tuple[list[Sample], Path | None]:
    """Generate the whole acquisition grid; with ``out_dir`` also write PATC files and ``manifest.txt``.

    Sample ``i`` (in grid order) is seeded from ``(seed, i)``, so any subset can
    be regenerated independently of the others.
    """
    seed = config.seed if seed is None else seed
    samples = [generate_sample(config, meta, sample_seed(seed, i), presets)[0]
               for i, meta in enumerate(grid.metas())]
    if out_dir is None:
        return samples, None
    return samples, write_dataset(samples, out_dir)


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    out_dir = Path(out_dir)
    data = out_dir / "samples"
    try:
        data.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {data}: {exc}") from exc
    refs = []
    for s in samples:
        paths = [data / f"{s.id}_{kind}.patc" for kind in ("pa", "us", "labels")]
        try:
            write_tensor_file(paths[0], s.pa.values.astype(np.float32))
            write_tensor_file(paths[1], s.us.values.astype(np.float32))
            write_tensor_file(paths[2], s.labels.values.astype(np.uint8))
        except OSError as exc:
            raise OSError(f"writing sample {s.id} under {data}: {exc}") from exc
        refs.append(SampleRef(s.id, s.meta, *paths))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, refs)
    return manifest


CONFIG_KEYS = {f.name for f in fields(PhantomConfig)} - {"axis"}
