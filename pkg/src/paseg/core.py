"""Domain types, dataset splitting and the on-disk tensor/manifest formats."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class PasegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PasegError, ValueError):
    pass


class FormatError(PasegError):
    """Malformed PATC tensor file. ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LoadError(PasegError):
    pass


class TissueClass(enum.IntEnum):
    BLOOD = 0
    SKIN = 1
    US_GEL = 2
    MEMBRANE = 3
    HEAVY_WATER = 4
    OTHER_TISSUE = 5
    COUPLING_ARTEFACT = 6


N_CLASSES = len(TissueClass)

SITES = ("forearm", "calf", "neck")
SIDES = ("left", "right")
LOCATIONS = (0, 1, 2)


@dataclass(frozen=True)
class WavelengthAxis:
    count: int = 26
    start_nm: float = 700.0
    end_nm: float = 950.0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("wavelength count must be positive")
        if self.count > 1 and not self.end_nm > self.start_nm:
            raise ConfigurationError("wavelength axis must be increasing")

    @property
    def wavelengths(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.start_nm])
        step = (self.end_nm - self.start_nm) / (self.count - 1)
        return self.start_nm + step * np.arange(self.count)


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """Multispectral PA stack, ``values`` shaped (wavelength, height, width)."""

    values: np.ndarray
    axis: WavelengthAxis = field(default_factory=WavelengthAxis)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"cube must be 3-D, got shape {self.values.shape}")
        if self.values.shape[0] != self.axis.count:
            raise ValueError(
                f"cube has {self.values.shape[0]} channels, axis has {self.axis.count}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class UsImage:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"US image must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("US image contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class LabelMap:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() >= N_CLASSES):
            raise ValueError("label map contains invalid class codes")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SampleMeta:
    volunteer_id: int
    site: str
    side: str
    location_index: int

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if self.location_index not in LOCATIONS:
            raise ValueError(f"location index must be one of {LOCATIONS}")


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    pa: SpectralCube
    us: UsImage
    labels: LabelMap
    meta: SampleMeta

    def __post_init__(self):
        shapes = {(self.pa.height, self.pa.width), self.us.values.shape, self.labels.values.shape}
        if len(shapes) != 1:
            raise ValueError(
                f"sample {self.id}: dimension mismatch between PA {self.pa.values.shape[1:]}, "
                f"US {self.us.values.shape} and labels {self.labels.values.shape}"
            )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise ConfigurationError("split lists must be pairwise disjoint")


def split_by_volunteer(
    samples: Sequence[Sample],
    train_volunteers: Iterable[int],
    test_volunteers: Iterable[int],
    n_val: int,
    seed: int = 0,
) -> DatasetSplit:
    """Volunteer-disjoint train/test split; validation images come from the training volunteers."""
    train_v, test_v = set(train_volunteers), set(test_volunteers)
    if train_v & test_v:
        raise ConfigurationError(
            f"volunteers {sorted(train_v & test_v)} are in both the train and test sets"
        )
    pool = [s.id for s in samples if s.meta.volunteer_id in train_v]
    test = [s.id for s in samples if s.meta.volunteer_id in test_v]
    if not 0 <= n_val <= len(pool):
        raise ConfigurationError(f"n_val={n_val} exceeds the {len(pool)} training-volunteer samples")
    rng = np.random.default_rng(seed)
    val_idx = set(rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else set()
    train = [sid for i, sid in enumerate(pool) if i not in val_idx]
    val = [sid for i, sid in enumerate(pool) if i in val_idx]
    return DatasetSplit(tuple(train), tuple(val), tuple(test))


def subsample_split(split: DatasetSplit, n_train: int, n_test: int, seed: int = 0) -> DatasetSplit:
    """Seeded random subset of the train and test lists, order preserved; validation is kept."""
    rng = np.random.default_rng(seed)

    def pick(ids, n):
        if n > len(ids):
            raise ConfigurationError(f"cannot draw {n} samples from {len(ids)}")
        keep = np.sort(rng.choice(len(ids), size=n, replace=False))
        return tuple(ids[i] for i in keep)

    return DatasetSplit(pick(split.train, n_train), split.validation, pick(split.test, n_test))


# --- PATC tensor files -------------------------------------------------------

PATC_MAGIC = b"PATC"
PATC_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_PREFIX = struct.Struct("<4sHBB")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _DTYPE_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported dtype {array.dtype}; use float32, float64 or uint8")
    if array.ndim > 8:
        raise ValueError("at most 8 dimensions are supported")
    if code != 2 and not np.all(np.isfinite(array)):
        raise ValueError("cannot serialise non-finite values")
    header = _PREFIX.pack(PATC_MAGIC, PATC_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _PREFIX.size:
        raise FormatError(f"file shorter than the {_PREFIX.size}-byte header prefix", len(buf))
    magic, version, code, ndim = _PREFIX.unpack_from(buf, 0)
    if magic != PATC_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != PATC_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 6)
    if ndim > 8:
        raise FormatError(f"ndim {ndim} exceeds 8", 7)
    offset = _PREFIX.size
    if len(buf) < offset + 4 * ndim:
        raise FormatError("truncated dimension table", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes", len(buf))
    if len(buf) - offset > nbytes:
        raise FormatError("trailing bytes after payload", offset + nbytes)
    out = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
    return out.reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor_file(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor_file(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- manifests ---------------------------------------------------------------

MANIFEST_FIELDS = ("id", "volunteer", "site", "side", "location", "pa_path", "us_path", "label_path")


@dataclass(frozen=True)
class SampleRef:
    """One manifest record; paths are resolved against the manifest's directory."""

    id: str
    meta: SampleMeta
    pa_path: Path
    us_path: Path
    label_path: Path

    def load(self, axis: WavelengthAxis | None = None) -> Sample:
        try:
            pa = read_tensor_file(self.pa_path)
            us = read_tensor_file(self.us_path)
            labels = read_tensor_file(self.label_path)
        except (OSError, FormatError) as exc:
            raise LoadError(f"sample {self.id}: {exc}") from exc
        if axis is None and pa.ndim == 3:
            axis = WavelengthAxis(count=pa.shape[0])
        try:
            return Sample(self.id, SpectralCube(pa, axis or WavelengthAxis()), UsImage(us),
                          LabelMap(labels), self.meta)
        except ValueError as exc:
            raise LoadError(f"sample {self.id}: {exc}") from exc


def write_manifest(path, refs: Sequence[SampleRef]) -> None:
    path = Path(path)
    root = path.parent
    lines = []
    for r in refs:
        rel = [Path(os.path.relpath(p, root)).as_posix() for p in (r.pa_path, r.us_path, r.label_path)]
        m = r.meta
        lines.append(", ".join([r.id, str(m.volunteer_id), m.site, m.side, str(m.location_index), *rel]))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> list[SampleRef]:
    """Parse a manifest, checking that every referenced file exists.

    Blank lines and lines starting with ``#`` are skipped. Use
    :func:`load_samples` to also load and validate the tensors.
    """
    path = Path(path)
    root = path.parent
    refs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(MANIFEST_FIELDS):
            raise LoadError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(parts)}")
        sid, vol, site, side, loc, *files = parts
        try:
            meta = SampleMeta(int(vol), site, side, int(loc))
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: sample {sid}: {exc}") from exc
        paths = [root / f for f in files]
        for p in paths:
            if not p.is_file():
                raise LoadError(f"sample {sid}: missing file {p}")
        refs.append(SampleRef(sid, meta, *paths))
    return refs


def load_samples(path, axis: WavelengthAxis | None = None) -> list[Sample]:
    return [ref.load(axis) for ref in read_manifest(path)]
