"""Flat ``key = value`` run configuration files.

Keys are dotted by section: ``phantom.*`` (PhantomConfig fields plus
``wavelength_count/start_nm/end_nm``), ``grid.*`` (``volunteers``, ``sites``,
``sides``, ``locations``), ``split.*`` (``test_volunteers``, ``n_val``,
``n_train``, ``n_test``), ``unet.*`` / ``fcnn.*`` (TrainConfig fields) and the
top-level ``seed``. ``#`` starts a comment. Tuples are comma separated.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .core import ConfigurationError, WavelengthAxis
from .phantom import AcquisitionGrid, PhantomConfig
from .trainer import TrainConfig


@dataclass
class SplitConfig:
    test_volunteers: tuple[int, ...] | None = None  # None: the last two volunteers
    n_val: int = 6
    n_train: int = 0  # 0 keeps every training sample
    n_test: int = 0

    def resolve_test(self, n_volunteers: int) -> tuple[int, ...]:
        if self.test_volunteers is not None:
            return tuple(self.test_volunteers)
        return tuple(range(max(n_volunteers - 2, 1), n_volunteers))


@dataclass
class RunConfig:
    seed: int = 7
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    grid: AcquisitionGrid = field(default_factory=AcquisitionGrid)
    split: SplitConfig = field(default_factory=SplitConfig)
    unet: TrainConfig = field(default_factory=lambda: TrainConfig("unet", "PA"))
    fcnn: TrainConfig = field(default_factory=lambda: TrainConfig("fcnn", "PA"))

    def reseed(self, seed: int) -> "RunConfig":
        """The master seed drives phantom generation, splitting and both trainers."""
        self.seed = seed
        self.phantom = replace(self.phantom, seed=seed)
        self.unet = replace(self.unet, seed=seed)
        self.fcnn = replace(self.fcnn, seed=seed)
        return self


def parse_lines(text: str, source: str = "<config>") -> dict[str, tuple[str, str]]:
    """Map key -> (value, "source:line")."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r} (first at {out[key][1]})")
        out[key] = (value, f"{source}:{lineno}")
    return out


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(value: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if value.lower() in ("none", "default", ""):
            return None
        return _coerce(value, non_none[0])
    if origin is tuple:
        items = [v.strip() for v in value.split(",") if v.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_coerce(v, a) for v, a in zip(items, args))
    if tp is bool:
        return _bool(value)
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def _apply(obj, section: str, entries: dict[str, tuple[str, str]], extra=()):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in fields(obj)}
    kw = {}
    for key, (value, where) in entries.items():
        if key in extra:
            continue
        if key not in names or key == "axis":
            raise ConfigurationError(f"{where}: unknown key {section}.{key}")
        try:
            kw[key] = _coerce(value, hints[key])
        except ValueError as exc:
            raise ConfigurationError(f"{where}: {section}.{key}: {exc}") from None
    try:
        return replace(obj, **kw)
    except (ValueError, TypeError) as exc:
        where = ", ".join(w for _, w in entries.values())
        raise ConfigurationError(f"{where}: invalid {section} settings: {exc}") from None


def load_run_config(path=None, text: str | None = None, overrides=()) -> RunConfig:
    """Parse a config file (or ``text``); ``overrides`` are ``"key=value"`` strings applied last."""
    source = str(path) if path is not None else "<config>"
    if text is None:
        text = Path(path).read_text(encoding="utf-8") if path is not None else ""
    entries = parse_lines(text, source)
    for pair in overrides:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        entries[key.strip()] = (value.strip(), f"--set {pair}")
    sections: dict[str, dict] = {}
    cfg = RunConfig()
    for key, (value, where) in entries.items():
        if key == "seed":
            try:
                cfg.seed = int(value)
            except ValueError:
                raise ConfigurationError(f"{where}: seed must be an integer") from None
            continue
        section, _, name = key.partition(".")
        if section not in ("phantom", "grid", "split", "unet", "fcnn") or not name:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        if name == "seed":
            raise ConfigurationError(f"{where}: {key} is derived; set the top-level seed instead")
        sections.setdefault(section, {})[name] = (value, where)

    ph = sections.get("phantom", {})
    wl = {k: ph[k] for k in ("wavelength_count", "wavelength_start_nm", "wavelength_end_nm") if k in ph}
    try:
        axis = WavelengthAxis(int(wl["wavelength_count"][0]) if "wavelength_count" in wl else 26,
                              float(wl["wavelength_start_nm"][0]) if "wavelength_start_nm" in wl else 700.0,
                              float(wl["wavelength_end_nm"][0]) if "wavelength_end_nm" in wl else 950.0)
    except ValueError as exc:
        where = ", ".join(w for _, w in wl.values())
        raise ConfigurationError(f"{where}: invalid wavelength axis: {exc}") from None
    base = cfg.phantom
    if "height" in ph or "width" in ph:
        # geometry defaults follow the image size unless given explicitly
        try:
            h = int(ph["height"][0]) if "height" in ph else base.height
            w = int(ph["width"][0]) if "width" in ph else h
            base = PhantomConfig.scaled(h, w)
        except ValueError as exc:
            where = ", ".join(ph[k][1] for k in ("height", "width") if k in ph)
            raise ConfigurationError(f"{where}: invalid image size: {exc}") from None
    cfg.phantom = _apply(replace(base, axis=axis) if wl else base, "phantom", ph, extra=wl)

    gr = sections.get("grid", {})
    grid_map = {"volunteers": "n_volunteers", "locations": "n_locations"}
    cfg.grid = _apply(cfg.grid, "grid", {grid_map.get(k, k): v for k, v in gr.items()})
    cfg.split = _apply(cfg.split, "split", sections.get("split", {}))
    for arch in ("unet", "fcnn"):
        if {"architecture", "input_mode"} & set(sections.get(arch, {})):
            raise ConfigurationError(f"{source}: {arch}.architecture and {arch}.input_mode are set per command")
        cfg_arch = _apply(getattr(cfg, arch), arch, sections.get(arch, {}))
        setattr(cfg, arch, cfg_arch)
    return cfg.reseed(cfg.seed)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_run_config(cfg: RunConfig) -> str:
    """Fully resolved configuration in the same ``key = value`` format."""
    lines = [f"seed = {cfg.seed}"]
    ph = cfg.phantom
    lines += [f"phantom.wavelength_count = {ph.axis.count}",
              f"phantom.wavelength_start_nm = {ph.axis.start_nm!r}",
              f"phantom.wavelength_end_nm = {ph.axis.end_nm!r}"]
    lines += [f"phantom.{f.name} = {_fmt(getattr(ph, f.name))}" for f in fields(ph)
              if f.name not in ("axis", "seed")]
    g = cfg.grid
    lines += [f"grid.volunteers = {g.n_volunteers}", f"grid.sites = {_fmt(g.sites)}",
              f"grid.sides = {_fmt(g.sides)}", f"grid.locations = {g.n_locations}"]
    lines += [f"split.{f.name} = {_fmt(getattr(cfg.split, f.name))}" for f in fields(cfg.split)]
    skip = {"architecture", "input_mode", "seed"}
    for arch, unused in (("unet", set()), ("fcnn", {"augmentation", "dice_weight", "base_channels"})):
        tc = getattr(cfg, arch)
        lines += [f"{arch}.{f.name} = {_fmt(getattr(tc, f.name))}" for f in fields(tc)
                  if f.name not in skip | unused]
    return "\n".join(lines) + "\n"
