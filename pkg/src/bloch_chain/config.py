"""Run configuration: an INI file with one section per pipeline stage.

Values may be plain numbers or multiples of pi (``pi``, ``40pi``,
``0.37147*pi``).  ``auto`` leaves a setting to the library default.  Any key
can be overridden from the command line with ``section.key=value``.

Example::

    [geometry]
    profile = cosine
    A2 = 0.3

    [wave]
    k_min = pi
    k_max = 40pi
    dk = 0.37147pi
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import WaveguideProfile, cosine_profile, flat_profile


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_PI = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)?\s*\*?\s*pi\s*$")


def parse_number(text) -> float:
    """``float`` that also accepts multiples of pi."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _PI.match(str(text))
    if m:
        return (float(m.group(1)) if m.group(1) else 1.0) * np.pi
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _optional(text, cast):
    if text is None or str(text).strip().lower() in ("auto", "none", ""):
        return None
    return cast(text)


def _number_list(text) -> list[float]:
    if text is None or not str(text).strip():
        return []
    return [parse_number(v) for v in str(text).replace(",", " ").split()]


def _bool(text) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class GeometryConfig:
    profile: str = "cosine"
    A2: float = 0.3
    width: float = 1.0

    def build(self) -> WaveguideProfile:
        if self.profile == "cosine":
            try:
                return cosine_profile(self.A2)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.profile == "flat":
            return flat_profile(self.width)
        raise ConfigError(f"unknown profile {self.profile!r} (cosine or flat)")


@dataclass
class ClassicalConfig:
    particles: int = 10_000
    horizon: float = 5000.0
    fine_until: float = 50.0
    fine_step: float = 0.5
    coarse_step: float = 5.0
    seed: int = 20240601
    transient_cut: float | None = None
    bins: int = 81
    batches: int = 20

    def checkpoints(self) -> np.ndarray:
        fine = np.arange(0.0, min(self.fine_until, self.horizon) + 0.5 * self.fine_step, self.fine_step)
        coarse = np.arange(fine[-1] + self.coarse_step, self.horizon + 0.5 * self.coarse_step, self.coarse_step)
        times = np.concatenate([fine, coarse])
        return times[times <= self.horizon * (1 + 1e-12)]


@dataclass
class WaveConfig:
    k_min: float = np.pi
    k_max: float = 40 * np.pi
    dk: float = 0.37147 * np.pi
    n_evan: int | None = None
    n_slices: int | None = None
    unimodular_tol: float = 1e-6
    inf_tol: float = 1e-8
    symmetry_window: float = 1e-4
    method: str = "coupled"
    workers: int = 1
    cache: bool = True


@dataclass
class AnalysisConfig:
    g: float = 2.0
    kernel: str = "gaussian"
    width: float = np.pi
    edges: str = "renormalize"
    fit_k_min: float | None = None
    fit_k_max: float | None = None
    D1: float | None = None
    window_centers: list = field(default_factory=list)
    window_samples: int = 153
    window_r: float = 300.0
    r_values: list = field(default_factory=lambda: [float(r) for r in range(2, 301, 2)])
    slope_k_min: float = 36 * np.pi
    slope_k_max: float = 40 * np.pi
    slope_points: int = 100


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    classical: ClassicalConfig = field(default_factory=ClassicalConfig)
    wave: WaveConfig = field(default_factory=WaveConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output: str = "out"

    def validate(self) -> "RunConfig":
        c, w, a = self.classical, self.wave, self.analysis
        self.geometry.build()
        positive = {
            "classical.particles": c.particles,
            "classical.horizon": c.horizon,
            "classical.fine_step": c.fine_step,
            "classical.coarse_step": c.coarse_step,
            "classical.batches": c.batches,
            "wave.k_min": w.k_min,
            "wave.dk": w.dk,
            "wave.unimodular_tol": w.unimodular_tol,
            "wave.inf_tol": w.inf_tol,
            "wave.symmetry_window": w.symmetry_window,
            "wave.workers": w.workers,
            "analysis.width": a.width,
            "analysis.g": a.g,
            "analysis.window_samples": a.window_samples,
            "analysis.window_r": a.window_r,
            "analysis.slope_points": a.slope_points,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive (got {value})")
        if w.k_max < w.k_min:
            raise ConfigError("wave.k_max must not be below wave.k_min")
        if c.particles < c.batches:
            raise ConfigError("classical.particles must be at least classical.batches")
        if w.method not in ("coupled", "staircase"):
            raise ConfigError(f"wave.method must be coupled or staircase (got {w.method!r})")
        if a.kernel not in ("gaussian", "boxcar"):
            raise ConfigError(f"analysis.kernel must be gaussian or boxcar (got {a.kernel!r})")
        if a.edges not in ("renormalize", "reflect"):
            raise ConfigError(f"analysis.edges must be renormalize or reflect (got {a.edges!r})")
        if a.D1 is not None and not a.D1 > 0:
            raise ConfigError("analysis.D1 must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that can change results (not the output path or worker count)."""
        d = self.to_dict()
        d.pop("output")
        d["wave"].pop("workers")
        text = json.dumps(d, sort_keys=True, default=float)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def profile(self) -> WaveguideProfile:
        return self.geometry.build()

    @property
    def output_dir(self) -> Path:
        return Path(self.output)


_CASTS = {
    "int": lambda v: int(parse_number(v)),
    "float": parse_number,
    "str": lambda v: str(v).strip(),
    "bool": _bool,
    "list": _number_list,
}


def _cast_for(cls, name):
    # annotations are strings here, e.g. "int", "float | None"
    text = str({f.name: f for f in fields(cls)}[name].type)
    cast = _CASTS[text.split("|")[0].strip()]
    return (lambda v: _optional(v, cast)) if "None" in text else cast


_SECTIONS = {
    "geometry": GeometryConfig,
    "classical": ClassicalConfig,
    "wave": WaveConfig,
    "analysis": AnalysisConfig,
}


def _apply(cfg: RunConfig, section: str, key: str, value) -> None:
    if section == "output" and key in ("directory", "dir", "output"):
        cfg.output = str(value).strip()
        return
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    cls = _SECTIONS[section]
    names = {f.name.lower(): f.name for f in fields(cls)}
    if key.lower() not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    name = names[key.lower()]
    try:
        setattr(getattr(cfg, section), name, _cast_for(cls, name)(value))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional), apply ``section.key=value`` overrides, validate."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                _apply(cfg, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(cfg, section, key, value)
    return cfg.validate()
