"""Synthetic North Atlantic ensembles with a controllable AMV-like mode.

Each member carries a latent index

    i(t) = amplitude * sin(2 pi t / period + phase) + trend * t / 100 + r(t)

with r an AR(1) process.  SST is ``i(t)`` times a spatial pattern (subpolar
and tropical maxima, weak negative lobe between) normalised to unit
area-weighted mean over the AMV box, so the computed AMV index tracks
``i(t)``.  SSS follows the index with a lag; SLP follows its quadrature
component, i.e. leads the index by a quarter period.  Land cells in a
configurable box are invalid for SST and SSS but carry SLP values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from amvpred.errors import ConfigError, IoError, RegionError
from amvpred.grid import AMV_REGION, FieldStack, Region, area_weights, regular_grid


@dataclass(frozen=True)
class SynthConfig:
    n_members: int = 40
    n_years: int = 86
    start_year: int = 1920
    n_lat: int = 33
    n_lon: int = 41
    lat_range: tuple = (0.0, 64.0)
    lon_range: tuple = (-80.0, 0.0)
    period: float = 64.0
    amplitude: float = 0.5
    trend: float = 0.3  # degC per century
    ar_coef: float = 0.5
    ar_std: float = 0.05
    spatial_noise: float = 0.1
    pattern: str = "amv"  # or "uniform"
    subpolar_amp: float = 1.0
    tropical_amp: float = 0.6
    lobe_amp: float = -0.2
    sss_coupling: float = 0.3  # psu per degC
    sss_lag: int = 8
    sss_noise: float = 0.05
    slp_coupling: float = 2.0  # hPa per degC
    slp_noise: float = 0.3
    land_box: tuple | None = (52.0, 64.0, -80.0, -62.0)
    phase_spread: float = 2 * np.pi
    seed: int = 0

    def __post_init__(self):
        for name in ("lat_range", "lon_range", "land_box"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if self.n_members < 1:
            raise ConfigError("n_members must be >= 1")
        if self.n_years < 2:
            raise ConfigError("n_years must be >= 2")
        if not self.period > 0:
            raise ConfigError("period must be positive")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in [0, 1)")
        if self.n_lat < 4 or self.n_lon < 6:
            raise ConfigError("grid must be at least 4 x 6")
        if min(self.ar_std, self.spatial_noise, self.sss_noise, self.slp_noise) < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.pattern not in ("amv", "uniform"):
            raise ConfigError(f"unknown pattern {self.pattern!r}")
        if self.sss_lag < 0:
            raise ConfigError("sss_lag must be nonnegative")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @property
    def grid(self):
        return regular_grid(self.lat_range, self.lon_range, self.n_lat, self.n_lon)

    @property
    def years(self):
        return np.arange(self.start_year, self.start_year + self.n_years)


def _bump(lat2d, centre, width):
    return np.exp(-0.5 * ((lat2d - centre) / width) ** 2)


def ocean_mask(cfg):
    grid = cfg.grid
    if cfg.land_box is None:
        return np.ones(grid.shape, dtype=bool)
    lat2d, lon2d = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    land = Region(*cfg.land_box).contains(lat2d, lon2d)
    return ~land


def sst_pattern(cfg, mask=None):
    """SST loading with unit area-weighted mean over valid cells of the AMV box."""
    grid = cfg.grid
    lat2d, lon2d = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    if cfg.pattern == "uniform":
        pattern = np.ones(grid.shape)
    else:
        # zonal taper keeps the pattern basin-like rather than a pure function of latitude
        taper = 0.8 + 0.2 * np.cos(np.deg2rad(lon2d + 40.0))
        pattern = taper * (
            cfg.subpolar_amp * _bump(lat2d, 55.0, 8.0)
            + cfg.tropical_amp * _bump(lat2d, 15.0, 8.0)
            + cfg.lobe_amp * _bump(lat2d, 35.0, 5.0)
        )
    mask = ocean_mask(cfg) if mask is None else mask
    try:
        w = np.where(mask, area_weights(grid, AMV_REGION), 0.0)
    except RegionError:
        return pattern
    mean = (w * pattern).sum() / w.sum() if w.sum() > 0 else 0.0
    return pattern / mean if mean != 0 else pattern


def latent_index(cfg, rng, phase, n_history=0):
    """Latent index for ``n_history`` spin-up years followed by the record."""
    n = cfg.n_years + n_history
    t = np.arange(n) - n_history
    noise = np.zeros(n)
    if cfg.ar_std > 0:
        eps = rng.normal(0.0, cfg.ar_std, size=n)
        noise[0] = eps[0] / np.sqrt(1.0 - cfg.ar_coef**2)
        for k in range(1, n):
            noise[k] = cfg.ar_coef * noise[k - 1] + eps[k]
    angle = 2 * np.pi * t / cfg.period + phase
    oscillation = cfg.amplitude * np.sin(angle)
    quadrature = cfg.amplitude * np.cos(angle)
    return oscillation + cfg.trend * t / 100.0 + noise, quadrature


def member_phase(cfg, member_id):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(member_id), 1]))
    return float(rng.uniform(0.0, cfg.phase_spread))


def generate_member(cfg, member_id):
    """One ensemble member as a float64 :class:`FieldStack` (SST, SSS, SLP)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(member_id), 0]))
    phase = member_phase(cfg, member_id)
    grid = cfg.grid
    mask = ocean_mask(cfg)
    if not mask.any():
        raise ConfigError("land_box covers the whole grid")
    lat2d, lon2d = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    shape = (cfg.n_years,) + grid.shape

    hist = cfg.sss_lag
    index, quadrature = latent_index(cfg, rng, phase, n_history=hist)
    current = index[hist:]
    lagged = index[: cfg.n_years]
    quadrature = quadrature[hist:]

    pattern = sst_pattern(cfg, mask)
    sss_pattern = _bump(lat2d, 50.0, 12.0)
    slp_pattern = _bump(lat2d, 35.0, 8.0) - _bump(lat2d, 60.0, 8.0)  # NAO-like dipole

    def noise(std):
        return rng.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)

    sst = 26.0 - 0.3 * lat2d + current[:, None, None] * pattern + noise(cfg.spatial_noise)
    sss = (
        35.0 + 0.8 * np.cos(np.deg2rad(lat2d * 2))
        + cfg.sss_coupling * lagged[:, None, None] * sss_pattern
        + noise(cfg.sss_noise)
    )
    slp = (
        1013.0 + 6.0 * slp_pattern
        + cfg.slp_coupling * quadrature[:, None, None] * slp_pattern
        + noise(cfg.slp_noise)
    )
    # land carries no ocean data
    sst = np.where(mask, sst, 0.0)
    sss = np.where(mask, sss, 0.0)
    full = np.ones(grid.shape, dtype=bool)
    return FieldStack(
        variables=("SST", "SSS", "SLP"),
        years=cfg.years,
        member=f"{int(member_id):03d}",
        data=np.stack([sst, sss, slp]),
        grid=grid,
        mask=np.stack([mask, mask, full]),
    )


def generate_ensemble(cfg):
    return [generate_member(cfg, m) for m in range(cfg.n_members)]
