"""Regular lat/lon grids, gridded fields, area weighting and regridding.

All functions here are pure: they never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from amvpred.errors import MaskError, RegionError, ShapeError

VARIABLE_UNITS = {"SST": "degC", "SSS": "psu", "SLP": "hPa"}
OCEAN_VARIABLES = ("SST", "SSS")
STANDARD_VARIABLES = ("SST", "SSS", "SLP")


def wrap_lon(lon):
    """Map longitudes onto [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class Region:
    """Lat/lon box with inclusive bounds; longitudes in degrees east.

    ``lon_min > lon_max`` denotes a box crossing the antimeridian.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def contains(self, lats, lons):
        """Boolean mask of the (lat, lon) cell centres that fall in the box."""
        lats = np.asarray(lats, dtype=float)
        lons = wrap_lon(lons)
        in_lat = (lats >= self.lat_min) & (lats <= self.lat_max)
        lo, hi = float(wrap_lon(self.lon_min)), float(wrap_lon(self.lon_max))
        # wrap_lon sends +180 to -180; keep a full-width box full width
        if self.lon_max - self.lon_min >= 360.0:
            in_lon = np.ones_like(lons, dtype=bool)
        elif lo <= hi:
            in_lon = (lons >= lo) & (lons <= hi)
        else:
            in_lon = (lons >= lo) | (lons <= hi)
        return in_lat & in_lon


# 80W-0, 0-65N
AMV_REGION = Region(lat_min=0.0, lat_max=65.0, lon_min=-80.0, lon_max=0.0)


@dataclass(frozen=True, eq=False)
class Grid:
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=float)
        lons = np.asarray(self.lons, dtype=float)
        if lats.ndim != 1 or lons.ndim != 1 or lats.size < 2 or lons.size < 2:
            raise ShapeError("grid axes must be 1-D with at least 2 points each")
        if np.any(np.diff(lats) <= 0) or np.any(np.diff(lons) <= 0):
            raise ShapeError("grid axes must be strictly increasing")
        if lats[0] < -90 or lats[-1] > 90:
            raise ShapeError("latitudes must lie in [-90, 90]")
        if lons[-1] - lons[0] >= 360:
            raise ShapeError("longitudes must lie within a single 360 degree window")
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)

    @property
    def shape(self):
        return (self.lats.size, self.lons.size)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return np.array_equal(self.lats, other.lats) and np.array_equal(self.lons, other.lons)

    def __hash__(self):
        return hash((self.lats.tobytes(), self.lons.tobytes()))


def regular_grid(lat_range, lon_range, n_lat, n_lon):
    """Evenly spaced grid with cell centres spanning the given ranges."""
    return Grid(np.linspace(*lat_range, n_lat), np.linspace(*lon_range, n_lon))


@dataclass(frozen=True, eq=False)
class Field:
    """One 2-D variable on a grid; ``mask`` is True at valid (ocean) cells."""

    grid: Grid
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != self.grid.shape or mask.shape != self.grid.shape:
            raise ShapeError(
                f"field shape {values.shape} / mask {mask.shape} != grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(values[mask])):
            raise MaskError("field has non-finite values at valid cells")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class FieldStack:
    """(variable, time, lat, lon) array for one ensemble member.

    ``mask`` has shape (V, H, W): each variable carries its own validity
    mask until :func:`harmonize_masks` makes them identical.
    """

    variables: tuple
    years: np.ndarray
    member: str
    data: np.ndarray
    grid: Grid
    mask: np.ndarray
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        variables = tuple(self.variables)
        years = np.asarray(self.years, dtype=np.int64)
        data = np.asarray(self.data)
        mask = np.asarray(self.mask, dtype=bool)
        n_var = len(variables)
        if n_var < 1:
            raise ShapeError("a stack needs at least one variable")
        if len(set(variables)) != n_var:
            raise ShapeError(f"duplicate variable names: {variables}")
        if years.ndim != 1 or years.size < 1:
            raise ShapeError("a stack needs at least one year")
        if np.any(np.diff(years) != 1):
            raise ShapeError("years must be contiguous and increasing by 1")
        expected = (n_var, years.size) + self.grid.shape
        if data.shape != expected:
            raise ShapeError(f"data shape {data.shape} != {expected}")
        if mask.shape == self.grid.shape:
            mask = np.broadcast_to(mask, (n_var,) + self.grid.shape).copy()
        if mask.shape != (n_var,) + self.grid.shape:
            raise ShapeError(f"mask shape {mask.shape} incompatible with {expected}")
        units = {v: VARIABLE_UNITS.get(v, "") for v in variables}
        units.update(self.units or {})
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "member", str(self.member))

    @property
    def shape(self):
        return self.data.shape

    def var_index(self, name):
        try:
            return self.variables.index(name)
        except ValueError:
            raise ShapeError(f"variable {name!r} not in stack {self.variables}") from None

    def field(self, name, year):
        """The 2-D :class:`Field` of one variable in one year."""
        v = self.var_index(name)
        t = int(year) - int(self.years[0])
        if not 0 <= t < self.years.size:
            raise ShapeError(f"year {year} outside {self.years[0]}-{self.years[-1]}")
        return Field(self.grid, self.data[v, t], self.mask[v])

    def replace(self, **changes):
        return replace(self, **changes)


def area_weights(grid, region):
    """cos(latitude) weights inside ``region``, zero outside.

    Weights are not normalised; :func:`masked_weighted_mean` divides by the
    total over valid cells.
    """
    lat2d, lon2d = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    inside = region.contains(lat2d, lon2d)
    if not inside.any():
        raise RegionError(f"{region} does not overlap the grid")
    weights = np.clip(np.cos(np.deg2rad(lat2d)), 0.0, None)
    return np.where(inside, weights, 0.0)


def masked_weighted_mean(field, weights):
    """Weighted mean of ``field`` over its valid cells."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != field.values.shape:
        raise ShapeError(f"weights {weights.shape} != field {field.values.shape}")
    w = np.where(field.mask, weights, 0.0)
    total = w.sum()
    if not total > 0:
        raise RegionError("no valid cell carries positive weight")
    v = np.where(field.mask, field.values, 0.0)
    return float((w * v).sum() / total)


def _nearest_axis(source, target, period=None):
    """Index of the nearest ``source`` point for each ``target`` point.

    ``np.argmin`` returns the first minimum, i.e. the lowest source index on
    ties.
    """
    d = np.abs(target[:, None] - source[None, :])
    if period is not None:
        d = np.mod(d, period)
        d = np.minimum(d, period - d)
    return np.argmin(d, axis=1)


def nearest_indices(source, target):
    """Row and column indices into ``source`` for every ``target`` cell.

    Euclidean distance in (lat, lon) degrees is separable on rectilinear
    grids, so the 2-D nearest neighbour is the pair of 1-D nearest
    neighbours, and lowest-index tie breaking per axis gives the lowest flat
    index overall.
    """
    rows = _nearest_axis(source.lats, target.lats)
    cols = _nearest_axis(source.lons, target.lons, period=360.0)
    return rows, cols


def _check_overlap(source, target):
    lat_ok = target.lats[-1] >= source.lats[0] and target.lats[0] <= source.lats[-1]
    s0, s1 = source.lons[0], source.lons[-1]
    t0, t1 = target.lons[0], target.lons[-1]
    lon_ok = any(t1 + k >= s0 and t0 + k <= s1 for k in (-360.0, 0.0, 360.0))
    if not (lat_ok and lon_ok):
        raise RegionError("source and target grids do not overlap")


def regrid_nearest(field, target):
    """Nearest-neighbour regridding of one field; the mask travels with the values."""
    _check_overlap(field.grid, target)
    rows, cols = nearest_indices(field.grid, target)
    ix = np.ix_(rows, cols)
    return Field(target, field.values[ix], field.mask[ix])


def regrid_stack(stack, target):
    """Apply :func:`regrid_nearest` to every variable and year of a stack."""
    _check_overlap(stack.grid, target)
    rows, cols = nearest_indices(stack.grid, target)
    data = stack.data[:, :, rows][:, :, :, cols]
    mask = stack.mask[:, rows][:, :, cols]
    return stack.replace(grid=target, data=data, mask=mask)


def harmonize_masks(stack):
    """Restrict every variable to cells where all ocean variables are valid.

    Land and sea-ice cells of SST/SSS are thereby removed from SLP too.
    """
    ocean = [v for v in OCEAN_VARIABLES if v in stack.variables]
    if len(ocean) < len(OCEAN_VARIABLES) or "SLP" not in stack.variables:
        raise MaskError(f"stack needs SST, SSS and SLP, has {stack.variables}")
    combined = np.logical_and.reduce([stack.mask[stack.var_index(v)] for v in ocean])
    if not combined.any():
        raise MaskError("combined ocean mask is empty")
    if all(np.array_equal(m, combined) for m in stack.mask):
        return stack
    mask = np.broadcast_to(combined, stack.mask.shape).copy()
    return stack.replace(mask=mask)
