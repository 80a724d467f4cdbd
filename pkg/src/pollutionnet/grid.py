"""Regular lat/lon grids, masked fields and station regridding.

Row 0 is the southern (``lat_min``) edge and column 0 the western
(``lon_min``) edge.  Invalid cells hold NaN.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence

import numpy as np


class GridError(ValueError):
    """Raised for malformed grids, fields or out-of-box points."""


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float
    rows: int
    cols: int

    def __post_init__(self):
        vals = (self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.resolution)
        if not all(np.isfinite(v) for v in vals):
            raise GridError(f"non-finite grid bounds: {vals}")
        if not self.lat_min < self.lat_max:
            raise GridError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise GridError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if not self.resolution > 0:
            raise GridError(f"resolution must be positive, got {self.resolution}")
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise GridError(f"rows/cols must be integers, got {self.rows}x{self.cols}")
        if self.rows < 1 or self.cols < 1:
            raise GridError(f"grid must have at least one cell, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.rows), int(self.cols))

    @property
    def cell_height(self) -> float:
        # rows/cols are authoritative; the nominal resolution is informational
        return (self.lat_max - self.lat_min) / self.rows

    @property
    def cell_width(self) -> float:
        return (self.lon_max - self.lon_min) / self.cols

    def contains(self, lat: float, lon: float) -> bool:
        return (self.lat_min <= lat <= self.lat_max) and (self.lon_min <= lon <= self.lon_max)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.lat_min + (row + 0.5) * self.cell_height,
                self.lon_min + (col + 0.5) * self.cell_width)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center latitudes (length ``rows``) and longitudes (length ``cols``)."""
        lats = self.lat_min + (np.arange(self.rows) + 0.5) * self.cell_height
        lons = self.lon_min + (np.arange(self.cols) + 0.5) * self.cell_width
        return lats, lons


NO2_GRID = GridSpec(51.795, 54.323, -9.089, -6.032, 0.05, 49, 67)
SO2_GRID = GridSpec(51.795, 55.004, -9.089, -6.105, 0.05, 64, 59)


def _nearest_index(u: float, n: int) -> int:
    # u is the coordinate in cell units measured from the low edge; centers sit at k + 0.5.
    # ceil(u - 1) picks the nearest center with exact ties going to the lower index.
    k = int(np.ceil(u - 1.0))
    return min(max(k, 0), n - 1)


def cell_of(lat: float, lon: float, spec: GridSpec) -> tuple[int, int]:
    """Return ``(row, col)`` of the cell whose center is nearest to the point."""
    if not (np.isfinite(lat) and np.isfinite(lon)):
        raise GridError(f"point ({lat}, {lon}) is not finite")
    if not spec.contains(lat, lon):
        raise GridError(
            f"point (lat={lat}, lon={lon}) outside grid box "
            f"lat [{spec.lat_min}, {spec.lat_max}] lon [{spec.lon_min}, {spec.lon_max}]")
    row = _nearest_index((lat - spec.lat_min) / spec.cell_height, spec.rows)
    col = _nearest_index((lon - spec.lon_min) / spec.cell_width, spec.cols)
    return row, col


class Field:
    """One day's concentration grid with a validity mask.

    ``values`` is float64 with NaN at every invalid cell; ``mask`` is True
    where an observation exists.
    """

    def __init__(self, spec: GridSpec, values, mask=None):
        values = np.array(values, dtype=np.float64)
        if values.shape != spec.shape:
            raise GridError(f"values shape {values.shape} does not match grid {spec.shape}")
        if mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.array(mask, dtype=bool)
            if mask.shape != spec.shape:
                raise GridError(f"mask shape {mask.shape} does not match grid {spec.shape}")
            if not np.all(np.isfinite(values[mask])):
                raise GridError("valid cells must hold finite values")
        values[~mask] = np.nan
        values.flags.writeable = False
        mask.flags.writeable = False
        self.spec = spec
        self.values = values
        self.mask = mask

    @classmethod
    def empty(cls, spec: GridSpec) -> "Field":
        return cls(spec, np.full(spec.shape, np.nan))

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def __repr__(self):
        return f"Field({self.spec.rows}x{self.spec.cols}, valid={self.n_valid})"


class FieldStack:
    """Time-ordered sequence of fields on one grid, stored as a (T, rows, cols) array."""

    def __init__(self, spec: GridSpec, times: Sequence[int], values):
        times = np.asarray(times, dtype=np.int64).reshape(-1)
        values = np.array(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != spec.shape:
            raise GridError(f"stack shape {values.shape} does not match grid {spec.shape}")
        if values.shape[0] != len(times):
            raise GridError(f"{values.shape[0]} fields but {len(times)} day indices")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise GridError("day indices must be strictly increasing")
        if np.isinf(values).any():
            raise GridError("stack contains infinite values")
        values.flags.writeable = False
        times.flags.writeable = False
        self.spec = spec
        self.times = times
        self.values = values

    @classmethod
    def from_fields(cls, times: Sequence[int], fields: Sequence[Field]) -> "FieldStack":
        if not fields:
            raise GridError("cannot infer a grid from an empty field list")
        spec = fields[0].spec
        for f in fields:
            if f.spec != spec:
                raise GridError("all fields in a stack must share one grid")
        return cls(spec, times, np.stack([f.values for f in fields]))

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def fields(self) -> list[Field]:
        return [self[i] for i in range(len(self))]

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i: int) -> Field:
        return Field(self.spec, self.values[i])

    def __repr__(self):
        return f"FieldStack({len(self)} x {self.spec.rows}x{self.spec.cols})"


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    lat: float
    lon: float
    day: int
    value: float

    def __post_init__(self):
        if not (np.isfinite(self.lat) and np.isfinite(self.lon)):
            raise GridError(f"station {self.station_id}: non-finite coordinates ({self.lat}, {self.lon})")
        if not np.isfinite(self.value) or self.value < 0:
            raise GridError(f"station {self.station_id} day {self.day}: invalid value {self.value}")


def regrid_stations(records: Iterable[StationRecord], spec: GridSpec,
                    days: Sequence[int]) -> FieldStack:
    """Grid station records onto ``spec``, one field per day in ``days``.

    Records sharing a cell on the same day are averaged.  Cells without a
    record stay invalid.
    """
    days = np.asarray(days, dtype=np.int64)
    day_pos = {int(d): i for i, d in enumerate(days)}
    total = np.zeros((len(days),) + spec.shape)
    count = np.zeros((len(days),) + spec.shape, dtype=np.int64)
    for rec in records:
        if rec.day not in day_pos:
            raise GridError(f"station {rec.station_id}: day {rec.day} outside the requested day range")
        try:
            r, c = cell_of(rec.lat, rec.lon, spec)
        except GridError as exc:
            raise GridError(f"station {rec.station_id} day {rec.day}: {exc}") from None
        t = day_pos[rec.day]
        total[t, r, c] += rec.value
        count[t, r, c] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return FieldStack(spec, days, values)
