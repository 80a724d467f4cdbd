"""Synthetic satellite/ground datasets with a known affine satellite-truth relation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import FieldStack, GridSpec, StationRecord, NO2_GRID, SO2_GRID


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    spec: GridSpec = NO2_GRID
    n_days: int = 485
    n_stations: int = 29
    gap_fraction: float = 0.3
    plume_count: int = 6
    noise_sigma: float = 1.0
    background: float = 12.0
    seasonal_amplitude: float = 5.0
    plume_amplitude: float = 25.0
    gap_smoothing: float = 3.0
    sat_gain: float = 0.98
    sat_offset: float = 0.3

    def __post_init__(self):
        if not 0 <= self.gap_fraction < 1:
            raise ValueError(f"gap_fraction must lie in [0, 1), got {self.gap_fraction}")
        if self.n_stations < 1:
            raise ValueError("n_stations must be >= 1")
        if self.n_stations > self.spec.rows * self.spec.cols:
            raise ValueError("more stations than grid cells")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")


PRESETS = {
    "no2": SynthConfig(spec=NO2_GRID, n_stations=29),
    "so2": SynthConfig(spec=SO2_GRID, n_stations=14, background=4.0, plume_amplitude=15.0),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def _truth(cfg: SynthConfig, rng) -> np.ndarray:
    rows, cols = cfg.spec.shape
    T = cfg.n_days
    t = np.arange(T, dtype=np.float64)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    phase = rng.uniform(0, 2 * np.pi)
    seasonal = cfg.seasonal_amplitude * np.sin(2 * np.pi * t / 365.25 + phase)
    field = np.empty((T, rows, cols))
    field[:] = cfg.background + seasonal[:, None, None]

    for _ in range(cfg.plume_count):
        r0, c0 = rng.uniform(0, rows), rng.uniform(0, cols)
        wander = rng.uniform(2.0, 0.25 * min(rows, cols))
        period = rng.uniform(30.0, 120.0)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        width = rng.uniform(3.0, 8.0)
        amp = cfg.plume_amplitude * rng.uniform(0.5, 1.5)
        # day-to-day strength varies with "weather"
        daily = amp * np.exp(0.35 * rng.standard_normal(T))
        rc = r0 + wander * np.sin(2 * np.pi * t / period + ph[0])
        ccen = c0 + wander * np.cos(2 * np.pi * t / period + ph[1])
        d2 = (rr[None] - rc[:, None, None]) ** 2 + (cc[None] - ccen[:, None, None]) ** 2
        field += daily[:, None, None] * np.exp(-d2 / (2 * width ** 2))

    if cfg.noise_sigma > 0:
        field += cfg.noise_sigma * rng.standard_normal(field.shape)
    return np.clip(field, 0.0, None)


def _gap_masks(cfg: SynthConfig, rng) -> np.ndarray:
    """Boolean (T, rows, cols), True where the satellite is missing."""
    rows, cols = cfg.spec.shape
    T = cfg.n_days
    gaps = np.zeros((T, rows, cols), dtype=bool)
    n_gap = int(round(cfg.gap_fraction * rows * cols))
    if n_gap == 0:
        return gaps
    for d in range(T):
        noise = gaussian_filter(rng.standard_normal((rows, cols)), cfg.gap_smoothing, mode="wrap")
        order = np.argsort(noise, axis=None, kind="stable")
        gaps[d].flat[order[:n_gap]] = True
    return gaps


def synth_generate(cfg: SynthConfig = SynthConfig()):
    """Return ``(satellite, stations, truth)``.

    ``truth`` is drifting Gaussian plumes over a seasonal background plus
    noise, clipped at zero; ``satellite`` is ``sat_gain * truth + sat_offset``
    with cloud-like gaps; stations sample ``truth`` at fixed cells every day.
    """
    rng = np.random.default_rng(cfg.seed)
    truth = _truth(cfg, rng)
    gaps = _gap_masks(cfg, rng)
    sat = cfg.sat_gain * truth + cfg.sat_offset
    sat[gaps] = np.nan

    spec = cfg.spec
    rows, cols = spec.shape
    cells = rng.choice(rows * cols, size=cfg.n_stations, replace=False)
    records = []
    for k, cell in enumerate(cells):
        r, c = divmod(int(cell), cols)
        lat, lon = spec.cell_center(r, c)
        sid = f"ST{k + 1:03d}"
        for d in range(cfg.n_days):
            records.append(StationRecord(sid, lat, lon, d, float(truth[d, r, c])))

    days = np.arange(cfg.n_days)
    return FieldStack(spec, days, sat), records, FieldStack(spec, days, truth)
