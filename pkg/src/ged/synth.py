"""Seeded synthetic weather for desk-scale experiments.

Rain cells are Gaussian blobs carried by a slowly varying wind. Each cell is
born at a random place (wetter over high ground), grows and
decays over its lifetime following a half-sine envelope, and drifts with the
local wind. The rain field is the blob sum minus a small drizzle threshold,
clipped at zero, which leaves realistic dry areas. Seasonal modulation of the
birth rate gives month-to-month variation in difficulty.

Row index grows southwards (row 0 is the northern edge), so positive ``v``
(northward wind) moves cells towards smaller row numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import GridDomain, Store, ingest, to_hours

__all__ = ["SynthConfig", "generate_fields", "synth_generate"]


@dataclass(frozen=True)
class SynthConfig:
    domain: GridDomain = GridDomain()
    n_hours: int = 2000
    seed: int = 0
    start: str = "2020-10-01T00"
    birth_rate: float = 0.4  # new cells per hour over the (margin-padded) window
    lifetime: tuple = (8.0, 30.0)  # hours, uniform
    radius: tuple = (0.04, 0.10)  # blob sigma as a fraction of the grid diagonal
    peak: float = 0.004  # typical peak rain, m per hour
    drizzle: float = 0.1  # fraction of the peak removed before clipping
    mean_wind: tuple = (6.0, 2.0)  # (u, v) in m/s
    wind_std: float = 4.0
    wind_memory: float = 48.0  # hours
    seasonal: float = 0.5


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def generate_fields(cfg: SynthConfig) -> dict:
    """Return ``{"time", "tp", "u100", "v100", "lsm", "geopot"}`` arrays."""
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.domain.full_size
    diag = float(np.hypot(H, W))
    hours = to_hours(np.datetime64(cfg.start, "h")) + np.arange(cfg.n_hours)

    height = _smooth_field(rng, (H, W), sigma=diag / 12)
    lsm = 1.0 / (1.0 + np.exp(-4.0 * (height + 0.3)))
    elevation = np.clip(height, 0, None) * 600.0 * (lsm > 0.5)
    geopot = 9.80665 * elevation
    orography = elevation / (elevation.max() + 1e-12)

    pert_u = 1.5 * _smooth_field(rng, (H, W), sigma=diag / 8)
    pert_v = 1.5 * _smooth_field(rng, (H, W), sigma=diag / 8)
    cells_per_ms = 3.6 / cfg.domain.cell_km  # grid cells moved per hour at 1 m/s

    # mean wind: Ornstein-Uhlenbeck around cfg.mean_wind
    decay = np.exp(-1.0 / cfg.wind_memory)
    kick = cfg.wind_std * np.sqrt(1 - decay**2)
    mean = np.array(cfg.mean_wind, dtype=float)
    wind = mean + cfg.wind_std * rng.standard_normal(2)

    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    margin = 0.15
    area_rate = cfg.birth_rate * (1 + 2 * margin) ** 2

    # cell state: row, col, amplitude, sigma, age, lifetime
    cells = np.zeros((0, 6))
    tp = np.zeros((cfg.n_hours, H, W), dtype=np.float32)
    u_out = np.zeros((cfg.n_hours, H, W), dtype=np.float32)
    v_out = np.zeros((cfg.n_hours, H, W), dtype=np.float32)
    day_of_year = (hours // 24) % 365

    spinup = int(cfg.lifetime[1])
    for step in range(-spinup, cfg.n_hours):
        wind = mean + decay * (wind - mean) + kick * rng.standard_normal(2)
        doy = day_of_year[max(step, 0)]
        rate = area_rate * (1 + cfg.seasonal * np.sin(2 * np.pi * doy / 365.0))
        n_new = rng.poisson(max(rate, 0.0))
        if n_new:
            r = rng.uniform(-margin * H, (1 + margin) * H, n_new)
            c = rng.uniform(-margin * W, (1 + margin) * W, n_new)
            ri = np.clip(r.astype(int), 0, H - 1)
            ci = np.clip(c.astype(int), 0, W - 1)
            boost = 1.0 + orography[ri, ci]
            amp = cfg.peak * boost * rng.lognormal(0.0, 0.4, n_new)
            sig = diag * rng.uniform(*cfg.radius, n_new)
            life = rng.uniform(*cfg.lifetime, n_new)
            cells = np.vstack([cells, np.column_stack([r, c, amp, sig, np.zeros(n_new), life])])

        if step >= 0:
            field = np.zeros((H, W))
            for r, c, amp, sig, age, life in cells:
                env = np.sin(np.pi * min(age / life, 1.0))
                field += amp * env * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sig**2))
            tp[step] = np.clip(field - cfg.drizzle * cfg.peak, 0.0, None)
            u_out[step] = wind[0] + pert_u
            v_out[step] = wind[1] + pert_v

        if cells.size:
            ri = np.clip(cells[:, 0].astype(int), 0, H - 1)
            ci = np.clip(cells[:, 1].astype(int), 0, W - 1)
            u_here = wind[0] + pert_u[ri, ci]
            v_here = wind[1] + pert_v[ri, ci]
            cells[:, 1] += u_here * cells_per_ms
            cells[:, 0] -= v_here * cells_per_ms
            cells[:, 4] += 1.0
            alive = (
                (cells[:, 4] < cells[:, 5])
                & (cells[:, 0] > -0.5 * H)
                & (cells[:, 0] < 1.5 * H)
                & (cells[:, 1] > -0.5 * W)
                & (cells[:, 1] < 1.5 * W)
            )
            cells = cells[alive]

    return {
        "time": hours.astype("datetime64[h]"),
        "tp": tp,
        "u100": u_out,
        "v100": v_out,
        "lsm": lsm.astype(np.float32),
        "geopot": geopot.astype(np.float32),
    }


def synth_generate(out_dir, cfg: SynthConfig = SynthConfig()) -> Store:
    """Generate a synthetic dataset and ingest it as a store at ``out_dir``."""
    return ingest([generate_fields(cfg)], out_dir, cfg.domain)
