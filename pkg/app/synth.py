"""
Synthetic velocity models standing in for the benchmark profiles.

The depth axis is x on 1D grids and z on 2D grids; 2D models are laterally
invariant except for the inclusion.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core.field_ops import ModelGrid
from utils.errors import ConfigError
from utils.io.raster import ModelRasterFile, RasterKind, write_raster

logger = logging.getLogger("synth")

SYNTH_KINDS = ("piecewise-constant", "piecewise-smooth", "piecewise-linear", "gradient-background-with-inclusion")
VELOCITY_RANGE = (1000.0, 6000.0)


class SynthParams(BaseModel):
    v_min: float = 1500.0
    v_max: float = 4500.0
    blocks: int = Field(default=3, ge=1)
    margin: float = Field(default=0.15, ge=0, lt=0.5)
    inclusion_velocity: float = 4500.0
    inclusion_radius: float = Field(default=0.12, gt=0, lt=0.5)
    inclusion_center: Tuple[float, float] = (0.5, 0.4)

    @model_validator(mode="after")
    def _physical(self):
        low, high = VELOCITY_RANGE
        for name in ("v_min", "v_max", "inclusion_velocity"):
            value = getattr(self, name)
            if not low <= value <= high:
                raise ValueError(f"{name}={value} outside the physical range [{low:g}, {high:g}] m/s")
        if self.v_min >= self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        return self


@dataclass(frozen=True)
class SynthResult:
    velocity: ModelRasterFile
    squared_slowness: ModelRasterFile
    initial: ModelRasterFile


def _coordinates(grid: ModelGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (lateral, depth) coordinates, each of shape (nx, nz)."""
    ix, iz = np.meshgrid(np.arange(grid.nx), np.arange(grid.nz), indexing="ij")
    if grid.dim == 1:
        return np.zeros(grid.shape), ix / (grid.nx - 1)
    return ix / (grid.nx - 1), iz / (grid.nz - 1)


def _interfaces(rng: np.random.Generator, params: SynthParams) -> np.ndarray:
    return np.sort(rng.uniform(params.margin, 1.0 - params.margin, params.blocks - 1))


def _piecewise(depth: np.ndarray, rng: np.random.Generator, params: SynthParams, kind: str) -> np.ndarray:
    edges = _interfaces(rng, params)
    block = np.searchsorted(edges, depth, side="right")
    bounds = np.concatenate([[0.0], edges, [1.0]])
    start = rng.uniform(params.v_min, params.v_max, params.blocks)
    if kind == "piecewise-constant":
        return start[block]
    if kind == "piecewise-linear":
        end = rng.uniform(params.v_min, params.v_max, params.blocks)
        width = np.maximum(bounds[block + 1] - bounds[block], 1e-12)
        return start[block] + (end[block] - start[block]) * (depth - bounds[block]) / width
    # piecewise-smooth: one smooth oscillation per block on top of its level
    amplitude = 0.1 * (params.v_max - params.v_min)
    phase = rng.uniform(0.0, 2.0 * np.pi, params.blocks)
    wiggle = amplitude * np.sin(2.0 * np.pi * 1.5 * depth + phase[block])
    return np.clip(start[block] + wiggle, params.v_min, params.v_max)


def _gradient(depth: np.ndarray, params: SynthParams) -> np.ndarray:
    return params.v_min + (params.v_max - params.v_min) * depth


def synth_velocity(kind: str, grid: ModelGrid, seed: int = 0, params: Optional[SynthParams] = None) -> np.ndarray:
    """Velocity (m/s) as a flat z-fastest array; identical for identical seeds."""
    params = params or SynthParams()
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic model kind '{kind}' (choose from {', '.join(SYNTH_KINDS)})")
    rng = np.random.default_rng(seed)
    lateral, depth = _coordinates(grid)
    if kind == "gradient-background-with-inclusion":
        velocity = _gradient(depth, params)
        cx, cz = params.inclusion_center
        if grid.dim == 1:
            inside = np.abs(depth - cz) <= params.inclusion_radius
        else:
            inside = (lateral - cx) ** 2 + (depth - cz) ** 2 <= params.inclusion_radius ** 2
        velocity = np.where(inside, params.inclusion_velocity, velocity)
    else:
        velocity = _piecewise(depth, rng, params, kind)
    return np.ascontiguousarray(velocity, dtype=float).ravel()


def initial_velocity(grid: ModelGrid, true_velocity: np.ndarray, params: Optional[SynthParams] = None) -> np.ndarray:
    """Homogeneous mean velocity in 1D; in 2D the smooth background (or a
    v_min -> v_max depth gradient)."""
    params = params or SynthParams()
    if grid.dim == 1:
        return np.full(grid.n, float(np.mean(true_velocity)))
    _, depth = _coordinates(grid)
    return np.ascontiguousarray(_gradient(depth, params), dtype=float).ravel()


def synth_model(kind: str, grid: ModelGrid, seed: int = 0, params: Optional[SynthParams] = None) -> SynthResult:
    velocity = synth_velocity(kind, grid, seed, params)
    initial = initial_velocity(grid, velocity, params)
    logger.info(f"Synthesized {kind} model on {grid.shape} grid (seed {seed}): "
                f"{velocity.min():.1f} - {velocity.max():.1f} m/s")
    velocity_raster = ModelRasterFile(grid, velocity, RasterKind.VELOCITY)
    return SynthResult(velocity=velocity_raster,
                       squared_slowness=velocity_raster.as_kind(RasterKind.SQUARED_SLOWNESS),
                       initial=ModelRasterFile(grid, 1.0 / initial ** 2, RasterKind.SQUARED_SLOWNESS))


def write_synth(result: SynthResult, out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "true_velocity": os.path.join(out_dir, "true_velocity.bin"),
        "true_model": os.path.join(out_dir, "true_model.bin"),
        "initial_model": os.path.join(out_dir, "initial_model.bin"),
    }
    write_raster(paths["true_velocity"], result.velocity)
    write_raster(paths["true_model"], result.squared_slowness)
    write_raster(paths["initial_model"], result.initial)
    return paths
