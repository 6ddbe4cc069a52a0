"""
Binary model rasters.

32-byte little-endian header (magic, nx, nz, h, kind tag, reserved) followed
by nx * nz float64 values, z fastest.
"""
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from core.field_ops import ModelGrid, ScalarField
from utils.errors import ConfigError

logger = logging.getLogger("raster")

MAGIC = b"PWFWI1\x00\x00"
HEADER = struct.Struct("<8sIIdII")


class RasterKind(IntEnum):
    VELOCITY = 1
    SQUARED_SLOWNESS = 2


@dataclass(frozen=True)
class ModelRasterFile:
    grid: ModelGrid
    values: np.ndarray
    kind: RasterKind = RasterKind.SQUARED_SLOWNESS

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype="<f8").ravel()
        if values.size != self.grid.n:
            raise ConfigError(f"raster has {values.size} values, grid needs {self.grid.n}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ConfigError("raster values must be finite and positive")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_velocity(cls, grid: ModelGrid, velocity: np.ndarray) -> "ModelRasterFile":
        return cls(grid, velocity, RasterKind.VELOCITY)

    def velocity(self) -> np.ndarray:
        if self.kind == RasterKind.VELOCITY:
            return self.values.copy()
        return 1.0 / np.sqrt(self.values)

    def squared_slowness(self) -> ScalarField:
        if self.kind == RasterKind.SQUARED_SLOWNESS:
            return ScalarField(self.grid, self.values.copy())
        return ScalarField(self.grid, 1.0 / self.values ** 2)

    def as_kind(self, kind: RasterKind) -> "ModelRasterFile":
        if kind == self.kind:
            return self
        if kind == RasterKind.VELOCITY:
            return ModelRasterFile(self.grid, self.velocity(), kind)
        return ModelRasterFile(self.grid, self.squared_slowness().values, kind)

    def to_bytes(self) -> bytes:
        header = HEADER.pack(MAGIC, self.grid.nx, self.grid.nz, self.grid.h, int(self.kind), 0)
        return header + self.values.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelRasterFile":
        if len(blob) < HEADER.size:
            raise ConfigError(f"raster truncated: {len(blob)} bytes, header needs {HEADER.size}")
        magic, nx, nz, h, tag, reserved = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ConfigError(f"not a model raster (magic {magic!r})")
        if tag not in (RasterKind.VELOCITY, RasterKind.SQUARED_SLOWNESS) or reserved != 0:
            raise ConfigError(f"unsupported raster kind tag {tag} (reserved {reserved})")
        payload = blob[HEADER.size:]
        if len(payload) != 8 * nx * nz:
            raise ConfigError(f"raster payload of {len(payload)} bytes, expected {8 * nx * nz}")
        try:
            grid = ModelGrid(nx=nx, nz=nz, h=h)
        except ValueError as err:
            raise ConfigError(f"raster header describes an invalid grid: {err}") from err
        return cls(grid, np.frombuffer(payload, dtype="<f8").copy(), RasterKind(tag))


def write_raster(path: str, raster: ModelRasterFile) -> None:
    with open(path, "wb") as handle:
        handle.write(raster.to_bytes())
    logger.info(f"Wrote {raster.kind.name.lower()} raster {path} ({raster.grid.nx} x {raster.grid.nz})")


def read_raster(path: str) -> ModelRasterFile:
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as err:
        raise ConfigError(f"cannot read raster {path}: {err}") from err
    return ModelRasterFile.from_bytes(blob)


def read_model(path: str, grid: ModelGrid) -> ScalarField:
    """Squared slowness from a raster of either kind, checked against grid."""
    raster = read_raster(path)
    if raster.grid != grid:
        raise ConfigError(f"raster {path} is on grid {raster.grid.shape} h={raster.grid.h}, "
                          f"configuration expects {grid.shape} h={grid.h}")
    return raster.squared_slowness()
