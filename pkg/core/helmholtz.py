"""
Frequency-domain Helmholtz operator with PML absorbing layers.

    A(m) = Lap_pml + omega^2 diag(m) B

Lap_pml is the 3-point (1D) / 5-point (2D) Laplacian with complex
coordinate stretching s = 1 + i sigma / omega inside a layer of
`pml.width` cells on every edge, Dirichlet outside the grid. The damping
profile is set by a reference velocity (`pml.velocity`), so Lap_pml only
depends on (grid, omega, pml) and A(m) is affine in m. The mass
matrix B defaults to the identity.
"""
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.field_ops import ModelGrid, ScalarField
from utils.errors import GridError, NumericalFailure

logger = logging.getLogger("helmholtz")

# quadratic profile integrated over the layer gives a round-trip
# normal-incidence reflection of exp(-2 * strength / 3) = 1e-3
DEFAULT_PML_STRENGTH = float(1.5 * np.log(1e3))
MIN_POINTS_PER_WAVELENGTH = 10.0
FORWARD_RESIDUAL_TOL = 1e-10


class PMLSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=10, ge=0)
    strength: float = Field(default=DEFAULT_PML_STRENGTH, gt=0)
    # reference velocity (m/s) of the damping profile; None = fastest velocity of the model at hand
    velocity: Optional[float] = Field(default=None, gt=0)

    @field_validator("width")
    @classmethod
    def _width_usable(cls, value: int) -> int:
        if value == 1:
            raise ValueError("pml width must be 0 (no layer) or at least 2 cells")
        return value

    def resolved(self, m: ScalarField) -> "PMLSettings":
        """Pin an unset reference velocity to the fastest cell of m."""
        if self.velocity is not None:
            return self
        return self.model_copy(update={"velocity": float(1.0 / np.sqrt(np.min(m.values)))})


@dataclass(frozen=True)
class Acquisition:
    """Source and receiver cells. Receivers are shared by every source."""

    grid: ModelGrid
    sources: tuple
    receivers: tuple
    amplitudes: Optional[np.ndarray] = None
    wavelet_peak_hz: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))
        object.__setattr__(self, "receivers", tuple(int(r) for r in self.receivers))
        for cell in self.sources + self.receivers:
            if not 0 <= cell < self.grid.n:
                raise GridError(f"acquisition cell {cell} outside grid with n={self.grid.n}")
        if len(set(self.receivers)) != len(self.receivers):
            raise GridError("receiver positions must be distinct")
        amplitudes = np.ones(len(self.sources), dtype=complex) if self.amplitudes is None \
            else np.asarray(self.amplitudes, dtype=complex)
        if amplitudes.shape != (len(self.sources),):
            raise GridError("one amplitude per source is required")
        object.__setattr__(self, "amplitudes", amplitudes)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_receivers(self) -> int:
        return len(self.receivers)

    @cached_property
    def sampling(self) -> sp.csr_matrix:
        """Restriction P to the receiver cells (n_receivers x n)."""
        rows = np.arange(self.n_receivers)
        return sp.csr_matrix((np.ones(self.n_receivers), (rows, np.array(self.receivers))),
                             shape=(self.n_receivers, self.grid.n))


@dataclass(frozen=True)
class Wavefield:
    grid: ModelGrid
    values: np.ndarray
    source: int = 0
    frequency: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.grid.n,):
            raise GridError(f"wavefield of shape {values.shape} does not match grid with n={self.grid.n}")
        if not np.all(np.isfinite(values)):
            raise NumericalFailure(f"non-finite wavefield (source {self.source}, {self.frequency} Hz)")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class HelmholtzOperator:
    grid: ModelGrid
    omega: float
    matrix: sp.csc_matrix
    laplacian: sp.csr_matrix
    pml: PMLSettings
    mass: Optional[sp.spmatrix] = None

    @property
    def frequency(self) -> float:
        return self.omega / (2.0 * np.pi)

    @cached_property
    def factor(self):
        """Sparse LU of A, computed once and shared by every source."""
        return _factorize(self.matrix, f"Helmholtz operator at {self.frequency:g} Hz")


def _factorize(matrix: sp.spmatrix, label: str):
    try:
        return spl.splu(sp.csc_matrix(matrix))
    except RuntimeError as err:
        logger.error(f"Factorization failed for {label} (n={matrix.shape[0]}): {err}")
        raise NumericalFailure(f"singular {label} (n={matrix.shape[0]}): {err}") from err


def ricker_spectrum(frequency, peak_hz: float):
    """Amplitude spectrum of a Ricker wavelet with peak frequency peak_hz."""
    f = np.asarray(frequency, dtype=float)
    return 2.0 * f ** 2 / (np.sqrt(np.pi) * peak_hz ** 3) * np.exp(-(f ** 2) / peak_hz ** 2)


def source_vector(acq: Acquisition, source: int, frequency: float) -> np.ndarray:
    """Point source at the source cell, scaled by 1/h^dim to approximate a delta."""
    b = np.zeros(acq.grid.n, dtype=complex)
    amplitude = acq.amplitudes[source]
    if acq.wavelet_peak_hz is not None:
        amplitude = amplitude * ricker_spectrum(frequency, acq.wavelet_peak_hz)
    b[acq.sources[source]] = amplitude / acq.grid.h ** acq.grid.dim
    return b


def points_per_wavelength(m: ScalarField, frequency: float) -> float:
    v_min = 1.0 / np.sqrt(np.max(m.values))
    return v_min / (frequency * m.grid.h)


def _stretching(count: int, width: int, sigma0: float, omega: float):
    """Stretch factors at the nodes (count) and the half nodes (count + 1,
    at positions j - 1/2)."""
    def profile(pos):
        if width == 0:
            return np.zeros_like(pos)
        depth = np.maximum.reduce([width - pos, pos - (count - 1 - width), np.zeros_like(pos)])
        depth = np.minimum(depth, width)
        return sigma0 * (depth / width) ** 2

    nodes = np.arange(count, dtype=float)
    halves = np.arange(count + 1, dtype=float) - 0.5
    return 1.0 + 1j * profile(nodes) / omega, 1.0 + 1j * profile(halves) / omega


def _laplacian_1d(count: int, h: float, width: int, sigma0: float, omega: float) -> sp.csr_matrix:
    s_node, s_half = _stretching(count, width, sigma0, omega)
    # (count + 1) x count differences at the half nodes, zero outside
    diff = sp.diags([np.ones(count), -np.ones(count)], [0, -1], shape=(count + 1, count), format="csr")
    return (-sp.diags(1.0 / s_node) @ diff.T @ sp.diags(1.0 / s_half) @ diff / h ** 2).tocsr()


@lru_cache(maxsize=32)
def pml_laplacian(grid: ModelGrid, omega: float, pml: PMLSettings) -> sp.csr_matrix:
    """Lap_pml for one (grid, omega); shared by every model assembled on it."""
    if pml.width and pml.velocity is None:
        raise ValueError("pml reference velocity is unset; call PMLSettings.resolved first")
    sigma0 = pml.strength * pml.velocity / (pml.width * grid.h) if pml.width else 0.0
    lap = sp.kron(_laplacian_1d(grid.nx, grid.h, pml.width, sigma0, omega),
                  sp.identity(grid.nz), format="csr")
    if grid.nz > 1:
        lap = lap + sp.kron(sp.identity(grid.nx),
                            _laplacian_1d(grid.nz, grid.h, pml.width, sigma0, omega), format="csr")
    return lap.tocsr()


def assemble(m: ScalarField, omega: float, pml: Optional[PMLSettings] = None,
             mass: Optional[sp.spmatrix] = None) -> HelmholtzOperator:
    """
    Build A(m) for squared slowness m at angular frequency omega.

    Args:
        m: squared slowness (s^2/m^2), strictly positive.
        omega: angular frequency in rad/s.
        pml: absorbing layer settings, inside the grid on every edge. An unset
            reference velocity is taken from m, so pass resolved settings
            when several models must share one Laplacian.
        mass: optional mass-spreading matrix B (identity when omitted).
    """
    grid = m.grid
    if omega <= 0:
        raise ValueError(f"angular frequency must be positive, got {omega}")
    if np.any(m.values <= 0):
        raise ValueError("squared slowness must be positive everywhere")
    pml = (pml or PMLSettings()).resolved(m)
    extents = [grid.nx] + ([grid.nz] if grid.nz > 1 else [])
    if pml.width and min(extents) <= 2 * pml.width:
        raise GridError(f"grid {grid.shape} too small for a {pml.width}-cell PML on both sides")

    frequency = omega / (2.0 * np.pi)
    ppw = points_per_wavelength(m, frequency)
    if ppw < MIN_POINTS_PER_WAVELENGTH:
        logger.warning(f"Only {ppw:.1f} points per wavelength at {frequency:g} Hz; expect dispersion")

    lap = pml_laplacian(grid, float(omega), pml)
    mass_term = sp.diags(omega ** 2 * m.values)
    if mass is not None:
        mass_term = mass_term @ mass
    matrix = sp.csc_matrix(lap + mass_term, dtype=complex)
    return HelmholtzOperator(grid, omega, matrix, lap, pml, mass)


def apply_operator(op: HelmholtzOperator, m: np.ndarray, u: np.ndarray) -> np.ndarray:
    """A(m) u for a model other than the one op was assembled with."""
    bu = u if op.mass is None else op.mass @ u
    return op.laplacian @ u + op.omega ** 2 * m * bu


def forward_solve(op: HelmholtzOperator, b: np.ndarray, source: int = 0) -> Wavefield:
    """u = A^-1 b with a sparse direct solve; the residual is checked."""
    b = np.asarray(b, dtype=complex)
    if b.shape != (op.grid.n,):
        raise GridError(f"source vector of shape {b.shape} does not match grid with n={op.grid.n}")
    if not np.any(b):
        return Wavefield(op.grid, np.zeros(op.grid.n, dtype=complex), source, op.frequency)
    u = op.factor.solve(b)
    residual = np.linalg.norm(op.matrix @ u - b) / np.linalg.norm(b)
    if not np.all(np.isfinite(u)) or residual > FORWARD_RESIDUAL_TOL:
        logger.error(f"Forward solve at {op.frequency:g} Hz left relative residual {residual:.3e}")
        raise NumericalFailure(f"ill-conditioned Helmholtz solve at {op.frequency:g} Hz "
                               f"(relative residual {residual:.3e})")
    return Wavefield(op.grid, u, source, op.frequency)


class WavefieldReconstructor:
    """
    Relaxed wavefield solves for one (m, omega): u minimizes
    (lambda/gamma) ||P u - d_aug||^2 + ||A u - b_aug||^2 through the normal
    equations, factorized once and reused for every source.
    """

    def __init__(self, op: HelmholtzOperator, acq: Acquisition, ratio: float):
        if ratio < 0:
            raise ValueError(f"lambda/gamma must be non-negative, got {ratio}")
        self.op = op
        self.acq = acq
        self.ratio = ratio
        p = acq.sampling
        self._adjoint = op.matrix.conj().T.tocsr()
        self.normal = sp.csc_matrix(ratio * (p.T @ p) + self._adjoint @ op.matrix)
        self._factor = _factorize(self.normal, f"wavefield normal matrix at {op.frequency:g} Hz")

    def normal_norm(self) -> float:
        """Infinity norm (largest absolute row sum) of the normal matrix."""
        return float(abs(self.normal).sum(axis=1).max())

    def rhs(self, d_aug: np.ndarray, b_aug: np.ndarray) -> np.ndarray:
        return self.ratio * (self.acq.sampling.T @ d_aug) + self._adjoint @ b_aug

    def solve(self, d_aug: np.ndarray, b_aug: np.ndarray, source: int = 0) -> Wavefield:
        rhs = self.rhs(np.asarray(d_aug, dtype=complex), np.asarray(b_aug, dtype=complex))
        u = self._factor.solve(rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0:
            residual = np.linalg.norm(self.normal @ u - rhs) / scale
            if not np.isfinite(residual) or residual > 1e-4:
                raise NumericalFailure(f"wavefield reconstruction at {self.op.frequency:g} Hz "
                                       f"left relative residual {residual:.3e}")
            if residual > 1e-9:
                logger.warning(f"Wavefield normal equations at {self.op.frequency:g} Hz solved to "
                               f"relative residual {residual:.3e}")
        return Wavefield(self.op.grid, u, source, self.op.frequency)


def reconstruct_wavefield(op: HelmholtzOperator, acq: Acquisition, d_aug: np.ndarray,
                          b_aug: np.ndarray, lam: float, gamma: float, source: int = 0) -> Wavefield:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return WavefieldReconstructor(op, acq, lam / gamma).solve(d_aug, b_aug, source)


def build_L(u: Wavefield, omega: float, mass: Optional[sp.spmatrix] = None) -> sp.dia_matrix:
    """L = dA/dm u = omega^2 diag(B u)."""
    bu = u.values if mass is None else mass @ u.values
    return sp.diags(omega ** 2 * bu)


def sample(u: Wavefield, acq: Acquisition) -> np.ndarray:
    return u.values[list(acq.receivers)]


def simulate(m: ScalarField, acq: Acquisition, frequencies: Sequence[float],
             pml: Optional[PMLSettings] = None) -> np.ndarray:
    """Noiseless data P A(m)^-1 b, shape (n_frequencies, n_sources, n_receivers)."""
    data = np.zeros((len(frequencies), acq.n_sources, acq.n_receivers), dtype=complex)
    for i, frequency in enumerate(frequencies):
        op = assemble(m, 2.0 * np.pi * frequency, pml)
        for s in range(acq.n_sources):
            u = forward_solve(op, source_vector(acq, s, frequency), s)
            data[i, s] = sample(u, acq)
        logger.info(f"Simulated {acq.n_sources} source(s) at {frequency:g} Hz")
    return data
