"""
Grid definition and discrete difference operators.

Fields are stored as flat arrays of length n = nx * nz, row-major with z
fastest: the value at (ix, iz) lives at index ix * nz + iz. A 1D grid has
nz = 1 and varies along x.

Cells that lack the neighbour a stencil needs output 0, so the gradient of
a constant and the second differences of an affine field vanish exactly.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field

from utils.errors import GridError


class ModelGrid(BaseModel):
    """Uniform isotropic rectangular grid."""

    model_config = ConfigDict(frozen=True)

    nx: int = Field(ge=3)
    nz: int = Field(default=1, ge=1)
    h: float = Field(gt=0)

    @property
    def n(self) -> int:
        return self.nx * self.nz

    @property
    def shape(self) -> tuple:
        return (self.nx, self.nz)

    @property
    def dim(self) -> int:
        return 1 if self.nz == 1 else 2

    def index(self, ix: int, iz: int = 0) -> int:
        if not (0 <= ix < self.nx and 0 <= iz < self.nz):
            raise GridError(f"cell ({ix}, {iz}) outside grid {self.shape}")
        return ix * self.nz + iz

    def as_array(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).reshape(self.shape)


@dataclass(frozen=True)
class ScalarField:
    grid: ModelGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1 or values.size != self.grid.n:
            raise GridError(f"field of size {values.size} does not match grid with n={self.grid.n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class GradField:
    x: ScalarField
    z: ScalarField

    def __post_init__(self):
        if self.x.grid != self.z.grid:
            raise GridError("gradient components live on different grids")

    @property
    def grid(self) -> ModelGrid:
        return self.x.grid

    def stack(self) -> np.ndarray:
        return np.vstack([self.x.values, self.z.values])

    @classmethod
    def from_stack(cls, grid: ModelGrid, arr: np.ndarray) -> "GradField":
        return cls(ScalarField(grid, arr[0]), ScalarField(grid, arr[1]))


@dataclass(frozen=True)
class Hess2Field:
    """Second differences. The xz component is stored unscaled; it counts
    twice in magnitudes and inner products."""

    xx: ScalarField
    zz: ScalarField
    xz: Optional[ScalarField] = None
    mixed: bool = False

    def __post_init__(self):
        if (self.xz is not None) != self.mixed:
            raise GridError("xz component must be present iff mixed=True")
        grids = {self.xx.grid, self.zz.grid} | ({self.xz.grid} if self.xz is not None else set())
        if len(grids) != 1:
            raise GridError("hessian components live on different grids")

    @property
    def grid(self) -> ModelGrid:
        return self.xx.grid

    def stack(self) -> np.ndarray:
        """Components as rows, mixed term scaled by sqrt(2) so plain
        Euclidean norms of the stack equal Frobenius norms."""
        rows = [self.xx.values]
        if self.mixed:
            rows.append(np.sqrt(2.0) * self.xz.values)
        rows.append(self.zz.values)
        return np.vstack(rows)

    @classmethod
    def from_stack(cls, grid: ModelGrid, arr: np.ndarray, mixed: bool) -> "Hess2Field":
        if mixed:
            return cls(ScalarField(grid, arr[0]), ScalarField(grid, arr[2]),
                       ScalarField(grid, arr[1] / np.sqrt(2.0)), True)
        return cls(ScalarField(grid, arr[0]), ScalarField(grid, arr[1]))


def _first_diff_1d(count: int) -> sp.csr_matrix:
    if count < 2:
        return sp.csr_matrix((count, count))
    # row 0 has no left neighbour
    main = np.ones(count)
    main[0] = 0.0
    return sp.diags([main, -np.ones(count - 1)], [0, -1], shape=(count, count), format="csr")


def _second_diff_1d(count: int) -> sp.csr_matrix:
    if count < 3:
        return sp.csr_matrix((count, count))
    inner = np.ones(count)
    inner[0] = inner[-1] = 0.0
    return sp.diags([inner[1:], -2.0 * inner, inner[:-1]], [-1, 0, 1],
                    shape=(count, count), format="csr")


@dataclass(frozen=True)
class DifferenceOperators:
    """Sparse difference matrices for one grid."""

    dx: sp.csr_matrix
    dz: sp.csr_matrix
    dxx: sp.csr_matrix
    dzz: sp.csr_matrix
    dxz: sp.csr_matrix
    mixed: bool

    @property
    def grad(self) -> sp.csr_matrix:
        """Stacked first-order operator, 2n x n."""
        return sp.vstack([self.dx, self.dz], format="csr")

    @property
    def hess(self) -> sp.csr_matrix:
        """Stacked second-order operator [dxx; sqrt(2) dxz; dzz] (mixed)
        or [dxx; dzz]."""
        blocks = [self.dxx]
        if self.mixed:
            blocks.append(np.sqrt(2.0) * self.dxz)
        blocks.append(self.dzz)
        return sp.vstack(blocks, format="csr")


@lru_cache(maxsize=32)
def difference_operators(grid: ModelGrid, mixed: bool = False) -> DifferenceOperators:
    eye_x = sp.identity(grid.nx, format="csr")
    eye_z = sp.identity(grid.nz, format="csr")
    dx = sp.kron(_first_diff_1d(grid.nx), eye_z, format="csr")
    dz = sp.kron(eye_x, _first_diff_1d(grid.nz), format="csr")
    dxx = sp.kron(_second_diff_1d(grid.nx), eye_z, format="csr")
    dzz = sp.kron(eye_x, _second_diff_1d(grid.nz), format="csr")
    dxz = (dz @ dx).tocsr()
    return DifferenceOperators(dx, dz, dxx, dzz, dxz, mixed)


def _check_real(f: ScalarField):
    if np.iscomplexobj(f.values):
        raise ValueError("difference operators act on real-valued fields")


def _check_second_order(grid: ModelGrid):
    if grid.nz == 2:
        raise GridError("second differences along z need nz >= 3 (or nz == 1 for 1D)")


def grad_forward(f: ScalarField) -> GradField:
    """Forward differences (f[i] - f[i-1]) along x and z."""
    _check_real(f)
    ops = difference_operators(f.grid)
    return GradField(ScalarField(f.grid, ops.dx @ f.values), ScalarField(f.grid, ops.dz @ f.values))


def grad_adjoint(g: GradField) -> ScalarField:
    ops = difference_operators(g.grid)
    return ScalarField(g.grid, ops.dx.T @ g.x.values + ops.dz.T @ g.z.values)


def second_diff(f: ScalarField, mixed: bool = False) -> Hess2Field:
    """Central second differences; xz = f[i,j] - f[i,j-1] - f[i-1,j] + f[i-1,j-1]."""
    _check_real(f)
    _check_second_order(f.grid)
    ops = difference_operators(f.grid, mixed)
    grid = f.grid
    xz = ScalarField(grid, ops.dxz @ f.values) if mixed else None
    return Hess2Field(ScalarField(grid, ops.dxx @ f.values), ScalarField(grid, ops.dzz @ f.values), xz, mixed)


def second_diff_adjoint(h: Hess2Field) -> ScalarField:
    """Adjoint of second_diff under hess_inner."""
    _check_second_order(h.grid)
    ops = difference_operators(h.grid, h.mixed)
    out = ops.dxx.T @ h.xx.values + ops.dzz.T @ h.zz.values
    if h.mixed:
        out = out + 2.0 * (ops.dxz.T @ h.xz.values)
    return ScalarField(h.grid, out)


def hess_inner(a: Hess2Field, b: Hess2Field) -> float:
    """Frobenius inner product of two Hessian fields."""
    return float(np.sum(a.stack() * b.stack()))


def magnitude(g: Union[GradField, Hess2Field]) -> ScalarField:
    """Pointwise Euclidean magnitude; for Hessians the Frobenius norm."""
    return ScalarField(g.grid, np.sqrt(np.sum(g.stack() ** 2, axis=0)))


def model_error(m: np.ndarray, m_true: np.ndarray) -> float:
    """Relative l2 error ||m - m_true|| / ||m_true||; layout-independent."""
    m = np.ravel(np.asarray(m, dtype=float))
    m_true = np.ravel(np.asarray(m_true, dtype=float))
    if m.shape != m_true.shape:
        raise GridError(f"model of size {m.size} does not match reference of size {m_true.size}")
    norm = np.linalg.norm(m_true)
    if norm == 0:
        raise ValueError("reference model is identically zero")
    return float(np.linalg.norm(m - m_true) / norm)
