"""
Regularizer catalog, proximal maps and box projection.

    DMP       ||m||_2^2
    Tikhonov  ||grad2 m||_2^2
    TV        || |grad m| ||_1
    JTT       (1 - a) ||grad2 m||_2^2 + a || |grad m| ||_1
    TT        min_{m = m1 + m2} (1 - a) ||grad2 m2||_2^2 + a || |grad m1| ||_1
    TGV       min_{m = m1 + m2} (1 - a) || |grad2 m2| ||_1 + a || |grad m1| ||_1

All l1 terms are isotropic (group) norms over the gradient or Hessian
components of each cell.
"""
import logging
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from pydantic import BaseModel, ConfigDict, model_validator

from core.field_ops import (GradField, Hess2Field, ModelGrid, ScalarField,
                            difference_operators)

logger = logging.getLogger("regularizers")


class RegularizerKind(str, Enum):
    DMP = "DMP"
    TIKHONOV = "Tikhonov"
    TV = "TV"
    JTT = "JTT"
    TT = "TT"
    TGV = "TGV"

    @property
    def is_split(self) -> bool:
        """Infimal-convolution kinds carry a blocky + smooth decomposition."""
        return self in (RegularizerKind.TT, RegularizerKind.TGV)

    @property
    def uses_alpha(self) -> bool:
        return self in (RegularizerKind.JTT, RegularizerKind.TT, RegularizerKind.TGV)


class RegularizerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: RegularizerKind
    alpha: float = 0.5
    mixed_hessian: bool = False

    @model_validator(mode="after")
    def _alpha_range(self):
        if self.kind.is_split and not 0.0 < self.alpha < 1.0:
            # the infimum collapses to 0 at either endpoint
            raise ValueError(f"{self.kind.value} needs 0 < alpha < 1, got {self.alpha}")
        if self.kind == RegularizerKind.JTT and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"JTT needs 0 <= alpha <= 1, got {self.alpha}")
        return self


class BoxBounds(BaseModel):
    """Elementwise bounds in squared-slowness units (scalars or arrays)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lower: Union[float, np.ndarray]
    upper: Union[float, np.ndarray]

    @model_validator(mode="after")
    def _ordered(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("lower bound exceeds upper bound")
        return self

    @classmethod
    def unbounded(cls) -> "BoxBounds":
        return cls(lower=-np.inf, upper=np.inf)

    @classmethod
    def from_velocities(cls, v_min: float, v_max: float) -> "BoxBounds":
        return cls(lower=1.0 / v_max ** 2, upper=1.0 / v_min ** 2)

    def scaled(self, factor: float) -> "BoxBounds":
        return BoxBounds(lower=np.asarray(self.lower) * factor, upper=np.asarray(self.upper) * factor)


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def soft_threshold(x: np.ndarray, alpha: float) -> np.ndarray:
    """Minimizer of (1 - alpha)(x - z)^2 + alpha |z| for each entry."""
    _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    mag = np.abs(x)
    threshold = alpha / (2.0 * (1.0 - alpha))
    factor = np.zeros_like(mag)
    np.divide(threshold, mag, out=factor, where=mag > 0)
    return np.maximum(1.0 - factor, 0.0) * x


def huber_eval(x: np.ndarray, alpha: float) -> float:
    """Infimal convolution of (1 - alpha)|.|^2 and alpha|.|, summed."""
    _check_alpha(alpha)
    mag = np.abs(np.asarray(x, dtype=float))
    knee = alpha / (2.0 * (1.0 - alpha))
    values = np.where(mag <= knee, (1.0 - alpha) * mag ** 2,
                      alpha * mag - alpha ** 2 / (4.0 * (1.0 - alpha)))
    return float(np.sum(values))


def _group_shrink(stack: np.ndarray, threshold: float) -> np.ndarray:
    mag = np.sqrt(np.sum(stack ** 2, axis=0))
    ratio = np.ones_like(mag)
    np.divide(threshold, mag, out=ratio, where=mag > 0)
    return np.maximum(1.0 - ratio, 0.0) * stack


def shrink_isotropic(z: Union[GradField, Hess2Field], threshold: float) -> Union[GradField, Hess2Field]:
    """Per-cell prox of threshold * ||.||_2: shrinks the magnitude by
    `threshold`, zeroing cells whose magnitude does not exceed it."""
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    shrunk = _group_shrink(z.stack(), threshold)
    if isinstance(z, GradField):
        return GradField.from_stack(z.grid, shrunk)
    return Hess2Field.from_stack(z.grid, shrunk, z.mixed)


def project_box(x: np.ndarray, bounds: BoxBounds) -> np.ndarray:
    return np.minimum(np.maximum(x, bounds.lower), bounds.upper)


def _l1_group(stack: np.ndarray) -> float:
    return float(np.sum(np.sqrt(np.sum(stack ** 2, axis=0))))


def _tv(grid: ModelGrid, values: np.ndarray) -> float:
    return _l1_group((difference_operators(grid).grad @ values).reshape(2, -1))


def _hess_stack(grid: ModelGrid, values: np.ndarray, mixed: bool) -> np.ndarray:
    hess = difference_operators(grid, mixed).hess
    return (hess @ values).reshape(-1, grid.n)


def split_objective(spec: RegularizerSpec, grid: ModelGrid, m1: np.ndarray, m2: np.ndarray) -> float:
    """Objective of an explicit decomposition; an upper bound on TT/TGV."""
    blocky = spec.alpha * _tv(grid, m1)
    smooth_stack = _hess_stack(grid, m2, spec.mixed_hessian)
    if spec.kind == RegularizerKind.TT:
        return blocky + (1.0 - spec.alpha) * float(np.sum(smooth_stack ** 2))
    return blocky + (1.0 - spec.alpha) * _l1_group(smooth_stack)


def infimal_split(spec: RegularizerSpec, m: ScalarField, iterations: int = 2000,
                  rho: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Numerical decomposition m = m1 + m2 minimizing the TT/TGV objective by
    ADMM on the smooth component. Meant for small instances; the better of
    the result and the two trivial splits is returned.
    """
    grid, values = m.grid, m.values
    ops = difference_operators(grid, spec.mixed_hessian)
    grad, hess = ops.grad, ops.hess
    alpha = spec.alpha
    eps = 1e-10 * rho
    tgv = spec.kind == RegularizerKind.TGV

    if tgv:
        system = rho * (grad.T @ grad) + rho * (hess.T @ hess)
    else:
        system = 2.0 * (1.0 - alpha) * (hess.T @ hess) + rho * (grad.T @ grad)
    factor = spl.splu(sp.csc_matrix(system + eps * sp.identity(grid.n)))

    m2 = np.zeros(grid.n)
    dm = grad @ values
    p = dm.copy()
    w = np.zeros_like(p)
    r = np.zeros(hess.shape[0])
    v = np.zeros_like(r)
    for _ in range(iterations):
        rhs = rho * (grad.T @ (dm - p + w))
        if tgv:
            rhs = rhs + rho * (hess.T @ (r - v))
        m2 = factor.solve(rhs)
        dm1 = dm - grad @ m2
        p = _group_shrink((dm1 + w).reshape(2, -1), alpha / rho).ravel()
        w = w + dm1 - p
        if tgv:
            hm2 = hess @ m2
            r = _group_shrink((hm2 + v).reshape(-1, grid.n), (1.0 - alpha) / rho).ravel()
            v = v + hm2 - r

    candidates = [(values - m2, m2), (values, np.zeros(grid.n)), (np.zeros(grid.n), values)]
    return min(candidates, key=lambda pair: split_objective(spec, grid, *pair))


def eval_regularizer(spec: RegularizerSpec, m: ScalarField,
                     split: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> float:
    """Value of the regularizer for model m (definitions in the module docstring).

    For TT/TGV a given split is evaluated as is; without one the infimum is
    approximated numerically.
    """
    grid, values = m.grid, m.values
    kind = spec.kind
    if kind == RegularizerKind.DMP:
        return float(np.sum(values ** 2))
    if kind == RegularizerKind.TIKHONOV:
        return float(np.sum(_hess_stack(grid, values, spec.mixed_hessian) ** 2))
    if kind == RegularizerKind.TV:
        return _tv(grid, values)
    if kind == RegularizerKind.JTT:
        tik = float(np.sum(_hess_stack(grid, values, spec.mixed_hessian) ** 2))
        tv = _tv(grid, values)
        if spec.alpha == 0.0:
            return tik
        if spec.alpha == 1.0:
            return tv
        return (1.0 - spec.alpha) * tik + spec.alpha * tv
    if kind.is_split:
        if split is None:
            split = infimal_split(spec, m)
        return split_objective(spec, grid, *split)
    raise ValueError(f"unsupported regularizer kind {kind}")
