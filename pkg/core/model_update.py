"""
Regularized model update by inner ADMM.

The subproblem is solved for the normalized model x = m / m_ref, with the
wave-equation term gamma/2 ||L x - y||^2 where L = omega^2 diag(u) m_ref and
y = b + b_dual - Lap_pml u. L is complex and x real, so every normal-matrix
term uses Re(L^H .), summed over all sources and frequencies of a batch in
a fixed order.

Split kinds (TT, TGV) solve the coupled (m1, m2) system

    [G11 G12] [m1]   [h1]
    [G12 G22] [m2] = [h2]

with diagonal G12, by eliminating m2 (variable projection).
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from pydantic import BaseModel, Field

from core.field_ops import (GradField, Hess2Field, ModelGrid, ScalarField,
                            difference_operators, grad_forward, second_diff)
from core.helmholtz import HelmholtzOperator, Wavefield, build_L
from core.regularizers import (BoxBounds, RegularizerKind, RegularizerSpec,
                               project_box, shrink_isotropic)
from utils.errors import GridError, NumericalFailure

logger = logging.getLogger("model_update")


class SubproblemParams(BaseModel):
    """Penalty parameters, in normalized-model units."""

    gamma: float = Field(gt=0)
    zeta: float = Field(ge=0)
    eta: float = Field(gt=0)
    zeta2: Optional[float] = Field(default=None, gt=0)
    epsilon_factor: float = Field(default=1e-8, ge=0)
    inner_iterations: int = Field(default=1, ge=1)
    m_ref: float = Field(default=1.0, gt=0)

    @property
    def hessian_penalty(self) -> float:
        return self.zeta2 if self.zeta2 is not None else self.zeta


@dataclass(frozen=True)
class WaveTerm:
    """Diagonal of L and the right-hand side y for one source/frequency."""

    l: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class InnerState:
    p: GradField
    p_dual: GradField
    q: np.ndarray
    q_dual: np.ndarray
    r: Optional[Hess2Field] = None
    r_dual: Optional[Hess2Field] = None
    zeta: float = 0.0
    eta: float = 0.0
    zeta2: float = 0.0
    iterations: int = 0

    @property
    def grid(self) -> ModelGrid:
        return self.p.grid


@dataclass(frozen=True)
class JointSystem:
    """
    The 2n x 2n system stored as its diagonal coupling G12 = G21 and the
    parts of G11 and G22 beyond it (extra11 = G11 - G12, extra22 = G22 - G12).
    """

    coupling: np.ndarray
    extra11: sp.csr_matrix
    extra22: sp.csr_matrix
    h1: np.ndarray
    h2: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        n = self.coupling.size
        for name in ("h1", "h2"):
            if getattr(self, name).shape != (n,):
                raise GridError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        for name in ("extra11", "extra22"):
            if getattr(self, name).shape != (n, n):
                raise GridError(f"{name} has shape {getattr(self, name).shape}, expected ({n}, {n})")
        if np.any(self.coupling <= 0):
            raise NumericalFailure("coupling block G12 must be a strictly positive diagonal")

    @property
    def g12(self) -> sp.dia_matrix:
        return sp.diags(self.coupling)

    @property
    def g11(self) -> sp.csr_matrix:
        return (self.g12 + self.extra11).tocsr()

    @property
    def g22(self) -> sp.csr_matrix:
        return (self.g12 + self.extra22).tocsr()

    def full_matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.g11, self.g12], [self.g12, self.g22]], format="csr")

    @classmethod
    def from_blocks(cls, g11, g22, coupling: np.ndarray, h1: np.ndarray, h2: np.ndarray,
                    epsilon: float = 0.0) -> "JointSystem":
        coupling = np.asarray(coupling, dtype=float)
        d = sp.diags(coupling)
        return cls(coupling, sp.csr_matrix(g11 - d), sp.csr_matrix(g22 - d),
                   np.asarray(h1, dtype=float), np.asarray(h2, dtype=float), epsilon)


@dataclass(frozen=True)
class ModelUpdate:
    model: ScalarField
    split: Optional[Tuple[np.ndarray, np.ndarray]]
    state: InnerState


def linearize(op: HelmholtzOperator, u: Wavefield, b_aug: np.ndarray) -> WaveTerm:
    """A(m) u = Lap_pml u + L m, so the model enters through L and
    y = b_aug - Lap_pml u."""
    l = build_L(u, op.omega, op.mass).diagonal()
    return WaveTerm(l, np.asarray(b_aug, dtype=complex) - op.laplacian @ u.values)


def accumulate_terms(terms: Sequence[WaveTerm], m_ref: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Re(L^H L) and Re(L^H y) summed over the terms, for the model x = m / m_ref."""
    if not terms:
        raise ValueError("at least one wavefield term is required")
    lhl = np.zeros(terms[0].l.size)
    lhy = np.zeros(terms[0].l.size)
    for term in terms:
        lhl += np.abs(term.l) ** 2
        lhy += np.real(np.conj(term.l) * term.y)
    return lhl * m_ref ** 2, lhy * m_ref


def init_inner_state(spec: RegularizerSpec, grid: ModelGrid, x1: np.ndarray, x2: np.ndarray,
                     bounds: BoxBounds, params: SubproblemParams) -> InnerState:
    p = grad_forward(ScalarField(grid, x1))
    zeros_grad = GradField.from_stack(grid, np.zeros((2, grid.n)))
    r = r_dual = None
    if spec.kind == RegularizerKind.TGV:
        r = second_diff(ScalarField(grid, x2), spec.mixed_hessian)
        r_dual = Hess2Field.from_stack(grid, np.zeros_like(r.stack()), spec.mixed_hessian)
    return InnerState(p=p, p_dual=zeros_grad, q=project_box(x1 + x2, bounds), q_dual=np.zeros(grid.n),
                      r=r, r_dual=r_dual, zeta=params.zeta, eta=params.eta,
                      zeta2=params.hessian_penalty)


def _epsilon(factor: float, *diagonals: np.ndarray) -> float:
    return factor * float(np.mean(np.concatenate(diagonals)))


def assemble_joint(lhl: np.ndarray, lhy: np.ndarray, state: InnerState, gamma: float, alpha: float,
                   *, mixed: bool = False, tgv: bool = False,
                   epsilon_factor: float = 1e-8) -> JointSystem:
    """
    Blocks of the coupled (m1, m2) system:

        G11 = gamma L^T L + zeta grad^T grad + eta I
        G12 = gamma L^T L + eta I
        G22 = gamma L^T L + (1 - alpha) grad2^T grad2 + eta I     (TT)
        G22 = gamma L^T L + zeta2 grad2^T grad2 + eta I           (TGV)
        h1  = gamma L^T y + zeta grad^T (p + p~) + eta (q + q~)
        h2  = gamma L^T y + eta (q + q~)  [+ zeta2 grad2^T (r + r~)]

    lhl and lhy are the accumulated Re(L^H L) diagonal and Re(L^H y). eps I
    is added to G11 and G22 to remove the (v, -v) constant null direction.
    """
    grid = state.grid
    if lhl.shape != (grid.n,) or lhy.shape != (grid.n,):
        raise GridError(f"linearization terms do not match grid with n={grid.n}")
    ops = difference_operators(grid, mixed)
    grad, hess = ops.grad, ops.hess
    zeta, eta = state.zeta, state.eta

    coupling = gamma * lhl + eta
    extra11 = zeta * (grad.T @ grad)
    smooth_weight = state.zeta2 if tgv else (1.0 - alpha)
    extra22 = smooth_weight * (hess.T @ hess)
    eps = _epsilon(epsilon_factor, coupling + extra11.diagonal(), coupling + extra22.diagonal())
    eye = sp.identity(grid.n, format="csr")

    box_term = eta * (state.q + state.q_dual)
    h1 = gamma * lhy + zeta * (grad.T @ (state.p.stack() + state.p_dual.stack()).ravel()) + box_term
    h2 = gamma * lhy + box_term
    if tgv:
        h2 = h2 + state.zeta2 * (hess.T @ (state.r.stack() + state.r_dual.stack()).ravel())
    return JointSystem(coupling, (extra11 + eps * eye).tocsr(), (extra22 + eps * eye).tocsr(), h1, h2, eps)


def solve_variable_projection(system: JointSystem) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eliminate m2 = G12^-1 (h1 - G11 m1) and solve the n x n system for m1:

        (G12 - G22 G12^-1 G11) m1 = h2 - G22 G12^-1 h1

    With G11 = D + Y and G22 = D + X (D = G12 diagonal) the reduced matrix
    is -(X + Y + X D^-1 Y); it is formed in that cancellation-free form.
    """
    d = system.coupling
    x_part, y_part = system.extra22, system.extra11
    reduced = (x_part + y_part + x_part @ sp.diags(1.0 / d) @ y_part).tocsc()
    rhs = (system.h1 - system.h2) + x_part @ (system.h1 / d)
    try:
        m1 = spl.splu(reduced).solve(rhs)
    except RuntimeError as err:
        logger.error(f"Reduced joint system is singular (n={d.size}, min G12={d.min():.3e}, "
                     f"eps={system.epsilon:.3e}): {err}")
        raise NumericalFailure(f"singular reduced joint system (n={d.size}, min G12={d.min():.3e}, "
                               f"eps={system.epsilon:.3e})") from err
    m2 = (system.h1 - y_part @ m1) / d - m1
    if not (np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))):
        raise NumericalFailure(f"non-finite joint solution (n={d.size}, min G12={d.min():.3e})")
    return m1, m2


def inner_dual_ascent(state: InnerState, m1: np.ndarray, m2: np.ndarray, p: GradField, q: np.ndarray,
                      r: Optional[Hess2Field] = None, mixed: bool = False) -> InnerState:
    """p~ += p - grad m1, q~ += q - (m1 + m2), r~ += r - grad2 m2."""
    grid = state.grid
    grad_m1 = grad_forward(ScalarField(grid, m1)).stack()
    p_dual = GradField.from_stack(grid, state.p_dual.stack() + p.stack() - grad_m1)
    q_dual = state.q_dual + q - (m1 + m2)
    r_dual = state.r_dual
    if r is not None:
        hess_m2 = second_diff(ScalarField(grid, m2), mixed).stack()
        r_dual = Hess2Field.from_stack(grid, state.r_dual.stack() + r.stack() - hess_m2, mixed)
    return replace(state, p=p, p_dual=p_dual, q=q, q_dual=q_dual, r=r if r is not None else state.r,
                   r_dual=r_dual, iterations=state.iterations + 1)


def _solve_single(matrix: sp.spmatrix, rhs: np.ndarray, label: str) -> np.ndarray:
    try:
        x = spl.splu(sp.csc_matrix(matrix)).solve(rhs)
    except RuntimeError as err:
        logger.error(f"{label} normal matrix is singular (n={rhs.size}): {err}")
        raise NumericalFailure(f"singular {label} model system (n={rhs.size})") from err
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite {label} model update (n={rhs.size})")
    return x


def _quadratic_step(spec: RegularizerSpec, grid: ModelGrid, lhl: np.ndarray, lhy: np.ndarray,
                    state: InnerState, params: SubproblemParams) -> np.ndarray:
    """Single-variable update for DMP, Tikhonov, TV and JTT."""
    kind = spec.kind
    ops = difference_operators(grid, spec.mixed_hessian)
    diag = params.gamma * lhl + state.eta
    rhs = params.gamma * lhy + state.eta * (state.q + state.q_dual)
    if kind == RegularizerKind.DMP:
        return rhs / (diag + 1.0)

    matrix = sp.diags(diag)
    if kind in (RegularizerKind.TV, RegularizerKind.JTT) and state.zeta > 0:
        grad = ops.grad
        matrix = matrix + state.zeta * (grad.T @ grad)
        rhs = rhs + state.zeta * (grad.T @ (state.p.stack() + state.p_dual.stack()).ravel())
    if kind == RegularizerKind.TIKHONOV:
        matrix = matrix + ops.hess.T @ ops.hess
    elif kind == RegularizerKind.JTT and spec.alpha < 1.0:
        matrix = matrix + (1.0 - spec.alpha) * (ops.hess.T @ ops.hess)
    return _solve_single(matrix, rhs, kind.value)


def _gradient_weight(spec: RegularizerSpec) -> Optional[float]:
    """Weight of the l1 gradient term, None when the kind has none."""
    if spec.kind == RegularizerKind.TV:
        return 1.0
    if spec.kind in (RegularizerKind.JTT, RegularizerKind.TT, RegularizerKind.TGV):
        return spec.alpha
    return None


def update_model(terms: Sequence[WaveTerm], m_prev: ScalarField, spec: RegularizerSpec,
                 bounds: BoxBounds, params: SubproblemParams, state: Optional[InnerState] = None,
                 split: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ModelUpdate:
    """
    Run `params.inner_iterations` inner ADMM iterations of the model
    subproblem: model solve, gradient shrinkage (p), box projection (q),
    Hessian shrinkage (r, TGV only) and dual ascent.

    Args:
        terms: linearized wave-equation terms for every source/frequency.
        m_prev: current squared-slowness model.
        spec: regularizer choice.
        bounds: box constraint in squared-slowness units.
        params: penalties (normalized units) and the normalization m_ref.
        state: inner state carried over from the previous outer iteration.
        split: physical (m1, m2) carried over for TT/TGV.

    Returns:
        ModelUpdate with m = m1 + m2, the split (TT/TGV) and the new state.
    """
    grid = m_prev.grid
    m_ref = params.m_ref
    kind = spec.kind
    lhl, lhy = accumulate_terms(terms, m_ref)
    box = bounds.scaled(1.0 / m_ref)
    x_prev = m_prev.values / m_ref

    if kind.is_split:
        x1, x2 = (split[0] / m_ref, split[1] / m_ref) if split is not None \
            else (np.zeros(grid.n), x_prev.copy())
    else:
        x1, x2 = x_prev.copy(), np.zeros(grid.n)
    if state is None:
        state = init_inner_state(spec, grid, x1, x2, box, params)
    state = replace(state, zeta=params.zeta, eta=params.eta, zeta2=params.hessian_penalty)

    weight = _gradient_weight(spec)
    for _ in range(params.inner_iterations):
        # --- model solve ---
        if kind.is_split:
            system = assemble_joint(lhl, lhy, state, params.gamma, spec.alpha, mixed=spec.mixed_hessian,
                                    tgv=kind == RegularizerKind.TGV, epsilon_factor=params.epsilon_factor)
            x1, x2 = solve_variable_projection(system)
        else:
            x1 = _quadratic_step(spec, grid, lhl, lhy, state, params)
            x2 = np.zeros(grid.n)

        # --- gradient shrinkage ---
        grad_x1 = grad_forward(ScalarField(grid, x1))
        if weight is not None and state.zeta > 0:
            z = GradField.from_stack(grid, grad_x1.stack() - state.p_dual.stack())
            p = shrink_isotropic(z, weight / state.zeta)
        else:
            p = grad_x1

        # --- box projection ---
        q = project_box(x1 + x2 - state.q_dual, box)

        # --- hessian shrinkage (TGV) ---
        r = None
        if kind == RegularizerKind.TGV:
            hess_x2 = second_diff(ScalarField(grid, x2), spec.mixed_hessian)
            z2 = Hess2Field.from_stack(grid, hess_x2.stack() - state.r_dual.stack(), spec.mixed_hessian)
            r = shrink_isotropic(z2, (1.0 - spec.alpha) / state.zeta2)

        state = inner_dual_ascent(state, x1, x2, p, q, r, spec.mixed_hessian)

    logger.debug(f"{kind.value} update after {state.iterations} inner iterations: "
                 f"|p - grad m1| = {np.linalg.norm(state.p.stack() - grad_forward(ScalarField(grid, x1)).stack()):.3e}, "
                 f"|q - m| = {np.linalg.norm(state.q - x1 - x2):.3e}")
    model = ScalarField(grid, m_ref * (x1 + x2))
    out_split = (m_ref * x1, m_ref * x2) if kind.is_split else None
    return ModelUpdate(model, out_split, state)
