"""
Outer IR-WRI loop: wavefield reconstruction, regularized model update and
dual refinement, with stopping rules and frequency continuation.

Per outer iteration and frequency/source:

    u      <- argmin (lambda/gamma) ||P u - d - d_k||^2 + ||A(m) u - b - b_k||^2
    m      <- update_model(...)                 (all sources of the batch)
    d_k    <- d_k + d - P u
    b_k    <- b_k + b - A(m_new) u
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.field_ops import ScalarField, model_error
from core.helmholtz import (Acquisition, PMLSettings, Wavefield, WavefieldReconstructor,
                            apply_operator, assemble, sample, source_vector)
from core.model_update import (InnerState, SubproblemParams, accumulate_terms,
                               linearize, update_model)
from core.regularizers import (BoxBounds, RegularizerSpec, eval_regularizer,
                               project_box)
from utils.errors import MissingFrequencyData, NumericalFailure

logger = logging.getLogger("irwri")

STOP_TOLERANCE = "tolerance"
STOP_K_MAX = "k_max"
# fraction of m_ref below which the model is floored before assembly
POSITIVITY_FLOOR = 1e-3


class PenaltySettings(BaseModel):
    """Dimensionless knobs behind the per-batch penalty selection."""

    model_config = ConfigDict(frozen=True)

    lambda_over_gamma: float = Field(default=1e2, gt=0)
    gamma_scale: float = Field(default=1e3, gt=0)
    gamma_rule: Literal["fixed", "balanced"] = "fixed"
    zeta_scale: float = Field(default=0.1, ge=0)
    eta_scale: float = Field(default=0.1, gt=0)
    zeta2_scale: Optional[float] = Field(default=None, gt=0)
    epsilon_factor: float = Field(default=1e-8, ge=0)
    inner_iterations: int = Field(default=1, ge=1)


class BatchPenalties(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch: int
    lambda_over_gamma: float
    gamma: float
    zeta: float
    eta: float
    zeta2: float
    epsilon_factor: float
    inner_iterations: int
    m_ref: float

    def to_params(self) -> SubproblemParams:
        return SubproblemParams(gamma=self.gamma, zeta=self.zeta, eta=self.eta, zeta2=self.zeta2,
                                epsilon_factor=self.epsilon_factor,
                                inner_iterations=self.inner_iterations, m_ref=self.m_ref)


class ContinuationSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    batches: List[List[float]]
    k_max: int = Field(default=15, ge=1)
    first_batch_k_max: Optional[int] = Field(default=None, ge=1)
    eps_b: float = Field(default=1e-3, ge=0)
    eps_d: float = Field(default=1e-5, ge=0)
    bound_activation: int = Field(default=0, ge=0)
    paths: int = Field(default=1, ge=1)

    @field_validator("batches")
    @classmethod
    def _positive_frequencies(cls, batches):
        if not batches or any(not batch for batch in batches):
            raise ValueError("schedule needs at least one non-empty frequency batch")
        for batch in batches:
            if any(f <= 0 for f in batch):
                raise ValueError(f"frequencies must be positive, got {batch}")
        return batches

    def k_max_for(self, batch_index: int, path: int) -> int:
        if batch_index == 0 and path == 0 and self.first_batch_k_max is not None:
            return self.first_batch_k_max
        return self.k_max


class ConvergenceRecord(BaseModel):
    # data_res = ||P u - d||_2 and wave_res = ||A(m_new) u - b||_2 over every
    # frequency and source of the batch, absolute like eps_d and eps_b
    iteration: int
    batch: int
    data_res: float = Field(ge=0)
    wave_res: float = Field(ge=0)
    model_err: Optional[float] = None
    reg_value: float
    stop: str = ""


@dataclass(frozen=True)
class BatchProblem:
    """Observed data for one frequency batch, shape (nf, n_sources, n_receivers)."""

    acq: Acquisition
    frequencies: Tuple[float, ...]
    data: np.ndarray
    pml: PMLSettings = field(default_factory=PMLSettings)

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        data = np.asarray(self.data, dtype=complex)
        expected = (len(self.frequencies), self.acq.n_sources, self.acq.n_receivers)
        if data.shape != expected:
            raise ValueError(f"observed data of shape {data.shape}, expected {expected}")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class OuterState:
    m: ScalarField
    d_dual: np.ndarray
    b_dual: np.ndarray
    m_ref: float
    split: Optional[Tuple[np.ndarray, np.ndarray]] = None
    iteration: int = 0
    batch: int = 0
    inner: Optional[InnerState] = None
    penalties: Optional[BatchPenalties] = None
    wavefields: Tuple[Wavefield, ...] = ()
    records: Tuple[ConvergenceRecord, ...] = ()


@dataclass
class InversionResult:
    model: ScalarField
    split: Optional[Tuple[np.ndarray, np.ndarray]]
    records: List[ConvergenceRecord]
    penalties: List[BatchPenalties]


def init_outer_state(problem: BatchProblem, m: ScalarField, m_ref: Optional[float] = None,
                     split: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                     iteration: int = 0, batch: int = 0) -> OuterState:
    """Fresh state for a batch: duals start at zero."""
    acq = problem.acq
    nf = len(problem.frequencies)
    return OuterState(
        m=m,
        d_dual=np.zeros((nf, acq.n_sources, acq.n_receivers), dtype=complex),
        b_dual=np.zeros((nf, acq.n_sources, acq.grid.n), dtype=complex),
        m_ref=float(np.mean(m.values)) if m_ref is None else m_ref,
        split=split,
        iteration=iteration,
        batch=batch,
    )


def select_penalties(lhl: np.ndarray, settings: PenaltySettings, m_ref: float, batch: int = 0,
                     normal_norm: Optional[float] = None) -> BatchPenalties:
    """
    gamma = target / ||L^T L||_inf and zeta = eta = scale * gamma ||L^T L||_inf,
    for the normalized model; lhl is the accumulated diagonal of Re(L^H L).

    The target is gamma_scale, or with gamma_rule = "balanced" the
    infinity norm of the wavefield normal matrix (lambda/gamma) P^T P + A^H A
    (normal_norm, largest over the batch).
    """
    norm = float(np.max(lhl))
    if not np.isfinite(norm) or norm <= 0:
        raise NumericalFailure(f"cannot scale penalties for batch {batch}: ||L^T L|| = {norm}")
    if settings.gamma_rule == "balanced":
        if normal_norm is None or not np.isfinite(normal_norm) or normal_norm <= 0:
            raise NumericalFailure(f"cannot balance penalties for batch {batch}: normal matrix norm {normal_norm}")
        target = float(normal_norm)
    else:
        target = settings.gamma_scale
    gamma = target / norm
    zeta = settings.zeta_scale * target
    eta = settings.eta_scale * target
    zeta2 = settings.zeta2_scale * target if settings.zeta2_scale is not None else (zeta or eta)
    penalties = BatchPenalties(batch=batch, lambda_over_gamma=settings.lambda_over_gamma, gamma=gamma,
                               zeta=zeta, eta=eta, zeta2=zeta2, epsilon_factor=settings.epsilon_factor,
                               inner_iterations=settings.inner_iterations, m_ref=m_ref)
    logger.info(f"Batch {batch} penalties: lambda/gamma={penalties.lambda_over_gamma:g}, gamma={gamma:.4e}, "
                f"zeta={zeta:.4e}, eta={eta:.4e}, zeta2={zeta2:.4e}, m_ref={m_ref:.4e}")
    return penalties


def check_stop(data_res: float, wave_res: float, eps_b: float, eps_d: float, k: int, k_max: int) -> Optional[str]:
    """Stop reason, or None to continue."""
    if wave_res <= eps_b and data_res <= eps_d:
        return STOP_TOLERANCE
    if k >= k_max:
        return STOP_K_MAX
    return None


def _model_for_assembly(state: OuterState) -> ScalarField:
    values = state.m.values
    floor = POSITIVITY_FLOOR * state.m_ref
    if np.all(values > floor):
        return state.m
    logger.warning(f"Iteration {state.iteration + 1}: {np.sum(values <= floor)} cell(s) below the "
                   f"positivity floor {floor:.3e}; floored for the wavefield solve")
    return ScalarField(state.m.grid, np.maximum(values, floor))


def outer_step(state: OuterState, problem: BatchProblem, spec: RegularizerSpec, settings: PenaltySettings,
               bounds: Optional[BoxBounds] = None, m_true: Optional[np.ndarray] = None,
               threads: int = 1) -> OuterState:
    """
    One outer iteration. Penalties are selected from the first wavefields of
    a batch and kept for the rest of it.

    Returns:
        The new OuterState, with one more ConvergenceRecord.
    """
    acq = problem.acq
    m_eval = _model_for_assembly(state)
    # an unset PML reference is pinned to m_ref, which is constant over the run
    pml = problem.pml.resolved(ScalarField(acq.grid, np.full(acq.grid.n, state.m_ref)))
    ratio = settings.lambda_over_gamma if state.penalties is None else state.penalties.lambda_over_gamma

    # --- wavefield reconstruction ---
    ops, wavefields, terms, sources = [], [], [], []
    normal_norm = 0.0
    for fi, frequency in enumerate(problem.frequencies):
        op = assemble(m_eval, 2.0 * np.pi * frequency, pml)
        recon = WavefieldReconstructor(op, acq, ratio)
        if state.penalties is None and settings.gamma_rule == "balanced":
            normal_norm = max(normal_norm, recon.normal_norm())
        b_src = [source_vector(acq, s, frequency) for s in range(acq.n_sources)]

        def solve(s, fi=fi, recon=recon, b_src=b_src):
            return recon.solve(problem.data[fi, s] + state.d_dual[fi, s], b_src[s] + state.b_dual[fi, s], s)

        if threads > 1 and acq.n_sources > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                fields = list(pool.map(solve, range(acq.n_sources)))
        else:
            fields = [solve(s) for s in range(acq.n_sources)]
        for s, u in enumerate(fields):
            terms.append(linearize(op, u, b_src[s] + state.b_dual[fi, s]))
        ops.append(op)
        wavefields.extend(fields)
        sources.append(b_src)

    # --- model update ---
    penalties = state.penalties
    if penalties is None:
        lhl, _ = accumulate_terms(terms, state.m_ref)
        penalties = select_penalties(lhl, settings, state.m_ref, state.batch, normal_norm)
    update = update_model(terms, state.m, spec, bounds or BoxBounds.unbounded(), penalties.to_params(),
                          state.inner, state.split)
    m_new = update.model

    # --- dual updates ---
    d_dual = state.d_dual.copy()
    b_dual = state.b_dual.copy()
    data_sq = wave_sq = 0.0
    for fi, op in enumerate(ops):
        for s in range(acq.n_sources):
            u = wavefields[fi * acq.n_sources + s]
            data_gap = problem.data[fi, s] - sample(u, acq)
            wave_gap = sources[fi][s] - apply_operator(op, m_new.values, u.values)
            d_dual[fi, s] += data_gap
            b_dual[fi, s] += wave_gap
            data_sq += np.vdot(data_gap, data_gap).real
            wave_sq += np.vdot(wave_gap, wave_gap).real

    iteration = state.iteration + 1
    record = ConvergenceRecord(
        iteration=iteration,
        batch=state.batch,
        data_res=float(np.sqrt(data_sq)),
        wave_res=float(np.sqrt(wave_sq)),
        model_err=model_error(m_new.values, m_true) if m_true is not None else None,
        reg_value=eval_regularizer(spec, m_new, update.split),
    )
    message = (f"Iteration {iteration} (batch {state.batch}): data_res={record.data_res:.4e}, "
               f"wave_res={record.wave_res:.4e}, reg={record.reg_value:.4e}"
               + (f", model_err={record.model_err:.4e}" if record.model_err is not None else ""))
    logger.log(logging.INFO if iteration % 10 == 0 else logging.DEBUG, message)

    return replace(state, m=m_new, split=update.split, d_dual=d_dual, b_dual=b_dual, iteration=iteration,
                   inner=update.state, penalties=penalties, wavefields=tuple(wavefields),
                   records=state.records + (record,))


def build_paths(ranges: Sequence[Tuple[float, float]], batch_size: int = 2, step: float = 0.5,
                overlap: int = 1) -> List[List[float]]:
    """
    Frequency batches for each [start, stop] range, sampled every `step` Hz,
    `batch_size` frequencies per batch with `overlap` shared between
    consecutive batches. Paths are concatenated in order.
    """
    if batch_size < 1 or not 0 <= overlap < batch_size:
        raise ValueError(f"need batch_size >= 1 and 0 <= overlap < batch_size, got {batch_size}, {overlap}")
    if step <= 0:
        raise ValueError(f"frequency step must be positive, got {step}")
    batches = []
    for start, stop in ranges:
        if start <= 0 or stop < start:
            raise ValueError(f"invalid frequency range [{start}, {stop}]")
        freqs = [round(f, 10) for f in np.arange(start, stop + step / 2.0, step)]
        if len(freqs) <= batch_size:
            batches.append(freqs)
            continue
        stride = batch_size - overlap
        i = 0
        while i + batch_size <= len(freqs):
            batches.append(freqs[i:i + batch_size])
            i += stride
        if batches[-1][-1] != freqs[-1]:
            batches.append(freqs[-batch_size:])
    return batches


def _lookup(observed: Mapping[float, np.ndarray], frequency: float) -> np.ndarray:
    for key, value in observed.items():
        if np.isclose(key, frequency, rtol=0.0, atol=1e-9):
            return value
    raise MissingFrequencyData(f"no observed data at {frequency:g} Hz "
                               f"(available: {sorted(float(k) for k in observed)})")


def run_continuation(schedule: ContinuationSchedule, acq: Acquisition, observed: Mapping[float, np.ndarray],
                     m0: ScalarField, spec: RegularizerSpec, settings: Optional[PenaltySettings] = None,
                     bounds: Optional[BoxBounds] = None, m_true: Optional[np.ndarray] = None,
                     pml: Optional[PMLSettings] = None, threads: int = 1,
                     on_batch: Optional[Callable[[int, ScalarField], None]] = None) -> InversionResult:
    """
    Invert the schedule's batches from low to high frequency, warm-starting
    each batch from the previous model and split. Duals and penalties are
    reset at every batch. Bounds apply from iteration `bound_activation` + 1
    of the very first batch and from the start of every later one.

    Args:
        schedule: batches, stopping rules and the activation iteration.
        acq: acquisition shared by every frequency.
        observed: frequency (Hz) -> data of shape (n_sources, n_receivers).
        m0: starting squared-slowness model.
        spec: regularizer.
        settings: penalty knobs (defaults when omitted).
        bounds: box constraint in squared-slowness units, or None.
        m_true: true model for the model-error column.
        pml: absorbing layer settings; an unset reference velocity is pinned
            to the fastest cell of m0 for the whole run.
        threads: worker threads for per-source wavefield solves.
        on_batch: called with (batch index, model) after every batch.

    Returns:
        InversionResult with the final model (projected onto the bounds) and
        the full convergence log.
    """
    settings = settings or PenaltySettings()
    pml = (pml or PMLSettings()).resolved(m0)
    logger.info(f"PML reference velocity {pml.velocity:.1f} m/s")
    problems = []
    for frequencies in schedule.batches:
        data = np.stack([_lookup(observed, f) for f in frequencies])
        problems.append(BatchProblem(acq, tuple(frequencies), data, pml))

    m_ref = float(np.mean(m0.values))
    model, split = m0, None
    iteration, batch_index = 0, 0
    records: List[ConvergenceRecord] = []
    penalties: List[BatchPenalties] = []
    for path in range(schedule.paths):
        for position, problem in enumerate(problems):
            k_max = schedule.k_max_for(position, path)
            first_batch = path == 0 and position == 0
            state = init_outer_state(problem, model, m_ref, split, iteration, batch_index)
            logger.info(f"Batch {batch_index} (path {path}): {list(problem.frequencies)} Hz, k_max={k_max}")
            for k in range(1, k_max + 1):
                active = bounds is not None and (not first_batch or k > schedule.bound_activation)
                if bounds is not None and first_batch and k == schedule.bound_activation + 1 and k > 1:
                    logger.info(f"Activating bound constraints at iteration {state.iteration + 1}")
                try:
                    state = outer_step(state, problem, spec, settings, bounds if active else None, m_true, threads)
                except (NumericalFailure, ValueError) as err:
                    logger.error(f"Outer iteration {state.iteration + 1} failed in batch {batch_index} "
                                 f"({list(problem.frequencies)} Hz): {err}")
                    raise NumericalFailure(f"iteration {state.iteration + 1}, batch {batch_index} "
                                           f"({list(problem.frequencies)} Hz): {err}") from err
                record = state.records[-1]
                reason = check_stop(record.data_res, record.wave_res, schedule.eps_b, schedule.eps_d, k, k_max)
                if reason is not None:
                    record = record.model_copy(update={"stop": reason})
                    state = replace(state, records=state.records[:-1] + (record,))
                    logger.info(f"Batch {batch_index} stopped at iteration {state.iteration} ({reason})")
                    break
            records.extend(state.records)
            penalties.append(state.penalties)
            model, split, iteration = state.m, state.split, state.iteration
            if on_batch is not None:
                on_batch(batch_index, model)
            batch_index += 1

    if bounds is not None:
        model = ScalarField(model.grid, project_box(model.values, bounds))
    return InversionResult(model=model, split=split, records=records, penalties=penalties)
