"""
Workbench operations behind the CLI: data simulation, inversion runs,
regularizer comparison and model error.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.field_ops import ModelGrid, ScalarField, model_error
from core.helmholtz import Acquisition, PMLSettings, points_per_wavelength, simulate
from core.irwri import ContinuationSchedule, InversionResult, PenaltySettings, run_continuation
from core.regularizers import BoxBounds, RegularizerKind, RegularizerSpec
from utils.config.run_config import RunConfig
from utils.errors import ConfigError, WorkbenchError
from utils.io.datafile import DataFile, read_data, write_data
from utils.io.raster import ModelRasterFile, RasterKind, read_model, read_raster, write_raster
from utils.io.run_log import write_convergence_log, write_run_header

logger = logging.getLogger("workbench")

__all__ = ["RunInputs", "prepare_run", "simulate_data", "invert", "compare_regularizers", "model_error"]

RANKING_COLUMNS = ["kind", "alpha", "model_err", "normalized_err"]


@dataclass(frozen=True)
class RunInputs:
    grid: ModelGrid
    acq: Acquisition
    pml: PMLSettings
    schedule: ContinuationSchedule
    settings: PenaltySettings
    initial: ScalarField
    true_model: Optional[ScalarField]
    bounds: Optional[BoxBounds]
    observed: Optional[Dict[float, np.ndarray]]


def scheduled_frequencies(config: RunConfig) -> List[float]:
    return sorted({f for batch in config.schedule.frequency_batches() for f in batch})


def prepare_run(config: RunConfig, need_data: bool = True) -> RunInputs:
    """Load every file a run needs and validate it against the configuration."""
    grid = config.grid.model_grid()
    acq = config.acquisition.build(grid)

    true_path = config.resolve(config.grid.true_model)
    true_model = read_model(true_path, grid) if true_path else None
    initial_path = config.resolve(config.grid.initial_model)
    if initial_path is None and need_data:
        raise ConfigError("grid.initial_model is required for an inversion run")
    initial = read_model(initial_path, grid) if initial_path else None

    true_velocity = 1.0 / np.sqrt(true_model.values) if true_model is not None else None
    bounds = config.bounds.box(true_velocity)

    observed = None
    if need_data:
        data_path = config.resolve(config.acquisition.data_file)
        if data_path is None:
            raise ConfigError("acquisition.data_file is required for an inversion run")
        data = read_data(data_path)
        expected = (acq.n_sources, acq.n_receivers)
        if data.values.shape[1:] != expected:
            raise ConfigError(f"data file {data_path} holds {data.values.shape[1:]} source/receiver pairs, "
                              f"acquisition defines {expected}")
        observed = data.by_frequency()

    # simulate and invert share one PML reference: the true model, else the initial one
    reference = true_model if true_model is not None else initial
    pml = config.acquisition.pml()
    if reference is not None:
        pml = pml.resolved(reference)

    return RunInputs(grid=grid, acq=acq, pml=pml, schedule=config.schedule.schedule(),
                     settings=config.penalties.settings(), initial=initial, true_model=true_model,
                     bounds=bounds, observed=observed)


def simulate_data(m: ScalarField, acq: Acquisition, frequencies: Sequence[float],
                  pml: Optional[PMLSettings] = None) -> DataFile:
    """Noiseless data d = P A(m)^-1 b for every frequency and source."""
    for frequency in frequencies:
        ppw = points_per_wavelength(m, frequency)
        if ppw < 10.0:
            logger.warning(f"{frequency:g} Hz is sampled with {ppw:.1f} points per wavelength")
    return DataFile(tuple(frequencies), simulate(m, acq, frequencies, pml))


def simulate_from_config(config: RunConfig, out_path: Optional[str] = None) -> str:
    inputs = prepare_run(config, need_data=False)
    if inputs.true_model is None:
        raise ConfigError("grid.true_model is required to simulate data")
    path = out_path or config.resolve(config.acquisition.data_file)
    if path is None:
        raise ConfigError("acquisition.data_file or --out-dir is required to simulate data")
    data = simulate_data(inputs.true_model, inputs.acq, scheduled_frequencies(config), inputs.pml)
    write_data(path, data)
    return path


def _run_header(config: RunConfig, spec: RegularizerSpec, result: InversionResult, inputs: RunInputs) -> Dict:
    header = {
        "configuration": config.resolved(),
        "regularizer": {"kind": spec.kind.value, "alpha": spec.alpha, "mixed_hessian": spec.mixed_hessian},
        "pml": inputs.pml.model_dump(mode="json"),
        "tolerances": {"eps_b": inputs.schedule.eps_b, "eps_d": inputs.schedule.eps_d},
        "bounds": None if inputs.bounds is None else {
            "lower": float(np.min(inputs.bounds.lower)), "upper": float(np.max(inputs.bounds.upper))},
        "batches": [p.model_dump(mode="json") for p in result.penalties],
        "iterations": len(result.records),
        "stop": result.records[-1].stop if result.records else "",
    }
    if inputs.true_model is not None:
        header["initial_model_error"] = model_error(inputs.initial.values, inputs.true_model.values)
        header["final_model_error"] = model_error(result.model.values, inputs.true_model.values)
    return header


def invert(config: RunConfig, out_dir: str, threads: int = 1, spec: Optional[RegularizerSpec] = None,
           inputs: Optional[RunInputs] = None, write_outputs: bool = True) -> InversionResult:
    """
    Run an inversion and write the final model raster, the convergence log
    and the run header into out_dir.

    Args:
        config: validated run configuration.
        out_dir: output directory, created when missing.
        threads: worker threads for per-source wavefield solves.
        spec: regularizer override (compare passes one per run).
        inputs: preloaded inputs shared across runs.
        write_outputs: False skips every file.

    Returns:
        The InversionResult of the continuation run.
    """
    inputs = inputs or prepare_run(config)
    spec = spec or config.regularizer.spec()
    out = config.output
    if write_outputs:
        os.makedirs(out_dir, exist_ok=True)

    def save_batch(batch: int, model: ScalarField):
        if write_outputs and out.per_batch_models:
            write_raster(os.path.join(out_dir, f"model_batch_{batch:03d}.bin"),
                         ModelRasterFile(model.grid, model.values, RasterKind.SQUARED_SLOWNESS))

    # --- Run the continuation ---
    logger.info(f"Inverting with {spec.kind.value} (alpha={spec.alpha}) over "
                f"{len(inputs.schedule.batches)} batch(es), {inputs.acq.n_sources} source(s)")
    true_values = inputs.true_model.values if inputs.true_model is not None else None
    result = run_continuation(inputs.schedule, inputs.acq, inputs.observed, inputs.initial, spec,
                              inputs.settings, inputs.bounds, true_values, inputs.pml, threads, save_batch)

    # --- Write outputs ---
    if write_outputs:
        write_raster(os.path.join(out_dir, out.model_name),
                     ModelRasterFile(result.model.grid, result.model.values, RasterKind.SQUARED_SLOWNESS))
        write_convergence_log(os.path.join(out_dir, out.log_name), result.records)
        write_run_header(os.path.join(out_dir, out.header_name), _run_header(config, spec, result, inputs))
    return result


def _ranking_frame(rows: List[Dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=RANKING_COLUMNS[:-1])
    worst = frame["model_err"].max() if len(frame) else np.nan
    frame["normalized_err"] = frame["model_err"] / worst if worst and np.isfinite(worst) else np.nan
    return frame


def compare_regularizers(config: RunConfig, out_dir: str, kinds: Optional[Sequence[str]] = None,
                         alpha_grid: Optional[Sequence[float]] = None, threads: int = 1) -> pd.DataFrame:
    """
    Invert once per regularizer (once per alpha for JTT, TT and TGV) and
    rank by the best final relative model error. The table is written to
    out_dir/ranking.csv, also when a run fails.
    """
    inputs = prepare_run(config)
    if inputs.true_model is None:
        raise ConfigError("grid.true_model is required to compare regularizers")
    kinds = [RegularizerKind(k) for k in (kinds or [k.value for k in RegularizerKind])]
    alpha_grid = list(alpha_grid or config.regularizer.alpha_grid)
    runs = [(slot, kind, alpha) for slot, kind in enumerate(kinds)
            for alpha in (alpha_grid if kind.uses_alpha else [config.regularizer.alpha])]
    os.makedirs(out_dir, exist_ok=True)
    ranking_path = os.path.join(out_dir, "ranking.csv")

    # Best run per listed kind, keyed by its position in the list
    best: Dict[int, Dict] = {}
    try:
        for slot, kind, alpha in tqdm(runs, desc="regularizers", unit="run"):
            try:
                spec = RegularizerSpec(kind=kind, alpha=alpha, mixed_hessian=config.regularizer.mixed_hessian)
            except ValueError as err:
                logger.warning(f"Skipping {kind.value} with alpha={alpha}: {err}")
                continue
            result = invert(config, out_dir, threads, spec, inputs, write_outputs=False)
            error = model_error(result.model.values, inputs.true_model.values)
            logger.info(f"{kind.value} alpha={alpha:g}: relative model error {error:.4e}")
            if slot not in best or error < best[slot]["model_err"]:
                best[slot] = {"kind": kind.value, "alpha": alpha if kind.uses_alpha else np.nan, "model_err": error}
    except WorkbenchError as err:
        logger.warning(f"Comparison aborted after {len(best)} regularizer(s): {err}")
        _ranking_frame([best[k] for k in sorted(best)]).to_csv(ranking_path, index=False, float_format="%.17g",
                                                               lineterminator="\n")
        raise

    frame = _ranking_frame([best[k] for k in sorted(best)])
    frame.to_csv(ranking_path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote ranking of {len(frame)} regularizer(s) to {ranking_path}")
    return frame


def model_error_files(model_path: str, true_path: str) -> float:
    model = read_raster(model_path).squared_slowness()
    true_model = read_raster(true_path).squared_slowness()
    return model_error(model.values, true_model.values)
