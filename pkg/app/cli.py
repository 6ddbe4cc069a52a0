"""
Command-line workbench.

    python -m app.cli synth --kind piecewise-smooth --nx 301 --h 10 --out-dir runs/ps
    python -m app.cli simulate --config runs/ps/run.ini
    python -m app.cli invert --config runs/ps/run.ini --out-dir runs/ps/tt
    python -m app.cli compare --config runs/ps/run.ini --out-dir runs/ps/compare
    python -m app.cli error runs/ps/tt/final_model.bin runs/ps/true_model.bin

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import logging
import os
import sys
from typing import Optional, Sequence

import click
from dotenv import load_dotenv

from app import workbench
from app.presets import PRESETS, get_preset
from app.synth import SYNTH_KINDS, SynthParams, synth_model, write_synth
from core.field_ops import ModelGrid
from core.regularizers import RegularizerKind
from utils.config.run_config import (AcquisitionSection, BoundsSection, GridSection, RegularizerSection,
                                     RunConfig, ScheduleSection, load_run_config)
from utils.errors import ConfigError, WorkbenchError

logger = logging.getLogger("cli")

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def setup_logging() -> None:
    # --- Load Environment Variables ---
    load_dotenv()
    level = os.environ.get("PWFWI_LOG", "INFO").upper()
    # Unknown levels fall back to INFO
    if level not in LOG_LEVELS:
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stdout,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def _preset_config(preset_name: str, out_dir: str) -> RunConfig:
    """1D single-source configuration for a benchmark preset."""
    preset = get_preset(preset_name)
    # Source and first receiver sit right at the inner edge of the PML
    width = 10
    return RunConfig(
        grid=GridSection(nx=preset.nx, h=preset.grid_m, true_model="true_model.bin",
                         initial_model="initial_model.bin"),
        acquisition=AcquisitionSection(source_first_x=width, receiver_first_x=width,
                                       receiver_last_x=preset.nx - 1 - width,
                                       receiver_step=preset.receiver_step, pml_width=width,
                                       data_file="data.csv"),
        schedule=ScheduleSection(batches=[[preset.frequency_hz]], k_max=100),
        regularizer=RegularizerSection(kind=RegularizerKind.TT),
        bounds=BoundsSection(mode="benchmark"),
        base_dir=out_dir,
    )


@click.group()
def cli():
    """Frequency-domain IR-WRI workbench."""
    setup_logging()


@cli.command()
@click.option("--kind", type=click.Choice(SYNTH_KINDS), default="piecewise-smooth", show_default=True)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Size a 1D model to a benchmark setup and write run.ini.")
@click.option("--nx", type=int, default=301, show_default=True)
@click.option("--nz", type=int, default=1, show_default=True)
@click.option("--h", "spacing", type=float, default=10.0, show_default=True, help="Grid spacing in meters.")
@click.option("--blocks", type=int, default=3, show_default=True)
@click.option("--v-min", type=float, default=1500.0, show_default=True)
@click.option("--v-max", type=float, default=4500.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
def synth(kind, preset, nx, nz, spacing, blocks, v_min, v_max, seed, out_dir):
    """Write true velocity, true squared-slowness and initial model rasters."""
    try:
        params = SynthParams(v_min=v_min, v_max=v_max, blocks=blocks)
        if preset:
            chosen = get_preset(preset)
            grid = ModelGrid(nx=chosen.nx, nz=1, h=chosen.grid_m)
        else:
            grid = ModelGrid(nx=nx, nz=nz, h=spacing)
    except ValueError as err:
        raise ConfigError(f"invalid synth parameters: {err}") from err
    paths = write_synth(synth_model(kind, grid, seed, params), out_dir)
    # Only presets get a ready-made run.ini
    if preset:
        ini_path = os.path.join(out_dir, "run.ini")
        with open(ini_path, "w", encoding="utf-8") as handle:
            handle.write(_preset_config(preset, os.path.abspath(out_dir)).to_ini())
        paths["config"] = ini_path
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@cli.command(name="simulate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Write data.csv here instead of acquisition.data_file.")
def simulate_command(config_path, out_dir):
    """Simulate noiseless data for every scheduled frequency."""
    config = load_run_config(config_path)
    out_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        out_path = os.path.join(out_dir, "data.csv")
    click.echo(workbench.simulate_from_config(config, out_path))


@cli.command(name="invert")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
def invert_command(config_path, out_dir, threads):
    """Run IR-WRI with the configured regularizer and schedule."""
    config = load_run_config(config_path)
    result = workbench.invert(config, out_dir, threads)
    last = result.records[-1]
    click.echo(f"iterations: {len(result.records)}, stop: {last.stop}, data_res: {last.data_res:.4e}, "
               f"wave_res: {last.wave_res:.4e}"
               + (f", model_err: {last.model_err:.4e}" if last.model_err is not None else ""))


@cli.command(name="compare")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--kinds", default=None, help="Comma-separated regularizers (default: all six).")
@click.option("--alpha-grid", default=None, help="Comma-separated alpha values for JTT, TT and TGV.")
def compare_command(config_path, out_dir, threads, kinds, alpha_grid):
    """Rank the regularizers by best final relative model error."""
    config = load_run_config(config_path)
    kind_list = [k.strip() for k in kinds.split(",") if k.strip()] if kinds else None
    # Check --kinds and --alpha-grid before any inversion starts
    try:
        if kind_list:
            kind_list = [RegularizerKind(k).value for k in kind_list]
        alphas = [float(a) for a in alpha_grid.split(",") if a.strip()] if alpha_grid else None
    except ValueError as err:
        raise ConfigError(f"invalid --kinds/--alpha-grid: {err}") from err
    frame = workbench.compare_regularizers(config, out_dir, kind_list, alphas, threads)
    click.echo(frame.to_string(index=False))


@cli.command(name="error")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.argument("true_path", type=click.Path(dir_okay=False))
def error_command(model_path, true_path):
    """Relative l2 error of a model raster against the true model raster."""
    click.echo(f"{workbench.model_error_files(model_path, true_path):.17g}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    # Workbench errors carry their own exit code (2 config, 3 numerical)
    try:
        cli.main(args=list(argv) if argv is not None else None, standalone_mode=False)
    except WorkbenchError as err:
        logger.error(f"{type(err).__name__}: {err}")
        click.echo(f"error: {err}", err=True)
        return err.exit_code
    except click.ClickException as err:
        err.show()
        return 2
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
