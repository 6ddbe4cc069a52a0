import os

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from app import workbench
from app.cli import main
from app.presets import get_preset
from app.synth import SynthParams, initial_velocity, synth_model, synth_velocity
from core.field_ops import ModelGrid, ScalarField
from core.helmholtz import Acquisition, simulate
from core.irwri import ConvergenceRecord, build_paths
from utils.config.run_config import RunConfig, load_run_config, parse_run_config
from utils.errors import ConfigError, NumericalFailure
from utils.io.datafile import DataFile, read_data, write_data
from utils.io.raster import MAGIC, ModelRasterFile, RasterKind, read_model, read_raster, write_raster
from utils.io.run_log import LOG_COLUMNS, read_convergence_log, read_run_header, write_convergence_log

RUN_INI = """\
[grid]
nx = 61
h = 10
true_model = true_model.bin
initial_model = initial_model.bin

[acquisition]
source_first_x = 12
receiver_first_x = 12
receiver_last_x = 48
data_file = data.csv

[schedule]
batches = 5
k_max = 2

[regularizer]
kind = TT
alpha = 0.5
"""


@pytest.fixture
def run_dir(tmp_path):
    """Synthetic 1D model, run.ini and simulated data in one directory."""
    assert main(["synth", "--kind", "piecewise-constant", "--nx", "61", "--h", "10", "--seed", "3",
                 "--out-dir", str(tmp_path)]) == 0
    (tmp_path / "run.ini").write_text(RUN_INI, encoding="utf-8")
    assert main(["simulate", "--config", str(tmp_path / "run.ini")]) == 0
    return tmp_path


# --- files ---

def test_raster_round_trip_is_byte_identical(tmp_path):
    grid = ModelGrid(nx=7, nz=5, h=12.5)
    values = 1.0 / np.linspace(1500.0, 4500.0, grid.n) ** 2
    raster = ModelRasterFile(grid, values, RasterKind.SQUARED_SLOWNESS)
    path = tmp_path / "m.bin"
    write_raster(str(path), raster)
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    again = read_raster(str(path))
    assert again.grid == grid
    assert again.to_bytes() == blob


def test_raster_kinds_convert():
    grid = ModelGrid(nx=4, h=1.0)
    velocity = np.array([1500.0, 2000.0, 3000.0, 4500.0])
    raster = ModelRasterFile.from_velocity(grid, velocity)
    assert np.allclose(raster.squared_slowness().values, 1.0 / velocity ** 2)
    assert np.allclose(raster.as_kind(RasterKind.SQUARED_SLOWNESS).velocity(), velocity)


def test_raster_rejects_bad_files(tmp_path):
    grid = ModelGrid(nx=4, h=1.0)
    blob = ModelRasterFile(grid, np.ones(4)).to_bytes()
    with pytest.raises(ConfigError, match="magic"):
        ModelRasterFile.from_bytes(b"NOTARAST" + blob[8:])
    with pytest.raises(ConfigError):
        ModelRasterFile.from_bytes(blob[:-8])
    with pytest.raises(ConfigError):
        ModelRasterFile(grid, np.array([1.0, 0.0, 1.0, 1.0]))
    path = tmp_path / "m.bin"
    path.write_bytes(blob)
    with pytest.raises(ConfigError):
        read_model(str(path), ModelGrid(nx=5, h=1.0))


def test_data_file_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_data(str(first), DataFile((3.5, 4.0), values))
    data = read_data(str(first))
    assert data.frequencies == (3.5, 4.0)
    assert np.array_equal(data.values, values)
    write_data(str(second), data)
    assert first.read_bytes() == second.read_bytes()


def test_data_file_keeps_frequency_order(tmp_path):
    path = tmp_path / "a.csv"
    values = np.arange(8, dtype=complex).reshape(2, 2, 2)
    write_data(str(path), DataFile((6.0, 3.5), values))
    data = read_data(str(path))
    assert data.frequencies == (6.0, 3.5)
    assert np.array_equal(data.by_frequency()[3.5], values[1])


def test_data_file_needs_every_row(tmp_path):
    path = tmp_path / "a.csv"
    frame = DataFile((5.0,), np.ones((1, 2, 2))).to_frame().iloc[:-1]
    frame.to_csv(path, index=False)
    with pytest.raises(ConfigError, match="one row per"):
        read_data(str(path))


def test_convergence_log_round_trip(tmp_path):
    records = [ConvergenceRecord(iteration=1, batch=0, data_res=0.5, wave_res=0.1, model_err=None,
                                 reg_value=2.0),
               ConvergenceRecord(iteration=2, batch=0, data_res=0.25, wave_res=0.05, model_err=None,
                                 reg_value=1.5, stop="k_max")]
    path = tmp_path / "log.csv"
    write_convergence_log(str(path), records)
    frame = read_convergence_log(str(path))
    assert list(frame.columns) == LOG_COLUMNS
    assert list(frame["stop"]) == ["", "k_max"]
    assert frame["model_err"].isna().all()
    assert list(frame["data_res"]) == [0.5, 0.25]


# --- configuration ---

def test_config_parses_and_round_trips():
    config = parse_run_config(RUN_INI)
    assert config.schedule.frequency_batches() == [[5.0]]
    assert config.penalties.settings().lambda_over_gamma == 100.0
    assert config.acquisition.build(config.grid.model_grid()).n_receivers == 37
    assert parse_run_config(config.to_ini()) == config


def test_config_ranges_expand_to_paths():
    text = RUN_INI.replace("batches = 5", "ranges = 3.5:6, 4:5")
    config = parse_run_config(text)
    assert config.schedule.frequency_batches() == build_paths([(3.5, 6.0), (4.0, 5.0)])
    assert parse_run_config(config.to_ini()) == config


def test_pml_and_penalty_rule_keys():
    text = RUN_INI.replace("data_file = data.csv", "data_file = data.csv\npml_velocity = 3200")
    text += "\n[penalties]\ngamma_rule = balanced\n"
    config = parse_run_config(text)
    assert config.acquisition.pml().velocity == 3200.0
    assert config.penalties.settings().gamma_rule == "balanced"
    assert parse_run_config(config.to_ini()) == config
    assert parse_run_config(RUN_INI).acquisition.pml().velocity is None


def test_unknown_key_names_its_section():
    with pytest.raises(ConfigError, match=r"grid\.foo"):
        parse_run_config(RUN_INI.replace("h = 10", "h = 10\nfoo = 1"))


def test_invalid_configurations_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown configuration section"):
        parse_run_config(RUN_INI + "\n[plotting]\ncolor = red\n")
    with pytest.raises(ConfigError, match="schedule"):
        parse_run_config(RUN_INI.replace("batches = 5", "batches = 5\nranges = 3:4"))
    with pytest.raises(ConfigError, match="regularizer.kind"):
        parse_run_config(RUN_INI.replace("kind = TT", "kind = L1"))
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(str(tmp_path / "missing.ini"))


def test_benchmark_bounds_bracket_the_true_model():
    config = parse_run_config(RUN_INI)
    box = config.bounds.box(np.array([2000.0, 3000.0]))
    assert box.lower == pytest.approx(1.0 / 4500.0 ** 2)
    assert box.upper == pytest.approx(1.0 / 1000.0 ** 2)
    with pytest.raises(ConfigError):
        config.bounds.box(None)


# --- synthetic models ---

def test_synth_is_deterministic():
    grid = ModelGrid(nx=101, h=10.0)
    first = synth_velocity("piecewise-smooth", grid, seed=7)
    assert np.array_equal(first, synth_velocity("piecewise-smooth", grid, seed=7))
    assert not np.array_equal(first, synth_velocity("piecewise-smooth", grid, seed=8))


def test_piecewise_constant_has_few_jumps():
    grid = ModelGrid(nx=200, h=5.0)
    params = SynthParams(blocks=3)
    velocity = synth_velocity("piecewise-constant", grid, seed=1, params=params)
    assert np.count_nonzero(np.diff(velocity, 2)) <= 2 * (params.blocks - 1)
    assert velocity.min() >= params.v_min and velocity.max() <= params.v_max


def test_inclusion_model_in_two_dimensions():
    grid = ModelGrid(nx=40, nz=30, h=10.0)
    result = synth_model("gradient-background-with-inclusion", grid)
    velocity = grid.as_array(result.velocity.values)
    assert velocity[20, int(0.4 * 29)] == 4500.0
    assert np.allclose(grid.as_array(result.initial.velocity())[0], np.linspace(1500.0, 4500.0, 30))


def test_one_dimensional_start_is_homogeneous():
    grid = ModelGrid(nx=50, h=10.0)
    velocity = synth_velocity("piecewise-linear", grid, seed=2)
    start = initial_velocity(grid, velocity)
    assert np.allclose(start, velocity.mean())


def test_synth_rejects_bad_parameters():
    with pytest.raises(ValidationError):
        SynthParams(v_min=3000.0, v_max=2000.0)
    with pytest.raises(ValidationError):
        SynthParams(v_max=9000.0)
    with pytest.raises(ConfigError):
        synth_velocity("layered", ModelGrid(nx=10, h=1.0))


def test_presets():
    marmousi = get_preset("marmousi2")
    assert marmousi.nx == 751
    assert marmousi.receiver_step == 17
    with pytest.raises(ConfigError):
        get_preset("nowhere")


# --- command line ---

def test_synth_preset_writes_a_loadable_config(tmp_path):
    assert main(["synth", "--preset", "overthrust", "--out-dir", str(tmp_path)]) == 0
    config = load_run_config(str(tmp_path / "run.ini"))
    assert config.grid.nx == get_preset("overthrust").nx
    assert config.schedule.frequency_batches() == [[12.0]]
    assert read_raster(str(tmp_path / "true_model.bin")).grid.nx == config.grid.nx


def test_invert_writes_outputs_and_repeats_exactly(run_dir, capsys):
    ini = str(run_dir / "run.ini")
    assert main(["invert", "--config", ini, "--out-dir", str(run_dir / "a")]) == 0
    assert main(["invert", "--config", ini, "--out-dir", str(run_dir / "b")]) == 0
    log_a = (run_dir / "a" / "convergence.csv").read_bytes()
    assert log_a == (run_dir / "b" / "convergence.csv").read_bytes()
    assert (run_dir / "a" / "final_model.bin").read_bytes() == (run_dir / "b" / "final_model.bin").read_bytes()

    frame = read_convergence_log(str(run_dir / "a" / "convergence.csv"))
    assert list(frame["iter"]) == [1, 2]
    assert list(frame["stop"]) == ["", "k_max"]

    header = read_run_header(str(run_dir / "a" / "run_header.yaml"))
    assert header["configuration"]["schedule"]["resolved_batches"] == [[5.0]]
    assert header["regularizer"]["kind"] == "TT"
    assert len(header["batches"]) == 1
    assert header["batches"][0]["lambda_over_gamma"] == 100.0
    assert header["iterations"] == 2
    config = load_run_config(ini)
    for section in RunConfig.model_fields:
        if section == "base_dir":
            continue
        echoed = header["configuration"][section]
        assert set(type(getattr(config, section)).model_fields) <= set(echoed), section
    assert header["initial_model_error"] > 0.0
    true_values = read_raster(str(run_dir / "true_model.bin")).squared_slowness().values
    assert header["pml"]["velocity"] == pytest.approx(1.0 / np.sqrt(true_values.min()))
    assert header["tolerances"] == {"eps_b": 1e-3, "eps_d": 1e-5}
    assert header["bounds"]["lower"] < header["bounds"]["upper"]

    capsys.readouterr()
    assert main(["error", str(run_dir / "a" / "final_model.bin"), str(run_dir / "true_model.bin")]) == 0
    printed = float(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed == pytest.approx(header["final_model_error"], rel=1e-12)


def test_compare_ranks_duplicate_kinds_separately(run_dir):
    out = run_dir / "compare"
    assert main(["compare", "--config", str(run_dir / "run.ini"), "--out-dir", str(out), "--kinds", "TV,TV"]) == 0
    ranking = pd.read_csv(out / "ranking.csv")
    assert list(ranking["kind"]) == ["TV", "TV"]
    assert ranking["model_err"].iloc[0] == ranking["model_err"].iloc[1]
    assert np.allclose(ranking["normalized_err"], 1.0)


def test_compare_writes_partial_ranking_on_failure(run_dir, mocker):
    config = load_run_config(str(run_dir / "run.ini"))
    mocker.patch("app.workbench.invert", side_effect=NumericalFailure("singular model system"))
    with pytest.raises(NumericalFailure):
        workbench.compare_regularizers(config, str(run_dir / "compare"), kinds=["DMP"])
    assert os.path.exists(run_dir / "compare" / "ranking.csv")


def test_cli_exit_codes(run_dir, tmp_path, mocker):
    assert main(["invert", "--config", str(tmp_path / "missing.ini"), "--out-dir", str(tmp_path)]) == 2
    assert main(["invert", "--config", str(run_dir / "run.ini")]) == 2
    assert main(["compare", "--config", str(run_dir / "run.ini"), "--out-dir", str(tmp_path),
                 "--kinds", "L1"]) == 2
    mocker.patch("app.workbench.invert", side_effect=NumericalFailure("singular model system"))
    assert main(["invert", "--config", str(run_dir / "run.ini"), "--out-dir", str(tmp_path / "x")]) == 3


def test_inversion_needs_data(tmp_path):
    main(["synth", "--nx", "61", "--h", "10", "--out-dir", str(tmp_path)])
    (tmp_path / "run.ini").write_text(RUN_INI, encoding="utf-8")
    assert main(["invert", "--config", str(tmp_path / "run.ini"), "--out-dir", str(tmp_path / "out")]) == 2


def test_model_error_files(tmp_path):
    grid = ModelGrid(nx=5, h=1.0)
    true_path, model_path = tmp_path / "t.bin", tmp_path / "m.bin"
    write_raster(str(true_path), ModelRasterFile.from_velocity(grid, np.full(5, 2000.0)))
    write_raster(str(model_path), ModelRasterFile(grid, np.full(5, 2.0 / 2000.0 ** 2)))
    assert workbench.model_error_files(str(model_path), str(true_path)) == pytest.approx(1.0)


def test_simulated_data_matches_acquisition(run_dir):
    config = load_run_config(str(run_dir / "run.ini"))
    data = read_data(str(run_dir / "data.csv"))
    assert data.frequencies == (5.0,)
    assert data.values.shape == (1, 1, 37)
    inputs = workbench.prepare_run(config)
    assert isinstance(inputs.initial, ScalarField)
    assert set(inputs.observed) == {5.0}


def test_simulate_data_warns_on_coarse_sampling(caplog):
    grid = ModelGrid(nx=61, h=10.0)
    m = ScalarField(grid, np.full(grid.n, 1.0 / 2000.0 ** 2))
    acq = Acquisition(grid, sources=(12,), receivers=tuple(range(12, 49)))
    with caplog.at_level("WARNING", logger="workbench"):
        data = workbench.simulate_data(m, acq, [5.0, 25.0])
    assert data.frequencies == (5.0, 25.0)
    assert np.array_equal(data.values, simulate(m, acq, [5.0, 25.0]))
    assert "25 Hz is sampled with 8.0 points per wavelength" in caplog.text
    assert caplog.text.count("points per wavelength") == 1


RANKING_INI = """\
[grid]
nx = 301
h = 10
true_model = true_model.bin
initial_model = initial_model.bin

[acquisition]
source_first_x = 12
receiver_first_x = 12
receiver_last_x = 288
data_file = data.csv

[schedule]
batches = 5
k_max = 100

[regularizer]
kind = TT
alpha_grid = 0.1, 0.3, 0.5, 0.7, 0.9
"""


def _ranking(tmp_path, profile, kinds):
    assert main(["synth", "--kind", profile, "--nx", "301", "--h", "10", "--seed", "1",
                 "--out-dir", str(tmp_path)]) == 0
    (tmp_path / "run.ini").write_text(RANKING_INI, encoding="utf-8")
    assert main(["simulate", "--config", str(tmp_path / "run.ini")]) == 0
    config = load_run_config(str(tmp_path / "run.ini"))
    frame = workbench.compare_regularizers(config, str(tmp_path / "compare"), kinds=kinds)
    return dict(zip(frame["kind"], frame["model_err"]))


@pytest.mark.slow
def test_tt_ranks_first_on_piecewise_smooth_profile(tmp_path):
    errors = _ranking(tmp_path, "piecewise-smooth", ["TT", "TV", "Tikhonov", "JTT"])
    assert errors["TT"] < errors["TV"]
    assert errors["TT"] < errors["Tikhonov"]
    assert errors["TT"] < errors["JTT"]


@pytest.mark.slow
def test_tgv_no_worse_than_tt_on_piecewise_linear_profile(tmp_path):
    errors = _ranking(tmp_path, "piecewise-linear", ["TGV", "TT"])
    assert errors["TGV"] <= errors["TT"]
