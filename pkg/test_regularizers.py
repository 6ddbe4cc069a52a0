import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from core.field_ops import GradField, Hess2Field, ModelGrid, ScalarField, grad_forward
from core.regularizers import (BoxBounds, RegularizerKind, RegularizerSpec, eval_regularizer,
                               huber_eval, infimal_split, project_box, shrink_isotropic,
                               soft_threshold, split_objective)


def _scalar_ic(x, alpha):
    """Brute-force min_z (1 - alpha)(x - z)^2 + alpha |z|."""
    objective = lambda z: (1 - alpha) * (x - z) ** 2 + alpha * abs(z)
    span = abs(x) + 1.0
    result = minimize_scalar(objective, bounds=(-span, span), method="bounded", options={"xatol": 1e-12})
    candidates = [result.x, 0.0]
    best = min(candidates, key=objective)
    return best, objective(best)


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_soft_threshold_matches_brute_force(alpha):
    for x in np.linspace(-3.0, 3.0, 61):
        z_star, _ = _scalar_ic(x, alpha)
        assert soft_threshold(np.array([x]), alpha)[0] == pytest.approx(z_star, abs=1e-6)


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
def test_huber_matches_numeric_infimal_convolution(alpha):
    for x in np.linspace(-3.0, 3.0, 61):
        _, value = _scalar_ic(x, alpha)
        assert huber_eval(np.array([x]), alpha) == pytest.approx(value, abs=1e-6)


def test_soft_threshold_limits():
    x = np.array([-2.0, 0.0, 0.1, 3.0])
    assert soft_threshold(x, 0.5)[1] == 0.0
    assert soft_threshold(x, 0.5)[2] == 0.0
    assert soft_threshold(x, 0.5)[3] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        soft_threshold(x, 1.0)


@pytest.mark.parametrize("threshold", [0.0, 0.3, 1.0, 2.5])
def test_shrink_isotropic_matches_brute_force(threshold):
    grid = ModelGrid(nx=20, nz=1, h=1.0)
    rng = np.random.default_rng(7)
    z = GradField.from_stack(grid, 2.0 * rng.standard_normal((2, grid.n)))
    p = shrink_isotropic(z, threshold).stack()
    for cell in range(grid.n):
        zc = z.stack()[:, cell]
        norm = np.linalg.norm(zc)
        # the minimizer is parallel to z, so the search is over its length
        objective = lambda r: threshold * r + 0.5 * (r - norm) ** 2
        r = minimize_scalar(objective, bounds=(0.0, norm + 1.0), method="bounded",
                            options={"xatol": 1e-12}).x
        r = min([r, 0.0], key=objective)
        expected = r * zc / norm if norm > 0 else np.zeros(2)
        assert np.allclose(p[:, cell], expected, atol=1e-6)


def test_shrink_isotropic_on_hessian_keeps_shape():
    grid = ModelGrid(nx=4, nz=4, h=1.0)
    rng = np.random.default_rng(8)
    h = Hess2Field.from_stack(grid, rng.standard_normal((3, grid.n)), mixed=True)
    out = shrink_isotropic(h, 0.5)
    assert out.mixed
    mags_in = np.linalg.norm(h.stack(), axis=0)
    mags_out = np.linalg.norm(out.stack(), axis=0)
    assert np.allclose(mags_out, np.maximum(mags_in - 0.5, 0.0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 32 - 1), threshold=st.floats(0.0, 3.0))
def test_shrink_isotropic_is_nonexpansive(seed, threshold):
    grid = ModelGrid(nx=8, nz=1, h=1.0)
    rng = np.random.default_rng(seed)
    a = GradField.from_stack(grid, rng.standard_normal((2, grid.n)))
    b = GradField.from_stack(grid, rng.standard_normal((2, grid.n)))
    gap_out = np.linalg.norm(shrink_isotropic(a, threshold).stack() - shrink_isotropic(b, threshold).stack())
    assert gap_out <= np.linalg.norm(a.stack() - b.stack()) + 1e-12


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(-10, 10), min_size=1, max_size=30),
       low=st.floats(-5, 0), width=st.floats(0, 5))
def test_project_box_is_idempotent_and_feasible(values, low, width):
    bounds = BoxBounds(lower=low, upper=low + width)
    x = np.array(values)
    once = project_box(x, bounds)
    assert np.array_equal(project_box(once, bounds), once)
    assert np.all((once >= low) & (once <= low + width))


def test_collapsed_box_returns_constant():
    bounds = BoxBounds(lower=2.0, upper=2.0)
    assert np.all(project_box(np.array([-1.0, 2.0, 7.0]), bounds) == 2.0)


def test_box_from_velocities_orders_bounds():
    bounds = BoxBounds.from_velocities(1000.0, 4000.0)
    assert bounds.lower == pytest.approx(1.0 / 4000.0 ** 2)
    assert bounds.upper == pytest.approx(1.0 / 1000.0 ** 2)
    with pytest.raises(ValueError):
        BoxBounds(lower=1.0, upper=0.0)


def test_alpha_validation():
    with pytest.raises(ValueError):
        RegularizerSpec(kind=RegularizerKind.TT, alpha=0.0)
    with pytest.raises(ValueError):
        RegularizerSpec(kind=RegularizerKind.TGV, alpha=1.0)
    RegularizerSpec(kind=RegularizerKind.JTT, alpha=0.0)
    RegularizerSpec(kind=RegularizerKind.JTT, alpha=1.0)


def _two_block(grid):
    values = np.where(np.arange(grid.n) < grid.n // 2, 1.0, 3.0)
    return ScalarField(grid, values)


def test_convex_combination_endpoints():
    grid = ModelGrid(nx=30, h=1.0)
    m = ScalarField(grid, np.random.default_rng(9).standard_normal(grid.n))
    tik = eval_regularizer(RegularizerSpec(kind=RegularizerKind.TIKHONOV), m)
    tv = eval_regularizer(RegularizerSpec(kind=RegularizerKind.TV), m)
    assert eval_regularizer(RegularizerSpec(kind=RegularizerKind.JTT, alpha=0.0), m) == tik
    assert eval_regularizer(RegularizerSpec(kind=RegularizerKind.JTT, alpha=1.0), m) == tv


def test_simple_regularizer_values():
    grid = ModelGrid(nx=10, h=1.0)
    m = _two_block(grid)
    assert eval_regularizer(RegularizerSpec(kind=RegularizerKind.TV), m) == pytest.approx(2.0)
    assert eval_regularizer(RegularizerSpec(kind=RegularizerKind.DMP), m) == pytest.approx(5 * 1 + 5 * 9)
    # second differences are +-2 at the two cells around the jump
    assert eval_regularizer(RegularizerSpec(kind=RegularizerKind.TIKHONOV), m) == pytest.approx(8.0)


@pytest.mark.parametrize("kind", [RegularizerKind.TT, RegularizerKind.TGV])
def test_infimal_split_beats_trivial_splits(kind):
    grid = ModelGrid(nx=40, h=1.0)
    x = np.arange(grid.n, dtype=float)
    m = ScalarField(grid, 0.05 * x + np.where(x < 20, 0.0, 1.0))
    spec = RegularizerSpec(kind=kind, alpha=0.5)
    m1, m2 = infimal_split(spec, m, iterations=500)
    assert np.allclose(m1 + m2, m.values)
    value = split_objective(spec, grid, m1, m2)
    assert value <= split_objective(spec, grid, m.values, np.zeros(grid.n)) + 1e-12
    assert value <= split_objective(spec, grid, np.zeros(grid.n), m.values) + 1e-12
    assert eval_regularizer(spec, m, (m1, m2)) == pytest.approx(value)


def test_split_kinds_are_no_larger_than_either_component():
    grid = ModelGrid(nx=30, h=1.0)
    m = _two_block(grid)
    spec = RegularizerSpec(kind=RegularizerKind.TT, alpha=0.5)
    tv = eval_regularizer(RegularizerSpec(kind=RegularizerKind.TV), m)
    assert eval_regularizer(spec, m) <= 0.5 * tv + 1e-12
    assert np.all(grad_forward(m).z.values == 0.0)


def test_regularizer_nullspaces_and_scaling():
    grid = ModelGrid(nx=12, nz=9, h=1.0)
    ix, iz = np.meshgrid(np.arange(grid.nx), np.arange(grid.nz), indexing="ij")
    ramp = ScalarField(grid, (2.0 + 0.5 * ix - 0.25 * iz).ravel())
    constant = ScalarField(grid, np.full(grid.n, 3.0))
    tv, tik, dmp = (RegularizerSpec(kind=k) for k in
                    (RegularizerKind.TV, RegularizerKind.TIKHONOV, RegularizerKind.DMP))
    assert eval_regularizer(tv, constant) == 0.0
    assert eval_regularizer(tik, ramp) == pytest.approx(0.0, abs=1e-20)

    m = ScalarField(grid, np.random.default_rng(10).standard_normal(grid.n))
    assert eval_regularizer(dmp, ScalarField(grid, m.values / np.linalg.norm(m.values))) == pytest.approx(1.0)
    scaled = ScalarField(grid, -2.5 * m.values)
    assert eval_regularizer(tv, scaled) == pytest.approx(2.5 * eval_regularizer(tv, m))
    assert eval_regularizer(dmp, scaled) == pytest.approx(6.25 * eval_regularizer(dmp, m))
