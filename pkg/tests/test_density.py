import numpy as np
import pytest

from otthom.density import (
    DensityModel,
    GridSpec,
    build_density_model,
    estimate_density,
    eval_homogenized_action,
)
from otthom.errors import ConfigError, NegativeDensity
from otthom.generators import GeneratorSpec
from otthom.graph import Orthotope

UNIT = Orthotope([0.0, 0.0], [1.0, 1.0])


def test_estimate_density_lattice_exact():
    fam = GeneratorSpec(kind="latticeNN", n=2)
    est = estimate_density(fam, [1.0, 0.0], UNIT, [1 / 4, 1 / 8], tol=1e-10)
    for eps, mean in est.mean.items():
        assert mean == pytest.approx(1.0, rel=1e-3)
    assert est.extrapolated == pytest.approx(1.0, rel=1e-3)
    assert est.fit_residual <= 1e-6


def test_estimate_density_degenerate_random_matches_lattice():
    rc = GeneratorSpec(kind="randomConductance", n=2, lam=1.0, Lam=1.0, seed=5)
    est = estimate_density(rc, [1.0, 0.0], UNIT, [1 / 4], tol=1e-10)
    assert est.mean[1 / 4] == pytest.approx(1.0, rel=1e-6)


def test_estimate_density_multi_seed_stats():
    rc = GeneratorSpec(kind="randomConductance", n=2, lam=1.0, Lam=4.0)
    Q = Orthotope([0.0, 0.0], [4.0, 4.0])
    est = estimate_density(rc, [1.0, 0.0], Q, [1.0], seeds=[0, 1, 2])
    assert len(est.values[1.0]) == 3
    assert est.std[1.0] > 0


def test_estimate_density_requires_decreasing_eps():
    fam = GeneratorSpec(kind="latticeNN", n=2)
    with pytest.raises(ConfigError):
        estimate_density(fam, [1, 0], UNIT, [1 / 8, 1 / 4])


def test_density_model_two_homogeneous():
    model = DensityModel.isotropic(2, value=1.0)
    assert model.eval([2.0, 0.0]) == pytest.approx(4 * model.eval([1.0, 0.0]))
    assert model.eval([0.0, 0.0]) == 0.0
    aniso = DensityModel(
        directions=np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]]),
        values=np.array([1.0, 2.0, 1.0, 2.0]),
    )
    assert aniso.eval([3.0, 0.0]) == pytest.approx(9.0)
    assert aniso.eval([0.0, 3.0]) == pytest.approx(18.0)
    # angular interpolation between samples
    mid = aniso.eval([1.0, 1.0])
    assert 2 * 1.0 <= mid <= 2 * 2.0


def test_density_model_round_trip():
    model = DensityModel.isotropic(2, value=1.5)
    again = DensityModel.from_json(model.to_json())
    assert np.allclose(again.values, model.values)
    assert again.convex_certificate == model.convex_certificate


def test_build_density_model_lattice():
    fam = GeneratorSpec(kind="latticeNN", n=2)
    model = build_density_model(fam, directions=4, Q=UNIT, eps_list=[1 / 4], tol=1e-10)
    assert np.allclose(model.values, 1.0, atol=1e-6)
    assert model.convex_certificate
    assert model.eval([2.0, 0.0]) == pytest.approx(4.0, rel=1e-6)


def test_build_density_model_needs_enough_directions():
    fam = GeneratorSpec(kind="latticeNN", n=2)
    with pytest.raises(ConfigError):
        build_density_model(fam, directions=3, Q=UNIT, eps_list=[1 / 4])


def test_eval_homogenized_action_cases():
    model = DensityModel.isotropic(2)
    grid = GridSpec(dt=1.0, cell_volume=1.0)
    rho = np.ones((1, 1))
    j = np.zeros((1, 1, 2))
    assert eval_homogenized_action(model, rho, j, grid) == 0.0
    j[0, 0] = [0.5, 0.5]
    # single cell: f(v) = |v|^2 -> 0.5
    assert eval_homogenized_action(model, rho, j, grid) == pytest.approx(0.5)
    rho0 = np.zeros((1, 1))
    assert eval_homogenized_action(model, rho0, j, grid) == np.inf
    assert eval_homogenized_action(model, rho0, np.zeros((1, 1, 2)), grid) == 0.0
    with pytest.raises(NegativeDensity):
        eval_homogenized_action(model, -rho, j, grid)
    with pytest.raises(ConfigError):
        GridSpec(dt=0.0, cell_volume=1.0)


def test_homogenized_action_translation_value():
    model = DensityModel.isotropic(2)
    # rho = 1 on a unit space-time box, j = v: action = |v|^2
    K, nx = 4, 4
    grid = GridSpec(dt=1.0 / K, cell_volume=1.0 / nx**2)
    rho = np.ones((K, nx, nx))
    j = np.zeros((K, nx, nx, 2))
    j[..., 0] = 0.75
    val = eval_homogenized_action(model, rho, j, grid)
    assert val == pytest.approx(0.75**2, rel=1e-12)
