"""
Sources, receivers, multi-source forward solves and the manufactured-solution study
"""

import math

import numpy as np
import pytest

from app.errors import ConfigError, PointLocationError
from app.forward_solver import (
    AcquisitionSetup,
    PlaneWave,
    PointSource,
    RestrictionOperator,
    complex_frequency,
    convergence_rates,
    line_acquisition,
    line_points,
    manufactured_study,
    solve_forward,
    source_loads,
)
from app.hdg import BoundaryCondition, BoundaryKind, BoundarySpec, Discretization, build_system, solve_system
from app.medium import constant_model
from app.mesh import build_structured_mesh
from app.monitoring import monitor

SIGMA = complex(-0.3, 2.0 * np.pi * 0.9)


def test_complex_frequency():
    assert complex_frequency(5.0) == complex(0.0, 31.41592653589793)
    assert complex_frequency(1.0, 2.0) == complex(-2.0, 2.0 * math.pi)
    with pytest.raises(ConfigError):
        complex_frequency(1.0, -0.1)


def test_setup_validation():
    with pytest.raises(ConfigError):
        AcquisitionSetup(sources=(), receivers=np.empty((0, 2)))
    with pytest.raises(ConfigError):
        AcquisitionSetup(sources=(), receivers=[[0.5, 0.5]], quantity="density")
    setup = AcquisitionSetup(sources=[PointSource((0.1, 0.1))], receivers=[0.5, 0.5], quantity="velocity_y")
    assert setup.n_receivers == 1 and setup.component == 2


def test_source_load_is_basis_at_point(square_mesh):
    discretization = Discretization.build(square_mesh, 2)
    loads = source_loads(discretization, [PointSource((0.3, 0.4), 2.0), PointSource((0.3, 0.4))])
    assert len(loads) == 1
    (cell, load), = loads.items()
    # basis values sum to one, so each column sums to its amplitude
    np.testing.assert_allclose(load.sum(axis=0), [2.0, 1.0])


def test_source_outside_mesh(square_mesh):
    with pytest.raises(PointLocationError):
        source_loads(Discretization.build(square_mesh, 1), [PointSource((2.0, 0.5))])


def test_restriction_adjoint_duality(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    boundary = BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    setup = line_acquisition(square_mesh, 2, 5)
    result = solve_forward(discretization, unit_model, SIGMA, setup, boundary)

    rng = np.random.default_rng(5)
    residuals = rng.standard_normal((5, 2)) + 1j * rng.standard_normal((5, 2))
    lhs = np.vdot(residuals, result.restriction.apply(result.solution))
    local = result.restriction.adjoint(residuals, discretization)
    rhs = sum(np.vdot(local[cell], result.solution.volume[cell]) for cell in local)
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_velocity_receivers(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    boundary = BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    sources = (PointSource((0.5, 0.5)),)
    receivers = np.array([[0.25, 0.5], [0.75, 0.5]])
    values = {}
    for quantity in ("pressure", "velocity_x"):
        setup = AcquisitionSetup(sources=sources, receivers=receivers, quantity=quantity)
        values[quantity] = solve_forward(discretization, unit_model, SIGMA, setup, boundary).measurements
    assert values["velocity_x"].shape == (2, 1)
    assert not np.allclose(values["velocity_x"], values["pressure"])


def test_ten_sources_share_one_factorization(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    setup = line_acquisition(square_mesh, 10, 6)
    result = solve_forward(
        discretization, unit_model, SIGMA, setup, BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    )
    assert result.measurements.shape == (6, 10)
    assert monitor.factorizations == 1
    assert monitor.count("solves") == 10


def test_no_sources_gives_zero_measurements(square_mesh, unit_model):
    setup = AcquisitionSetup(sources=(), receivers=[[0.5, 0.5]])
    result = solve_forward(
        Discretization.build(square_mesh, 1), unit_model, SIGMA, setup,
        BoundarySpec.surface_dirichlet(square_mesh, unit_model),
    )
    assert result.measurements.shape == (1, 0)
    assert monitor.factorizations == 0


def test_source_columns_are_independent(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    boundary = BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    receivers = line_points(square_mesh, 4)
    a, b = PointSource((0.3, 0.4)), PointSource((0.6, 0.3), -1.5j)

    separate = solve_forward(
        discretization, unit_model, SIGMA, AcquisitionSetup(sources=(a, b), receivers=receivers), boundary
    ).measurements
    combined = solve_forward(
        discretization, unit_model, SIGMA,
        AcquisitionSetup(sources=(PointSource((0.3, 0.4)),), receivers=receivers), boundary,
    ).measurements
    np.testing.assert_allclose(separate[:, 0], combined[:, 0], rtol=1e-12)


def test_line_points_sit_below_surface(square_mesh):
    points = line_points(square_mesh, 4, offset=0.1)
    np.testing.assert_allclose(points[:, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(points[:, 1], 0.9)
    assert np.allclose(line_points(square_mesh, 3)[:, 1], 0.75)


def test_restriction_rejects_missing_component(square_mesh):
    with pytest.raises(ConfigError):
        RestrictionOperator.build(Discretization.build(square_mesh, 1), np.array([[0.5, 0.5]]), component=3)


def test_convergence_rates_of_power_law():
    sizes = [0.5, 0.25, 0.125]
    rates = convergence_rates(sizes, [3.0 * h ** 2.5 for h in sizes])
    np.testing.assert_allclose(rates, 2.5)


@pytest.mark.slow
@pytest.mark.parametrize("order", [1, 2, 3])
def test_plane_wave_converges_at_optimal_rate(order):
    wave = PlaneWave(direction=(1.0, 0.3), sigma=complex(-0.2, 2.0 * np.pi))
    rows = manufactured_study([(0.0, 1.0), (0.0, 1.0)], [2, 4, 8, 16], order, wave)
    sizes = [row["h"] for row in rows]
    for name in ("pressure", "velocity_x", "velocity_y"):
        rates = convergence_rates(sizes, [row[name] for row in rows])
        assert rates[-1] >= order + 0.8, (name, rates)


def test_amplitude_scales_the_solution(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    boundary = BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    receivers = line_points(square_mesh, 5)
    amplitude = 2.0 - 3.0j
    setup = AcquisitionSetup(
        sources=(PointSource((0.4, 0.55)), PointSource((0.4, 0.55), amplitude)), receivers=receivers
    )
    result = solve_forward(discretization, unit_model, SIGMA, setup, boundary)
    np.testing.assert_allclose(result.measurements[:, 1], amplitude * result.measurements[:, 0], rtol=1e-12)
    np.testing.assert_allclose(
        result.solution.trace[:, 1], amplitude * result.solution.trace[:, 0],
        rtol=0, atol=1e-12 * np.abs(result.solution.trace[:, 1]).max(),
    )


def test_two_sources_superpose(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    boundary = BoundarySpec.surface_dirichlet(square_mesh, unit_model)
    system = build_system(discretization, unit_model, SIGMA, boundary)
    loads = source_loads(discretization, [PointSource((0.3, 0.4)), PointSource((0.65, 0.3), 0.5j)])
    separate = solve_system(system, loads, 2)

    combined_loads = {cell: load.sum(axis=1, keepdims=True) for cell, load in loads.items()}
    combined = solve_system(system, combined_loads, 1)
    expected = separate.trace.sum(axis=1)
    np.testing.assert_allclose(combined.trace[:, 0], expected, rtol=0, atol=1e-10 * np.abs(expected).max())
    for cell in range(square_mesh.n_cells):
        expected = separate.volume[cell].sum(axis=1)
        np.testing.assert_allclose(combined.volume[cell][:, 0], expected, rtol=0, atol=1e-10 * np.abs(expected).max())


def test_laplace_shift_damps_the_field():
    mesh = build_structured_mesh([(0.0, 1.0), (0.0, 1.0)], [8, 8])
    model = constant_model(mesh, 1.0, 1.0)
    discretization = Discretization.build(mesh, 3)
    boundary = BoundarySpec.from_tags(mesh, {}, BoundaryCondition(BoundaryKind.ABC), model=model)
    # fixed points at growing distance from the source
    receivers = np.array([[0.47 + r, 0.53] for r in (0.1, 0.2, 0.3)])
    setup = AcquisitionSetup(sources=(PointSource((0.47, 0.52)),), receivers=receivers)

    shifts = [0.0, 0.5, 1.0, 2.0, 4.0]
    magnitudes = np.array([
        np.abs(solve_forward(discretization, model, complex_frequency(0.8, s), setup, boundary).measurements[:, 0])
        for s in shifts
    ])
    assert np.all(np.diff(magnitudes, axis=0) < 0)
