"""
Local HDG blocks, static condensation, global assembly and reconstruction
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.errors import BoundaryConditionError, LayoutError, StaleFactorizationError
from app.forward_solver import PlaneWave, PointSource, l2_errors, second_order_crosscheck, source_loads
from app.hdg import (
    BoundaryCondition,
    BoundaryKind,
    BoundarySpec,
    Discretization,
    StabilizationTau,
    assemble_A,
    build_system,
    condense,
    flux_residuals,
    reconstruct,
    solve_system,
)
from app.medium import constant_model, model_from_function
from app.mesh import SimplicialMesh, build_structured_mesh
from app.monitoring import monitor

SIGMA = complex(-0.5, 2.0 * np.pi * 0.8)


def _abc(mesh, model):
    return BoundarySpec.from_tags(mesh, {}, BoundaryCondition(BoundaryKind.ABC), model=model)


def test_geometry_integrates_constants(two_triangles):
    geometry = Discretization.build(two_triangles, 2).geometry(0)
    assert np.isclose(geometry.M.sum(), 0.5)
    for face in geometry.faces:
        assert np.isclose(face.F.sum(), two_triangles.face_measures[face.face])
        assert np.isclose(face.E.sum(), two_triangles.face_measures[face.face])
    # (d phi_i / dx_d, 1) sums to zero over i
    np.testing.assert_allclose(geometry.D.sum(axis=(1, 2)), 0.0, atol=1e-12)


def test_local_matrix_rejects_bad_parameters(two_triangles):
    geometry = Discretization.build(two_triangles, 1).geometry(0)
    with pytest.raises(ValueError):
        assemble_A(geometry, 1.0, 1.0, 0.0, np.ones(3))
    with pytest.raises(ValueError):
        assemble_A(geometry, 1.0, 1.0, SIGMA, np.array([1.0, 0.0, 1.0]))


def test_robin_without_beta_is_rejected():
    with pytest.raises(BoundaryConditionError):
        BoundaryCondition("robin", alpha=1.0, beta=0.0)


def test_impedance_coefficients():
    assert BoundaryCondition("abc").impedance_coefficient(SIGMA, 2.0, 4.0) == -1.0 / 8.0
    assert BoundaryCondition("neumann").impedance_coefficient(SIGMA, 2.0, 4.0) == 0.0
    robin = BoundaryCondition("robin", alpha=3.0, beta=2.0)
    assert np.isclose(robin.impedance_coefficient(SIGMA, 1.5, 1.0), 3.0 / (SIGMA * 1.5 * 2.0))
    with pytest.raises(BoundaryConditionError):
        BoundaryCondition("dirichlet").impedance_coefficient(SIGMA, 1.0, 1.0)


def test_boundary_spec_from_tags(square_mesh, unit_model):
    spec = BoundarySpec.from_tags(
        square_mesh, {"top": BoundaryCondition("dirichlet")}, BoundaryCondition("abc"), model=unit_model
    )
    assert spec.kind_counts() == {"dirichlet": 4, "abc": 12}
    for face in square_mesh.interior_faces:
        assert spec.condition(face) is None


def test_tau_is_inverse_density(two_triangles):
    tau = StabilizationTau.from_density(two_triangles, np.array([2.0, 4.0]))
    shared = two_triangles.interior_faces[0]
    np.testing.assert_allclose(tau.values[shared], [0.5, 0.25])
    np.testing.assert_allclose(tau.for_cell(two_triangles, 1), 0.25)


def test_condensation_matches_full_elimination(two_triangles):
    discretization = Discretization.build(two_triangles, 2)
    model = constant_model(two_triangles, 1.3, 0.9)
    system = build_system(discretization, model, SIGMA, _abc(two_triangles, model))
    blocks = system.blocks[0]
    K, _ = condense(blocks)
    # Schur complement of the full local system [[A, C], [B, L]]
    full = np.block([[blocks.A, blocks.C], [blocks.B, blocks.L]])
    n = blocks.A.shape[0]
    schur = full[n:, n:] - full[n:, :n] @ np.linalg.solve(full[:n, :n], full[:n, n:])
    np.testing.assert_allclose(K, schur, rtol=1e-10, atol=1e-12)


def test_global_matrix_ignores_cell_order(square_mesh):
    permutation = np.random.default_rng(7).permutation(square_mesh.n_cells)
    shuffled = SimplicialMesh.from_arrays(square_mesh.vertices, square_mesh.cells[permutation])

    matrices = []
    for mesh in (square_mesh, shuffled):
        model = constant_model(mesh, 1.0, 1.0)
        matrices.append(build_system(Discretization.build(mesh, 2), model, SIGMA, _abc(mesh, model)).matrix)
    assert matrices[0].shape == matrices[1].shape
    assert (matrices[0] != matrices[1]).nnz == 0


def test_flux_continuity_with_mixed_orders(square_mesh):
    orders = np.random.default_rng(11).integers(1, 4, size=square_mesh.n_cells)
    discretization = Discretization.build(square_mesh, orders)
    model = model_from_function(square_mesh, lambda x: 1.0 + 0.5 * x[:, 0], density=1.0, order=1)
    system = build_system(discretization, model, SIGMA, _abc(square_mesh, model))
    sources = [PointSource((0.3, 0.6)), PointSource((0.71, 0.22), 2.0j)]
    solution = solve_system(system, source_loads(discretization, sources), 2)
    assert flux_residuals(system, solution).max() < 1e-8
    assert monitor.factorizations == 1


@pytest.mark.parametrize("kind", ["abc", "dirichlet"])
def test_plane_wave_error_falls_with_order(square_mesh, kind):
    wave = PlaneWave(direction=(1.0, 0.5), sigma=SIGMA)
    if kind == "abc":
        boundary = wave.boundary(square_mesh)
    else:
        condition = BoundaryCondition("dirichlet", data=lambda points, normal: wave.pressure(points))
        boundary = BoundarySpec.from_tags(square_mesh, {}, condition)
    model = constant_model(square_mesh, 1.0, 1.0)

    errors = []
    for order in (1, 2, 3):
        discretization = Discretization.build(square_mesh, order)
        system = build_system(discretization, model, SIGMA, boundary)
        solution = solve_system(system, {}, 1)
        errors.append(l2_errors(discretization, solution, wave.pressure, wave.velocity))
    for name in ("pressure", "velocity_x", "velocity_y"):
        values = [e[name] for e in errors]
        assert values[2] < values[1] < values[0]
    assert errors[2]["pressure"] < 1e-2


def test_pure_laplace_problem_is_solvable(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    system = build_system(discretization, unit_model, complex(-3.0, 0.0), _abc(square_mesh, unit_model))
    solution = solve_system(system, source_loads(discretization, [PointSource((0.5, 0.5))]), 1)
    assert np.all(np.isfinite(np.concatenate([v.ravel() for v in solution.volume])))
    assert flux_residuals(system, solution).max() < 1e-8


def test_stale_system_is_detected(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 1)
    system = build_system(discretization, unit_model, SIGMA, _abc(square_mesh, unit_model))
    other = unit_model.with_vector(unit_model.vector() * 1.01)
    with pytest.raises(StaleFactorizationError):
        system.ensure_current(other)
    with pytest.raises(StaleFactorizationError):
        reconstruct(system, np.zeros(system.n_trace_dofs), model=other)


def test_reconstruct_checks_trace_length(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 1)
    system = build_system(discretization, unit_model, SIGMA, _abc(square_mesh, unit_model))
    with pytest.raises(LayoutError):
        reconstruct(system, np.zeros(system.n_trace_dofs + 1))


def test_second_order_crosscheck_converges():
    def bump(points):
        return np.exp(-np.sum((points - 0.5) ** 2, axis=1) / 0.05)

    sigma = complex(-1.0, 2.0 * np.pi * 0.5)
    discrepancies = []
    for n in (6, 12):
        mesh = build_structured_mesh([(0.0, 1.0), (0.0, 1.0)], [n, n])
        model = constant_model(mesh, 1.0, 1.0)
        discrepancies.append(
            second_order_crosscheck(Discretization.build(mesh, 3), model, sigma, bump, _abc(mesh, model))
        )
    assert np.all(np.isfinite(discrepancies))
    assert discrepancies[1] < discrepancies[0]
    assert discrepancies[1] < 0.1


@pytest.mark.parametrize("order", range(9))
def test_mass_matrix_is_symmetric_positive_definite(two_triangles, order):
    geometry = Discretization.build(two_triangles, order).geometry(1)
    M = geometry.M
    np.testing.assert_allclose(M, M.T, rtol=0, atol=1e-14 * np.abs(M).max())
    assert np.linalg.eigvalsh(M).min() > 0


def test_pure_laplace_fields_are_real(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    system = build_system(discretization, unit_model, complex(-3.0, 0.0), _abc(square_mesh, unit_model))
    solution = solve_system(system, source_loads(discretization, [PointSource((0.5, 0.5))]), 1)
    values = np.concatenate([solution.trace.ravel()] + [v.ravel() for v in solution.volume])
    assert np.abs(values.imag).max() < 1e-10 * np.abs(values.real).max()


def test_dirichlet_faces_carry_zero_trace(square_mesh, unit_model):
    discretization = Discretization.build(square_mesh, 2)
    system = build_system(discretization, unit_model, SIGMA, BoundarySpec.surface_dirichlet(square_mesh, unit_model))
    solution = solve_system(system, source_loads(discretization, [PointSource((0.4, 0.6))]), 1)

    surface = [f for f, tag in enumerate(square_mesh.face_tags) if tag == "top"]
    assert surface
    dofs = np.concatenate([discretization.connectivity.face_dofs(f) for f in surface])
    assert np.abs(solution.trace[dofs]).max() <= 1e-14 * np.abs(solution.trace).max()


def test_geometry_is_shared_between_threads(square_mesh):
    discretization = Discretization.build(square_mesh, 3)
    with ThreadPoolExecutor(max_workers=8) as pool:
        built = list(pool.map(lambda _: discretization.geometry(5), range(32)))
    assert all(g is built[0] for g in built)
    assert discretization.geometry(5, 1) is not built[0]
