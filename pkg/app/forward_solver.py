"""
Forward problem: assemble, factorize once, solve every source, reconstruct
and sample the pressure at the receivers. Also hosts the oracles used to
check the discretization (manufactured plane wave, continuous Galerkin
second-order cross-check).
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import spsolve

from .basis import cell_basis
from .errors import ConfigError, HDGError, LayoutError
from .hdg import (
    BoundaryCondition,
    BoundaryKind,
    BoundarySpec,
    CellLoads,
    Discretization,
    FieldSolution,
    HDGSystem,
    build_system,
    reconstruct,
)
from .logger import get_logger, log_performance
from .medium import ModelState, constant_model
from .mesh import SURFACE_TAG, SimplicialMesh, build_structured_mesh
from .sparse_direct import solve_many

logger = get_logger("forward_solver")

QUANTITIES = ("pressure", "velocity_x", "velocity_y", "velocity_z")


def complex_frequency(frequency: float, laplace_shift: float = 0.0) -> complex:
    """sigma = i omega - s with omega = 2 pi f; s >= 0 damps"""
    if laplace_shift < 0:
        raise ConfigError(f"Laplace shift must be nonnegative, got {laplace_shift}")
    return complex(-float(laplace_shift), 2.0 * math.pi * float(frequency))


@dataclass(frozen=True)
class PointSource:
    position: Tuple[float, ...]
    amplitude: complex = 1.0


@dataclass(frozen=True)
class AcquisitionSetup:
    sources: Tuple[PointSource, ...]
    receivers: np.ndarray = field(compare=False)   # (n_receivers, dim)
    quantity: str = "pressure"

    def __post_init__(self):
        receivers = np.atleast_2d(np.asarray(self.receivers, dtype=float))
        if receivers.size == 0:
            raise ConfigError("acquisition needs at least one receiver")
        if self.quantity not in QUANTITIES:
            raise ConfigError(f"unknown measured quantity {self.quantity!r}, expected one of {QUANTITIES}")
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "receivers", receivers)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_receivers(self) -> int:
        return len(self.receivers)

    @property
    def component(self) -> int:
        """Block of U_e that is measured: 0 for pressure, d + 1 for velocity component d"""
        return QUANTITIES.index(self.quantity)


@dataclass(frozen=True, eq=False)
class RestrictionOperator:
    """Point evaluation of one field component: containing cell + basis values per receiver"""

    cells: np.ndarray                 # (n_receivers,)
    values: Tuple[np.ndarray, ...]    # basis values at each receiver, (N_e,)
    component: int = 0

    @classmethod
    def build(cls, discretization: Discretization, points: np.ndarray, component: int = 0) -> "RestrictionOperator":
        mesh = discretization.mesh
        if component > mesh.dim:
            raise ConfigError(f"component {component} does not exist in {mesh.dim}D")
        cells, reference = mesh.locate(points)
        values = tuple(
            cell_basis(int(discretization.orders[cell]), mesh.dim).values(reference[k:k + 1])[0]
            for k, cell in enumerate(cells)
        )
        return cls(cells=cells, values=values, component=component)

    @property
    def n_receivers(self) -> int:
        return len(self.cells)

    def apply(self, solution: FieldSolution) -> np.ndarray:
        """(n_receivers, n_rhs), rows in receiver declaration order"""
        out = np.empty((self.n_receivers, solution.n_rhs), dtype=np.complex128)
        for k, (cell, phi) in enumerate(zip(self.cells, self.values)):
            n = len(phi)
            block = solution.volume[cell][self.component * n:(self.component + 1) * n]
            out[k] = phi @ block
        return out

    def adjoint(self, residuals: np.ndarray, discretization: Discretization) -> Dict[int, np.ndarray]:
        """
        R^* r: local vectors ((dim+1) N_e, n_rhs) nonzero only in cells holding
        receivers, summed in receiver order
        """
        residuals = np.asarray(residuals, dtype=np.complex128)
        if residuals.ndim == 1:
            residuals = residuals[:, None]
        if residuals.shape[0] != self.n_receivers:
            raise LayoutError(
                f"{residuals.shape[0]} residual rows for {self.n_receivers} receivers"
            )
        dim = discretization.mesh.dim
        out: Dict[int, np.ndarray] = {}
        for k, (cell, phi) in enumerate(zip(self.cells, self.values)):
            cell = int(cell)
            n = len(phi)
            if cell not in out:
                out[cell] = np.zeros(((dim + 1) * n, residuals.shape[1]), dtype=np.complex128)
            out[cell][self.component * n:(self.component + 1) * n] += np.outer(phi, residuals[k])
        return out


def source_loads(discretization: Discretization, sources: Sequence[PointSource]) -> CellLoads:
    """Delta sources: column k carries amplitude_k * phi_j(x_k) in the cell holding source k"""
    loads: CellLoads = {}
    if not sources:
        return loads
    mesh = discretization.mesh
    cells, reference = mesh.locate(np.array([s.position for s in sources], dtype=float))
    for k, (cell, source) in enumerate(zip(cells, sources)):
        cell = int(cell)
        phi = cell_basis(int(discretization.orders[cell]), mesh.dim).values(reference[k:k + 1])[0]
        if cell not in loads:
            loads[cell] = np.zeros((len(phi), len(sources)), dtype=np.complex128)
        loads[cell][:, k] += complex(source.amplitude) * phi
    return loads


@dataclass(eq=False)
class ForwardResult:
    system: HDGSystem
    solution: FieldSolution
    loads: CellLoads
    restriction: RestrictionOperator
    measurements: np.ndarray   # (n_receivers, n_sources)


def solve_forward(
    discretization: Discretization,
    model: ModelState,
    sigma: complex,
    setup: AcquisitionSetup,
    boundary: BoundarySpec,
    system: Optional[HDGSystem] = None,
    restriction: Optional[RestrictionOperator] = None,
) -> ForwardResult:
    """All sources share one assembled system and one factorization"""
    start_time = time.time()
    if system is None:
        system = build_system(discretization, model, sigma, boundary)
    else:
        system.ensure_current(model)
    restriction = restriction or RestrictionOperator.build(discretization, setup.receivers, setup.component)

    loads = source_loads(discretization, setup.sources)
    n_rhs = setup.n_sources
    if n_rhs == 0:
        logger.info("No sources: returning zero fields")
        trace = np.zeros((system.n_trace_dofs, 0), dtype=np.complex128)
    else:
        factorization = system.factorize()
        trace = solve_many(factorization, system.forward_rhs(loads, n_rhs))

    solution = reconstruct(system, trace, loads, source_ids=range(n_rhs))
    measurements = measure(solution, restriction)

    log_performance(
        "forward solve", time.time() - start_time,
        sources=n_rhs, receivers=restriction.n_receivers, sigma=str(complex(sigma)),
    )
    return ForwardResult(
        system=system, solution=solution, loads=loads, restriction=restriction, measurements=measurements
    )


def measure(solution: FieldSolution, restriction: RestrictionOperator) -> np.ndarray:
    return restriction.apply(solution)


# Acquisition helpers

def surface_offset(mesh: SimplicialMesh) -> float:
    """Median height of the cells touching the surface"""
    faces = [f for f, tag in enumerate(mesh.face_tags) if tag == SURFACE_TAG]
    if not faces:
        return float(np.median(mesh.diameters))
    cells = mesh.face_cells[faces, 0]
    heights = np.ptp(mesh.vertices[mesh.cells[cells]][:, :, -1], axis=1)
    return float(np.median(heights))


def line_points(mesh: SimplicialMesh, count: int, offset: Optional[float] = None) -> np.ndarray:
    """
    `count` points evenly spread along the first horizontal axis, `offset`
    beneath the top of the bounding box (centred on the other horizontal axis in 3D)
    """
    low, high = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    offset = surface_offset(mesh) if offset is None else float(offset)
    x = low[0] + (high[0] - low[0]) * (np.arange(count) + 0.5) / count
    points = np.empty((count, mesh.dim))
    points[:, 0] = x
    if mesh.dim == 3:
        points[:, 1] = 0.5 * (low[1] + high[1])
    points[:, -1] = high[-1] - offset
    return points


def line_acquisition(
    mesh: SimplicialMesh,
    n_sources: int,
    n_receivers: int,
    source_offset: Optional[float] = None,
    receiver_offset: Optional[float] = None,
    amplitude: complex = 1.0,
) -> AcquisitionSetup:
    """Reflection-style setup: sources and receivers on lines just beneath the surface"""
    sources = tuple(PointSource(tuple(p), amplitude) for p in line_points(mesh, n_sources, source_offset))
    return AcquisitionSetup(sources=sources, receivers=line_points(mesh, n_receivers, receiver_offset))


# Manufactured solution

@dataclass(frozen=True)
class PlaneWave:
    """
    p = exp(sigma d.x / c), v = d p / (rho c) solves the source-free system for
    constant c and rho
    """

    direction: Tuple[float, ...]
    sigma: complex
    speed: float = 1.0
    density: float = 1.0

    @property
    def unit_direction(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        return d / np.linalg.norm(d)

    def pressure(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.sigma * (np.atleast_2d(points) @ self.unit_direction) / self.speed)

    def velocity(self, points: np.ndarray) -> np.ndarray:
        """(n, dim)"""
        return self.pressure(points)[:, None] * self.unit_direction / (self.density * self.speed)

    def absorbing_data(self, points: np.ndarray, normal: np.ndarray) -> np.ndarray:
        """g = v.n - p / (rho c), the defect of the absorbing condition"""
        return self.velocity(points) @ normal - self.pressure(points) / (self.density * self.speed)

    def boundary(self, mesh: SimplicialMesh) -> BoundarySpec:
        condition = BoundaryCondition(BoundaryKind.ABC, data=self.absorbing_data)
        return BoundarySpec.from_tags(mesh, {}, condition, reference_speed=self.speed)


def l2_errors(
    discretization: Discretization,
    solution: FieldSolution,
    pressure: Callable[[np.ndarray], np.ndarray],
    velocity: Callable[[np.ndarray], np.ndarray],
    column: int = 0,
) -> Dict[str, float]:
    """L2 errors of p_h and each v_h component, integrated with the cell quadrature"""
    mesh = discretization.mesh
    squared = np.zeros(mesh.dim + 1)
    for cell in range(mesh.n_cells):
        geometry = discretization.geometry(cell)
        U = solution.volume[cell][:, column]
        n = geometry.n_basis
        exact_v = velocity(geometry.points)
        squared[0] += geometry.weights @ np.abs(geometry.phi @ U[:n] - pressure(geometry.points)) ** 2
        for d in range(mesh.dim):
            approx = geometry.phi @ U[(d + 1) * n:(d + 2) * n]
            squared[d + 1] += geometry.weights @ np.abs(approx - exact_v[:, d]) ** 2
    names = ["pressure"] + [f"velocity_{axis}" for axis in "xyz"[:mesh.dim]]
    return dict(zip(names, np.sqrt(squared).tolist()))


def convergence_rates(sizes: Sequence[float], errors: Sequence[float]) -> np.ndarray:
    """Observed orders log(e_k / e_k+1) / log(h_k / h_k+1)"""
    sizes, errors = np.asarray(sizes, dtype=float), np.asarray(errors, dtype=float)
    return np.log(errors[:-1] / errors[1:]) / np.log(sizes[:-1] / sizes[1:])


def manufactured_study(
    extent: Sequence[Sequence[float]],
    resolutions: Sequence[int],
    order: int,
    wave: PlaneWave,
) -> List[Dict[str, float]]:
    """Errors of the plane-wave problem on a sequence of uniformly refined structured meshes"""
    rows = []
    for n in resolutions:
        mesh = build_structured_mesh(extent, [n] * len(extent))
        discretization = Discretization.build(mesh, order)
        model = constant_model(mesh, wave.speed, wave.density)
        system = build_system(discretization, model, wave.sigma, wave.boundary(mesh))
        trace = solve_many(system.factorize(), system.forward_rhs({}, 1))
        solution = reconstruct(system, trace)
        errors = l2_errors(discretization, solution, wave.pressure, wave.velocity)
        errors["h"] = float(np.max(mesh.diameters))
        errors["cells"] = mesh.n_cells
        logger.info(f"Plane wave order {order}, {n} cells per axis: pressure error {errors['pressure']:.3e}")
        rows.append(errors)
    return rows


# Second-order cross-check

def _p1_system(
    mesh: SimplicialMesh, model: ModelState, sigma: complex, boundary: BoundarySpec
) -> Tuple[sps.csr_matrix, np.ndarray]:
    """
    P1 Galerkin for div(rho^-1 grad p) - sigma^2 kappa^-1 p = sigma f with
    rho^-1 dp/dn = sigma eta p on impedance faces and p = 0 on Dirichlet faces.
    Returns the matrix and the Dirichlet vertex mask.
    """
    dim = mesh.dim
    n_vertices = len(mesh.vertices)
    speed = model.cell_mean_wave_speed()
    reference_grad = np.vstack([-np.ones(dim), np.eye(dim)])
    local_mass = (np.ones((dim + 1, dim + 1)) + np.eye(dim + 1)) / ((dim + 1) * (dim + 2))

    rows, cols, values = [], [], []
    for cell in range(mesh.n_cells):
        vertices = mesh.cells[cell]
        rho = model.density[cell]
        kappa_inv = 1.0 / (rho * speed[cell] ** 2)
        volume = abs(mesh.volumes[cell])
        grad = reference_grad @ mesh.inverse_jacobians[cell]
        local = -volume / rho * grad @ grad.T - sigma ** 2 * kappa_inv * volume * local_mass
        rows.append(np.repeat(vertices, dim + 1))
        cols.append(np.tile(vertices, dim + 1))
        values.append(local.ravel())

    dirichlet = np.zeros(n_vertices, dtype=bool)
    face_mass = (np.ones((dim, dim)) + np.eye(dim)) / (dim * (dim + 1))
    for face in mesh.boundary_faces:
        condition = boundary.condition(int(face))
        vertices = mesh.faces[face]
        if condition.is_dirichlet:
            if condition.data is not None:
                logger.warning("Dirichlet data is ignored by the second-order cross-check")
            dirichlet[vertices] = True
            continue
        rho = model.density[mesh.face_cells[face, 0]]
        eta = -condition.impedance_coefficient(sigma, rho, boundary.impedance_speed[face])
        local = sigma * eta * mesh.face_measures[face] * face_mass
        rows.append(np.repeat(vertices, dim))
        cols.append(np.tile(vertices, dim))
        values.append(local.ravel())

    matrix = sps.coo_matrix(
        (np.concatenate(values).astype(np.complex128), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_vertices, n_vertices),
    ).tocsr()
    return matrix, dirichlet


def second_order_crosscheck(
    discretization: Discretization,
    model: ModelState,
    sigma: complex,
    source: Union[PointSource, Callable[[np.ndarray], np.ndarray]],
    boundary: Optional[BoundarySpec] = None,
) -> float:
    """
    Relative L2 distance between the HDG pressure and a P1 continuous Galerkin
    solution of the second-order equation on the same mesh. NaN when either fails.
    """
    mesh = discretization.mesh
    boundary = boundary or BoundarySpec.surface_dirichlet(mesh, model)
    if np.ptp(model.density) > 0:
        logger.warning("Second-order cross-check assumes constant density")

    try:
        matrix, dirichlet = _p1_system(mesh, model, sigma, boundary)
        rhs = np.zeros(len(mesh.vertices), dtype=np.complex128)
        if isinstance(source, PointSource):
            cells, reference = mesh.locate(np.asarray(source.position, dtype=float))
            barycentric = np.concatenate([[1.0 - reference[0].sum()], reference[0]])
            rhs[mesh.cells[cells[0]]] += sigma * complex(source.amplitude) * barycentric
            loads = source_loads(discretization, [source])
        else:
            loads = {}
            for cell in range(mesh.n_cells):
                geometry = discretization.geometry(cell)
                f = np.asarray(source(geometry.points), dtype=np.complex128)
                loads[cell] = (geometry.phi.T @ (geometry.weights * f))[:, None]
                p1 = cell_basis(1, mesh.dim).values(mesh.to_reference(cell, geometry.points))
                rhs[mesh.cells[cell]] += sigma * (p1.T @ (geometry.weights * f))

        # Dirichlet rows become identity rows with zero data
        keep = sps.diags((~dirichlet).astype(float))
        matrix = (keep @ matrix + sps.diags(dirichlet.astype(float))).tocsc()
        rhs[dirichlet] = 0.0
        reference_field = spsolve(matrix, rhs)

        system = build_system(discretization, model, sigma, boundary)
        trace = solve_many(system.factorize(), system.forward_rhs(loads, 1))
        solution = reconstruct(system, trace, loads)
    except (HDGError, RuntimeError, ValueError) as exc:
        logger.error(f"Second-order cross-check failed: {exc}")
        return math.nan

    difference, norm = 0.0, 0.0
    for cell in range(mesh.n_cells):
        geometry = discretization.geometry(cell)
        p_hdg = geometry.phi @ solution.pressure(cell)[:, 0]
        p1 = cell_basis(1, mesh.dim).values(mesh.to_reference(cell, geometry.points))
        p_cg = p1 @ reference_field[mesh.cells[cell]]
        difference += geometry.weights @ np.abs(p_hdg - p_cg) ** 2
        norm += geometry.weights @ np.abs(p_hdg) ** 2

    discrepancy = math.sqrt(difference / norm) if norm > 0 else math.nan
    logger.info(f"Second-order cross-check: relative discrepancy {discrepancy:.3e}")
    return discrepancy
