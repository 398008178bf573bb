"""
HDG discretization of the first-order acoustic system

    sigma rho v - grad p = 0,    -sigma kappa^-1 p + div v = f

Per cell the volume unknowns U_e = (p, v_1, .., v_dim) satisfy
A_e U_e + C_e R_e Lambda = S_e; the global trace system is
sum_e R_e^T (L_e - B_e A_e^-1 C_e) R_e Lambda = sum_e R_e^T (-B_e A_e^-1 S_e) + boundary data.

Local dof layout: all pressure coefficients first, then one block per velocity
component. Local trace layout: face blocks in local face order (face i is
opposite vertex i).
"""

import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sps
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .basis import (
    REFERENCE_MEASURE,
    cell_basis,
    cell_quadrature_degree,
    count_volume_dofs,
    dof_count,
    face_basis,
    face_orders,
    lagrange_basis,
    quadrature_for,
)
from .cache import ReferenceCache
from .errors import BoundaryConditionError, LayoutError, SingularCellError, StaleFactorizationError
from .logger import get_logger, log_performance
from .medium import ModelState
from .mesh import SURFACE_TAG, ConnectivityMap, SimplicialMesh, build_faces_and_connectivity
from .monitoring import monitor
from .sparse_direct import Factorization, factorize, solve_many
from .workers import map_ordered

logger = get_logger("hdg")

# Relative size of the smallest dense-LU pivot below which A_e counts as singular
LOCAL_PIVOT_TOLERANCE = 1e-13

# cell -> (N_dof^e, n_rhs) pressure loads (f, phi_j)_K
CellLoads = Dict[int, np.ndarray]
BoundaryData = Callable[[np.ndarray, np.ndarray], np.ndarray]


# Boundary conditions

class BoundaryKind(str, Enum):
    ROBIN = "robin"
    ABC = "abc"
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class BoundaryCondition:
    """
    Robin: alpha p + sigma rho beta v.n = 0, i.e. v.n = -alpha / (sigma rho beta) p.
    Optional data g(points, normals) makes it inhomogeneous: v.n = eta p + g
    (for Dirichlet, g is the prescribed pressure).
    """

    kind: BoundaryKind
    alpha: complex = 0.0
    beta: complex = 1.0
    data: Optional[BoundaryData] = field(default=None, compare=False)

    def __post_init__(self):
        kind = BoundaryKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is BoundaryKind.ROBIN and self.beta == 0:
            raise BoundaryConditionError(
                "Robin condition with beta = 0 is singular; declare the face as Dirichlet",
                alpha=complex(self.alpha),
            )

    @property
    def is_dirichlet(self) -> bool:
        return self.kind is BoundaryKind.DIRICHLET

    def impedance_coefficient(self, sigma: complex, rho: float, speed: float) -> complex:
        """alpha / (sigma rho beta), the coefficient added to -tau in the boundary L block"""
        if self.kind is BoundaryKind.ROBIN:
            return complex(self.alpha) / (sigma * rho * complex(self.beta))
        if self.kind is BoundaryKind.ABC:
            return -1.0 / (speed * rho)
        if self.kind is BoundaryKind.NEUMANN:
            return 0.0
        raise BoundaryConditionError("Dirichlet faces have no impedance coefficient")


@dataclass(frozen=True, eq=False)
class BoundarySpec:
    """One condition per boundary face (None on interior faces) plus the frozen ABC speeds"""

    conditions: Tuple[Optional[BoundaryCondition], ...]
    impedance_speed: np.ndarray  # (N_sigma,) owner-cell mean wave speed when built

    @classmethod
    def from_tags(
        cls,
        mesh: SimplicialMesh,
        mapping: Mapping[str, BoundaryCondition],
        default: BoundaryCondition,
        model: Optional[ModelState] = None,
        reference_speed: float = 1.0,
    ) -> "BoundarySpec":
        unknown = set(mapping) - set(mesh.face_tags)
        if unknown:
            logger.warning(f"Boundary tags not present on the mesh: {sorted(unknown)}")

        conditions = tuple(
            None if mesh.face_cells[face, 1] >= 0 else mapping.get(mesh.face_tags[face], default)
            for face in range(mesh.n_faces)
        )
        if model is not None:
            speed = model.cell_mean_wave_speed()[mesh.face_cells[:, 0]]
        else:
            speed = np.full(mesh.n_faces, float(reference_speed))

        spec = cls(conditions=conditions, impedance_speed=np.asarray(speed, dtype=float))
        logger.debug(f"Boundary faces per kind: {spec.kind_counts()}")
        return spec

    @classmethod
    def surface_dirichlet(cls, mesh: SimplicialMesh, model: Optional[ModelState] = None) -> "BoundarySpec":
        """Dirichlet on the free surface, absorbing everywhere else"""
        return cls.from_tags(
            mesh,
            {SURFACE_TAG: BoundaryCondition(BoundaryKind.DIRICHLET)},
            BoundaryCondition(BoundaryKind.ABC),
            model=model,
        )

    def condition(self, face: int) -> Optional[BoundaryCondition]:
        return self.conditions[face]

    def kind_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for condition in self.conditions:
            if condition is not None:
                counts[condition.kind.value] = counts.get(condition.kind.value, 0) + 1
        return counts


@dataclass(frozen=True, eq=False)
class StabilizationTau:
    """tau per face side, 1/rho of the adjacent cell; zero where a side does not exist"""

    values: np.ndarray  # (N_sigma, 2)

    @classmethod
    def from_density(cls, mesh: SimplicialMesh, density: np.ndarray) -> "StabilizationTau":
        density = np.asarray(density, dtype=float)
        values = np.zeros((mesh.n_faces, 2))
        for side in (0, 1):
            cells = mesh.face_cells[:, side]
            present = cells >= 0
            values[present, side] = 1.0 / density[cells[present]]
        return cls(values=values)

    def for_cell(self, mesh: SimplicialMesh, cell: int) -> np.ndarray:
        faces = mesh.cell_faces[cell]
        sides = (mesh.face_cells[faces, 0] != cell).astype(np.int64)
        return self.values[faces, sides]


# Geometry

@dataclass(frozen=True, eq=False)
class FaceGeometry:
    face: int
    local: int
    order: int
    normal: np.ndarray    # outward of this cell
    points: np.ndarray    # (nfq, dim) physical quadrature points
    weights: np.ndarray   # (nfq,) physical weights
    phi: np.ndarray       # (nfq, N) cell basis on the face
    xi: np.ndarray        # (nfq, NF) trace basis
    E: np.ndarray         # (N, NF)  (xi_k, phi_j)_F
    Mff: np.ndarray       # (N, N)   (phi_i, phi_j)_F
    F: np.ndarray         # (NF, NF) (xi_k, xi_j)_F

    @property
    def n_trace(self) -> int:
        return self.xi.shape[1]


@dataclass(frozen=True, eq=False)
class CellGeometry:
    cell: int
    order: int
    dim: int
    points: np.ndarray      # (nq, dim) physical quadrature points
    weights: np.ndarray     # (nq,) physical weights
    phi: np.ndarray         # (nq, N)
    grad: np.ndarray        # (nq, N, dim) physical gradients
    model_phi: np.ndarray   # (nq, n_model_dof) model basis
    M: np.ndarray           # (N, N)
    D: np.ndarray           # (dim, N, N), D[d][j, i] = (d_d phi_i, phi_j)
    faces: Tuple[FaceGeometry, ...]

    @property
    def n_basis(self) -> int:
        return self.phi.shape[1]

    @property
    def n_local(self) -> int:
        return (self.dim + 1) * self.n_basis

    @property
    def trace_sizes(self) -> List[int]:
        return [face.n_trace for face in self.faces]

    @property
    def n_trace(self) -> int:
        return sum(self.trace_sizes)

    def trace_slices(self) -> List[slice]:
        starts = np.concatenate([[0], np.cumsum(self.trace_sizes)])
        return [slice(int(starts[i]), int(starts[i + 1])) for i in range(len(self.faces))]


def build_cell_geometry(
    mesh: SimplicialMesh, cell: int, order: int, trace_orders: Sequence[int], model_order: int = 0
) -> CellGeometry:
    dim = mesh.dim
    basis = cell_basis(order, dim)

    rule = quadrature_for(cell_quadrature_degree(order, model_order), "cell", dim)
    scale = abs(mesh.volumes[cell]) / REFERENCE_MEASURE[dim]
    weights = rule.weights * scale
    phi = basis.values(rule.points)
    grad = basis.gradients(rule.points) @ mesh.inverse_jacobians[cell]
    model_phi = lagrange_basis(model_order, dim).values(rule.points)

    M = phi.T @ (weights[:, None] * phi)
    D = np.stack([phi.T @ (weights[:, None] * grad[:, :, d]) for d in range(dim)])

    faces = []
    for local, face in enumerate(mesh.cell_faces[cell]):
        q = int(trace_orders[local])
        face_rule = quadrature_for(max(2 * max(order, q), 1), "face", dim)
        points = mesh.face_points(face, face_rule.points)
        face_weights = face_rule.weights * mesh.face_measures[face] / REFERENCE_MEASURE[dim - 1]
        face_phi = basis.values(mesh.to_reference(cell, points))
        xi = face_basis(q, dim).values(face_rule.points)
        faces.append(
            FaceGeometry(
                face=int(face),
                local=local,
                order=q,
                normal=mesh.cell_normals[cell, local],
                points=points,
                weights=face_weights,
                phi=face_phi,
                xi=xi,
                E=face_phi.T @ (face_weights[:, None] * xi),
                Mff=face_phi.T @ (face_weights[:, None] * face_phi),
                F=xi.T @ (face_weights[:, None] * xi),
            )
        )

    return CellGeometry(
        cell=cell,
        order=order,
        dim=dim,
        points=mesh.to_physical(cell, rule.points),
        weights=weights,
        phi=phi,
        grad=grad,
        model_phi=model_phi,
        M=M,
        D=D,
        faces=tuple(faces),
    )


@dataclass(frozen=True, eq=False)
class Discretization:
    """Mesh + per-cell volume orders, derived face orders and the trace layout"""

    mesh: SimplicialMesh
    orders: np.ndarray
    trace_orders: np.ndarray
    connectivity: ConnectivityMap
    _geometry: ReferenceCache = field(default_factory=lambda: ReferenceCache("geometry"), repr=False)

    @classmethod
    def build(cls, mesh: SimplicialMesh, orders: Union[int, np.ndarray]) -> "Discretization":
        orders = np.array(np.broadcast_to(np.asarray(orders, dtype=np.int64), (mesh.n_cells,)))
        if np.any(orders < 0):
            raise ValueError("polynomial orders must be nonnegative")
        trace_orders = face_orders(mesh, orders)
        counts = np.array([dof_count(int(q), mesh.dim - 1) for q in trace_orders], dtype=np.int64)
        _, connectivity = build_faces_and_connectivity(mesh, counts)
        orders.flags.writeable = False
        trace_orders.flags.writeable = False
        return cls(mesh=mesh, orders=orders, trace_orders=trace_orders, connectivity=connectivity)

    @property
    def n_trace_dofs(self) -> int:
        return self.connectivity.n_trace_dofs

    @property
    def volume_dofs(self) -> int:
        """Per scalar unknown"""
        return count_volume_dofs(self.mesh, self.orders)

    def geometry(self, cell: int, model_order: int = 0) -> CellGeometry:
        """Built once per (cell, model order); safe to call from worker threads"""
        def build() -> CellGeometry:
            trace_orders = self.trace_orders[self.mesh.cell_faces[cell]]
            return build_cell_geometry(self.mesh, cell, int(self.orders[cell]), trace_orders, model_order)
        return self._geometry.get_or_build((cell, model_order), build)

    def summary(self) -> dict:
        volume = self.volume_dofs
        trace = self.n_trace_dofs
        return {
            "trace_dofs": trace,
            "volume_dofs_per_unknown": volume,
            "volume_dofs_total": (self.mesh.dim + 1) * volume,
            "size_ratio": trace / ((self.mesh.dim + 1) * volume),
            "order_min": int(self.orders.min()),
            "order_max": int(self.orders.max()),
        }


# Local blocks

def assemble_A(
    geometry: CellGeometry, kappa_inv: np.ndarray, rho: float, sigma: complex, taus: np.ndarray
) -> np.ndarray:
    """kappa_inv is sampled at the cell quadrature points"""
    if sigma == 0:
        raise ValueError("complex frequency must be nonzero")
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise ValueError(f"stabilization must be positive on every face of cell {geometry.cell}")

    N, dim = geometry.n_basis, geometry.dim
    weights = geometry.weights * np.broadcast_to(kappa_inv, geometry.weights.shape)
    mass_kappa = geometry.phi.T @ (weights[:, None] * geometry.phi)

    A = np.zeros((geometry.n_local, geometry.n_local), dtype=np.complex128)
    A[:N, :N] = -sigma * mass_kappa + sum(tau * face.Mff for tau, face in zip(taus, geometry.faces))
    for d in range(dim):
        block = slice((d + 1) * N, (d + 2) * N)
        A[:N, block] = geometry.D[d]
        A[block, :N] = -geometry.D[d].T
        A[block, block] = -sigma * rho * geometry.M
    return A


def assemble_C_S(
    geometry: CellGeometry, taus: np.ndarray, load: Optional[np.ndarray] = None, n_rhs: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """load holds the pressure rows (f, phi_j)_K, shape (N,) or (N, n_rhs)"""
    N, dim = geometry.n_basis, geometry.dim
    C = np.zeros((geometry.n_local, geometry.n_trace), dtype=np.complex128)
    for tau, face, block in zip(taus, geometry.faces, geometry.trace_slices()):
        C[:N, block] = -tau * face.E
        for d in range(dim):
            C[(d + 1) * N:(d + 2) * N, block] = face.normal[d] * face.E

    if load is None:
        S = np.zeros((geometry.n_local, n_rhs), dtype=np.complex128)
    else:
        load = np.asarray(load, dtype=np.complex128).reshape(N, -1)
        S = np.zeros((geometry.n_local, load.shape[1]), dtype=np.complex128)
        S[:N] = load
    return C, S


def assemble_B_L(
    geometry: CellGeometry,
    taus: np.ndarray,
    conditions: Sequence[Optional[BoundaryCondition]],
    sigma: complex,
    rho: float,
    impedance_speeds: Sequence[float],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns (B_e, L_e, G_e); G_e is the local trace load from inhomogeneous
    boundary data, zero on interior faces
    """
    N, dim = geometry.n_basis, geometry.dim
    n_trace = geometry.n_trace
    B = np.zeros((n_trace, geometry.n_local), dtype=np.complex128)
    L = np.zeros((n_trace, n_trace), dtype=np.complex128)
    G = np.zeros(n_trace, dtype=np.complex128)

    for tau, face, block, condition, speed in zip(
        taus, geometry.faces, geometry.trace_slices(), conditions, impedance_speeds
    ):
        if condition is not None and condition.is_dirichlet:
            L[block, block] = np.eye(face.n_trace)
            if condition.data is not None:
                values = condition.data(face.points, face.normal)
                G[block] = np.linalg.solve(face.F, face.xi.T @ (face.weights * values))
            continue

        B[block, :N] = tau * face.E.T
        for d in range(dim):
            B[block, (d + 1) * N:(d + 2) * N] = face.normal[d] * face.E.T

        if condition is None:
            L[block, block] = -tau * face.F
            continue

        coefficient = condition.impedance_coefficient(sigma, rho, speed)
        logger.debug(f"face {face.face}: {condition.kind.value} coefficient {coefficient:.6g}")
        L[block, block] = (coefficient - tau) * face.F
        if condition.data is not None:
            values = condition.data(face.points, face.normal)
            G[block] = face.xi.T @ (face.weights * values)

    return B, L, G


def factor_local(A: np.ndarray, cell: int, tau: float, sigma: complex, order: int):
    """Dense LU of A_e with singularity diagnostics"""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or pivots.min() <= LOCAL_PIVOT_TOLERANCE * max(pivots.max(), 1e-300):
        raise SingularCellError(
            f"local matrix of cell {cell} is singular",
            cell=cell, tau=tau, sigma=complex(sigma), order=order,
        )
    return lu, piv


@dataclass(eq=False)
class CellBlocks:
    cell: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    L: np.ndarray
    G: np.ndarray
    lu: tuple = field(repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve(self.lu, rhs, check_finite=False)

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        """A_e^-H rhs"""
        return lu_solve(self.lu, rhs, trans=2, check_finite=False)


def condense(blocks: CellBlocks, S: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """K_e = L_e - B_e A_e^-1 C_e and, given S_e, g_e = -B_e A_e^-1 S_e"""
    K = blocks.L - blocks.B @ blocks.solve(blocks.C)
    g = None if S is None else -blocks.B @ blocks.solve(S)
    return K, g


def assemble_global(discretization: Discretization, condensed: Sequence[np.ndarray]) -> sps.csc_matrix:
    """Sum of R_e^T K_e R_e; at most two cells touch an entry, so the result ignores cell order"""
    connectivity = discretization.connectivity
    rows, cols, values = [], [], []
    for cell, K in enumerate(condensed):
        dofs = connectivity.cell_dofs[cell]
        if K.shape != (len(dofs), len(dofs)):
            raise LayoutError(
                f"cell {cell}: condensed block {K.shape} does not match {len(dofs)} trace dofs", cell=cell
            )
        rows.append(np.repeat(dofs, len(dofs)))
        cols.append(np.tile(dofs, len(dofs)))
        values.append(K.ravel())

    n = connectivity.n_trace_dofs
    matrix = sps.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsc()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


# Assembled system

@dataclass(eq=False)
class FieldSolution:
    """Trace and volume coefficients for a batch of right-hand sides (one column per source)"""

    trace: np.ndarray             # (n_trace, n_rhs)
    volume: List[np.ndarray]      # per cell ((dim+1) N_e, n_rhs)
    sigma: complex
    source_ids: Tuple[int, ...]
    dim: int

    @property
    def n_rhs(self) -> int:
        return self.trace.shape[1]

    def pressure(self, cell: int) -> np.ndarray:
        n = self.volume[cell].shape[0] // (self.dim + 1)
        return self.volume[cell][:n]

    def velocity(self, cell: int, component: int) -> np.ndarray:
        n = self.volume[cell].shape[0] // (self.dim + 1)
        return self.volume[cell][(component + 1) * n:(component + 2) * n]


@dataclass(eq=False)
class HDGSystem:
    """Local blocks, global trace matrix and its factors for one (model, sigma)"""

    discretization: Discretization
    model_fingerprint: str
    model_order: int
    sigma: complex
    boundary: BoundarySpec
    tau: StabilizationTau
    blocks: List[CellBlocks]
    matrix: sps.csc_matrix
    boundary_load: np.ndarray
    factorization: Optional[Factorization] = None

    @property
    def n_trace_dofs(self) -> int:
        return self.matrix.shape[0]

    def geometry(self, cell: int) -> CellGeometry:
        return self.discretization.geometry(cell, self.model_order)

    def ensure_current(self, model: ModelState):
        if model.fingerprint != self.model_fingerprint:
            raise StaleFactorizationError(
                "model changed since the system was assembled; rebuild before solving",
                expected=self.model_fingerprint, got=model.fingerprint,
            )

    def factorize(self) -> Factorization:
        if self.factorization is None:
            logger.info(f"Factorizing global matrix: {self.n_trace_dofs} trace dofs, nnz {self.matrix.nnz}")
            self.factorization = factorize(self.matrix, key=f"{self.model_fingerprint}:{self.sigma}")
        return self.factorization

    def local_load(self, cell: int, loads: CellLoads, n_rhs: int) -> np.ndarray:
        geometry = self.geometry(cell)
        _, S = assemble_C_S(geometry, self.tau.for_cell(self.discretization.mesh, cell), loads.get(cell), n_rhs)
        if S.shape[1] != n_rhs:
            raise LayoutError(f"cell {cell}: load has {S.shape[1]} columns, expected {n_rhs}", cell=cell)
        return S

    def forward_rhs(self, loads: CellLoads, n_rhs: int) -> np.ndarray:
        """sum_e R_e^T g_e plus the boundary data load"""
        start_time = time.time()
        rhs = np.zeros((self.n_trace_dofs, n_rhs), dtype=np.complex128)
        rhs += self.boundary_load[:, None]
        connectivity = self.discretization.connectivity
        for cell in sorted(loads):
            _, g = condense(self.blocks[cell], self.local_load(cell, loads, n_rhs))
            connectivity.scatter(g, cell, rhs)
        duration = time.time() - start_time
        monitor.record_stage("forward rhs", duration)
        log_performance("forward rhs", duration, cells=len(loads), columns=n_rhs)
        return rhs


def build_system(
    discretization: Discretization,
    model: ModelState,
    sigma: complex,
    boundary: BoundarySpec,
    tau: Optional[StabilizationTau] = None,
) -> HDGSystem:
    """Local blocks for every cell, condensation and the global matrix (not yet factorized)"""
    mesh = discretization.mesh
    if model.n_cells != mesh.n_cells:
        raise LayoutError(f"model covers {model.n_cells} cells, mesh has {mesh.n_cells}")
    tau = tau or StabilizationTau.from_density(mesh, model.density)
    sigma = complex(sigma)
    start_time = time.time()

    def local(cell: int) -> Tuple[CellBlocks, np.ndarray]:
        geometry = discretization.geometry(cell, model.order)
        taus = tau.for_cell(mesh, cell)
        rho = float(model.density[cell])
        speed = geometry.model_phi @ model.wave_speed[cell]
        kappa_inv = 1.0 / (rho * speed * speed)
        faces = mesh.cell_faces[cell]

        A = assemble_A(geometry, kappa_inv, rho, sigma, taus)
        C, _ = assemble_C_S(geometry, taus)
        B, L, G = assemble_B_L(
            geometry, taus, [boundary.condition(f) for f in faces], sigma, rho, boundary.impedance_speed[faces]
        )
        lu = factor_local(A, cell, float(taus.min()), sigma, geometry.order)
        blocks = CellBlocks(cell=cell, A=A, B=B, C=C, L=L, G=G, lu=lu)
        K, _ = condense(blocks)
        return blocks, K

    results = map_ordered(local, range(mesh.n_cells))
    blocks = [result[0] for result in results]
    matrix = assemble_global(discretization, [result[1] for result in results])

    boundary_load = np.zeros(discretization.n_trace_dofs, dtype=np.complex128)
    for cell_blocks in blocks:
        if np.any(cell_blocks.G):
            discretization.connectivity.scatter(cell_blocks.G, cell_blocks.cell, boundary_load)

    duration = time.time() - start_time
    monitor.record_stage("global matrix", duration)
    log_performance(
        "global matrix", duration, cells=mesh.n_cells, trace_dofs=matrix.shape[0], nnz=matrix.nnz
    )
    return HDGSystem(
        discretization=discretization,
        model_fingerprint=model.fingerprint,
        model_order=model.order,
        sigma=sigma,
        boundary=boundary,
        tau=tau,
        blocks=blocks,
        matrix=matrix,
        boundary_load=boundary_load,
    )


def reconstruct(
    system: HDGSystem,
    trace: np.ndarray,
    loads: Optional[CellLoads] = None,
    source_ids: Optional[Sequence[int]] = None,
    model: Optional[ModelState] = None,
) -> FieldSolution:
    """U_e = A_e^-1 (S_e - C_e R_e Lambda), independently per cell"""
    if model is not None:
        system.ensure_current(model)
    trace = np.asarray(trace, dtype=np.complex128)
    if trace.ndim == 1:
        trace = trace[:, None]
    if trace.shape[0] != system.n_trace_dofs:
        raise LayoutError(f"trace vector has {trace.shape[0]} entries, system has {system.n_trace_dofs}")
    loads = loads or {}
    n_rhs = trace.shape[1]
    connectivity = system.discretization.connectivity
    start_time = time.time()

    def local(cell: int) -> np.ndarray:
        blocks = system.blocks[cell]
        if n_rhs == 0:
            return np.zeros((blocks.A.shape[0], 0), dtype=np.complex128)
        rhs = -blocks.C @ connectivity.select(trace, cell)
        if cell in loads:
            rhs = rhs + system.local_load(cell, loads, n_rhs)
        return blocks.solve(rhs)

    volume = map_ordered(local, range(len(system.blocks)))
    duration = time.time() - start_time
    monitor.record_stage("local solves", duration)
    log_performance("local solves", duration, cells=len(volume), columns=n_rhs)

    return FieldSolution(
        trace=trace,
        volume=volume,
        sigma=system.sigma,
        source_ids=tuple(source_ids) if source_ids is not None else tuple(range(n_rhs)),
        dim=system.discretization.mesh.dim,
    )


def solve_system(
    system: HDGSystem, loads: CellLoads, n_rhs: int, source_ids: Optional[Sequence[int]] = None
) -> FieldSolution:
    """Factorize (once), solve the trace system for every column and reconstruct"""
    factorization = system.factorize()
    rhs = system.forward_rhs(loads, n_rhs)
    trace = solve_many(factorization, rhs)
    return reconstruct(system, trace, loads, source_ids)


def face_fluxes(system: HDGSystem, solution: FieldSolution) -> Dict[int, List[np.ndarray]]:
    """Normal flux moments (v_hat . n, xi_k)_F of every side of every face"""
    connectivity = system.discretization.connectivity
    fluxes: Dict[int, List[np.ndarray]] = {}
    for cell, blocks in enumerate(system.blocks):
        local = blocks.B @ solution.volume[cell] + blocks.L @ connectivity.select(solution.trace, cell)
        geometry = system.geometry(cell)
        for face, block in zip(geometry.faces, geometry.trace_slices()):
            fluxes.setdefault(face.face, []).append(local[block])
    return fluxes


def flux_residuals(system: HDGSystem, solution: FieldSolution) -> np.ndarray:
    """
    Relative jump of the numerical flux on each interior face (mesh.interior_faces order):
    |sum of both sides| / max side magnitude
    """
    fluxes = face_fluxes(system, solution)
    interior = system.discretization.mesh.interior_faces
    residuals = np.empty(len(interior))
    for k, face in enumerate(interior):
        sides = fluxes[int(face)]
        jump = np.linalg.norm(sides[0] + sides[1])
        scale = max(np.linalg.norm(side) for side in sides)
        residuals[k] = 0.0 if jump == 0 else jump / scale if scale > 0 else np.inf
    return residuals
