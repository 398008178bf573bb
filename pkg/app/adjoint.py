"""
Adjoint-state gradient of the least-squares misfit

For residuals r = RU - d the adjoint states solve
    A_e^H g1_e + B_e^H R_e g2 = -[R^* r]_e              (every cell)
    sum_e R_e^T (C_e^H g1_e + L_e^H R_e g2) = 0
Eliminating g1 gives the conjugate-transpose trace system, which reuses
the forward factors. Only A_e depends on the medium, so
    dJ/dm = Re sum_e <(dA_e/dm) U_e, g1_e>.
"""

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
import scipy.sparse as sps

from .errors import LayoutError, UnsupportedParameterError
from .forward_solver import RestrictionOperator
from .hdg import CellGeometry, FieldSolution, HDGSystem, assemble_global
from .logger import get_logger, log_performance
from .medium import ModelState
from .monitoring import monitor
from .sparse_direct import solve_adjoint
from .workers import map_ordered

logger = get_logger("adjoint")


@dataclass(eq=False)
class AdjointSolution:
    trace: np.ndarray           # g2, (n_trace, n_rhs)
    volume: List[np.ndarray]    # g1_e per cell, ((dim+1) N_e, n_rhs)
    residuals: np.ndarray       # (n_receivers, n_rhs)


@dataclass(frozen=True, eq=False)
class GradientVector:
    values: np.ndarray          # (N, n_model_dof), real
    parameter: str

    def vector(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "GradientVector") -> "GradientVector":
        if other.parameter != self.parameter:
            raise UnsupportedParameterError(f"cannot add {other.parameter} gradient to {self.parameter} gradient")
        return GradientVector(values=self.values + other.values, parameter=self.parameter)


# Parameterizations: derivative of kappa^-1 at the cell quadrature points with
# respect to each model coefficient of the cell, shape (nq, n_model_dof)

Derivative = Callable[[ModelState, int, CellGeometry], np.ndarray]


def _wave_speed_derivative(model: ModelState, cell: int, geometry: CellGeometry) -> np.ndarray:
    speed = geometry.model_phi @ model.wave_speed[cell]
    factor = -2.0 / (model.density[cell] * speed ** 3)
    return factor[:, None] * geometry.model_phi


def _kappa_inv_derivative(model: ModelState, cell: int, geometry: CellGeometry) -> np.ndarray:
    if model.order != 0:
        raise UnsupportedParameterError(
            "kappa_inv gradients need a piecewise-constant model", model_order=model.order
        )
    return np.ones((len(geometry.weights), 1))


PARAMETERIZATIONS: Dict[str, Derivative] = {
    "wave_speed": _wave_speed_derivative,
    "kappa_inv": _kappa_inv_derivative,
}


def parameter_derivative(parameter: str) -> Derivative:
    try:
        return PARAMETERIZATIONS[parameter]
    except KeyError:
        raise UnsupportedParameterError(
            f"no derivative of A_e registered for parameter {parameter!r}", parameter=parameter
        ) from None


def build_adjoint_rhs(
    system: HDGSystem, residuals: np.ndarray, restriction: RestrictionOperator
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """
    Trace rhs sum_e R_e^T C_e^H A_e^-H [R^* r]_e and the local sources [R^* r]_e
    """
    start_time = time.time()
    residuals = np.asarray(residuals, dtype=np.complex128)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    local_sources = restriction.adjoint(residuals, system.discretization)

    connectivity = system.discretization.connectivity
    rhs = np.zeros((system.n_trace_dofs, residuals.shape[1]), dtype=np.complex128)
    for cell in sorted(local_sources):
        blocks = system.blocks[cell]
        contribution = blocks.C.conj().T @ blocks.solve_adjoint(local_sources[cell])
        connectivity.scatter(contribution, cell, rhs)

    duration = time.time() - start_time
    monitor.record_stage("adjoint rhs", duration)
    log_performance("adjoint rhs", duration, cells=len(local_sources), columns=residuals.shape[1])
    return rhs, local_sources


def solve_adjoint_states(
    system: HDGSystem,
    rhs: np.ndarray,
    local_sources: Dict[int, np.ndarray],
    residuals: np.ndarray,
) -> AdjointSolution:
    """Conjugate-transpose trace solve with the forward factors, then the local adjoint systems"""
    if system.factorization is None:
        raise LayoutError("adjoint solve needs the factorized forward system")
    residuals = np.asarray(residuals, dtype=np.complex128)
    if residuals.ndim == 1:
        residuals = residuals[:, None]

    trace = solve_adjoint(system.factorization, rhs)
    if trace.ndim == 1:
        trace = trace[:, None]
    connectivity = system.discretization.connectivity
    start_time = time.time()

    def local(cell: int) -> np.ndarray:
        blocks = system.blocks[cell]
        source = blocks.B.conj().T @ connectivity.select(trace, cell)
        if cell in local_sources:
            source = source + local_sources[cell]
        return -blocks.solve_adjoint(source)

    volume = map_ordered(local, range(len(system.blocks)))
    duration = time.time() - start_time
    monitor.record_stage("adjoint local solves", duration)
    log_performance("adjoint local solves", duration, cells=len(volume), columns=trace.shape[1])
    return AdjointSolution(trace=trace, volume=volume, residuals=residuals)


def gradient(
    system: HDGSystem,
    model: ModelState,
    forward: FieldSolution,
    adjoint: AdjointSolution,
    parameter: str = "wave_speed",
) -> GradientVector:
    """
    Re sum over sources of <(dA_e/dm) U_e, g1_e>; dA_e/dm only touches the
    pressure-pressure block -sigma (dkappa^-1/dm phi_i, phi_j)_K
    """
    system.ensure_current(model)
    derivative = parameter_derivative(parameter)
    sigma = system.sigma
    if forward.n_rhs != adjoint.trace.shape[1]:
        raise LayoutError(f"{forward.n_rhs} forward columns against {adjoint.trace.shape[1]} adjoint columns")

    def local(cell: int) -> np.ndarray:
        geometry = system.geometry(cell)
        n = geometry.n_basis
        p = geometry.phi @ forward.volume[cell][:n]            # (nq, n_rhs)
        g = geometry.phi @ adjoint.volume[cell][:n]
        weighted = (np.conj(g) * p).sum(axis=1) * geometry.weights
        return np.real(-sigma * (derivative(model, cell, geometry).T @ weighted))

    values = np.array(map_ordered(local, range(model.n_cells)))
    return GradientVector(values=values.reshape(model.wave_speed.shape[0], -1), parameter=parameter)


def adjoint_matrix(system: HDGSystem) -> sps.csc_matrix:
    """Explicit sum_e R_e^T (L_e^H - C_e^H A_e^-H B_e^H) R_e, for checking against the forward matrix"""
    blocks = [
        b.L.conj().T - b.C.conj().T @ b.solve_adjoint(b.B.conj().T) for b in system.blocks
    ]
    return assemble_global(system.discretization, blocks)


def pseudo_hessian(
    system: HDGSystem,
    model: ModelState,
    forward: FieldSolution,
    parameter: str = "wave_speed",
) -> GradientVector:
    """
    Diagonal |sigma|^2 sum over sources of ((dkappa^-1/dm_k)^2, |p|^2)_K per
    model coefficient, i.e. the Jacobian's diagonal with the receiver
    restriction replaced by the identity
    """
    system.ensure_current(model)
    derivative = parameter_derivative(parameter)
    scale = abs(system.sigma) ** 2

    def local(cell: int) -> np.ndarray:
        geometry = system.geometry(cell)
        p = geometry.phi @ forward.volume[cell][:geometry.n_basis]
        energy = (np.abs(p) ** 2).sum(axis=1) * geometry.weights
        return scale * (derivative(model, cell, geometry) ** 2).T @ energy

    values = np.array(map_ordered(local, range(model.n_cells)))
    return GradientVector(values=values.reshape(model.wave_speed.shape[0], -1), parameter=parameter)


def diagonal_scaling(hessian: np.ndarray, damping: float) -> np.ndarray:
    """1 / (H + damping max H); ones when H vanishes"""
    hessian = np.asarray(hessian, dtype=float)
    largest = float(np.max(hessian)) if hessian.size else 0.0
    if not largest > 0.0:
        return np.ones_like(hessian)
    return 1.0 / (hessian + damping * largest)
