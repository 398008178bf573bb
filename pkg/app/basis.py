"""
Nodal Lagrange bases and quadrature on reference simplexes

Reference simplex: vertices at the origin and the unit points e_1 .. e_dim.
Faces use the reference simplex of one dimension lower (segment in 2D,
triangle in 3D) mapped through the face's sorted vertex order.
"""

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .cache import basis_cache, cached, quadrature_cache
from .config import settings
from .errors import QuadratureUnavailableError, UnsupportedOrderError
from .logger import get_logger
from .mesh import SimplicialMesh

logger = get_logger("basis")

REFERENCE_MEASURE = {1: 1.0, 2: 0.5, 3: 1.0 / 6.0}


def dof_count(order: int, dim: int) -> int:
    """Dimension of P_p on a dim-simplex: (p+1)(p+2)/2 in 2D, (p+1)(p+2)(p+3)/6 in 3D"""
    if order < 0:
        raise ValueError(f"polynomial order must be nonnegative, got {order}")
    return math.comb(order + dim, dim)


def _exponents(order: int, dim: int) -> np.ndarray:
    """Monomial exponents with total degree <= order, graded"""
    rows = []
    for total in range(order + 1):
        if dim == 1:
            rows.append((total,))
        elif dim == 2:
            rows.extend((total - j, j) for j in range(total + 1))
        else:
            for k in range(total + 1):
                rows.extend((total - k - j, j, k) for j in range(total - k + 1))
    return np.array(rows, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class LagrangeBasis:
    """Nodal basis of P_p on the reference dim-simplex, equispaced lattice nodes"""

    order: int
    dim: int
    nodes: np.ndarray         # (N, dim)
    exponents: np.ndarray     # (N, dim)
    coefficients: np.ndarray  # (N, N): phi_i = sum_m mono_m * coefficients[m, i]

    @property
    def size(self) -> int:
        return len(self.nodes)

    def _monomials(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.prod(points[:, None, :] ** self.exponents[None, :, :], axis=2)

    def values(self, points: np.ndarray) -> np.ndarray:
        """(n_points, N) basis values at reference points"""
        return self._monomials(points) @ self.coefficients

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """(n_points, N, dim) reference gradients"""
        points = np.atleast_2d(points)
        out = np.empty((len(points), self.size, self.dim))
        for d in range(self.dim):
            lowered = self.exponents.copy()
            factor = lowered[:, d].astype(float)
            lowered[:, d] = np.maximum(lowered[:, d] - 1, 0)
            monomials = np.prod(points[:, None, :] ** lowered[None, :, :], axis=2) * factor
            out[:, :, d] = monomials @ self.coefficients
        return out


@cached(cache_instance=basis_cache)
def lagrange_basis(order: int, dim: int) -> LagrangeBasis:
    if order > settings.BASIS_MAX_ORDER:
        raise UnsupportedOrderError(
            f"basis order {order} above supported maximum {settings.BASIS_MAX_ORDER}", order=order
        )
    exponents = _exponents(order, dim)
    nodes = exponents / order if order > 0 else np.full((1, dim), 1.0 / (dim + 1))

    vandermonde = np.prod(nodes[:, None, :] ** exponents[None, :, :], axis=2)
    coefficients = np.linalg.inv(vandermonde)
    logger.debug(f"Lagrange basis order={order} dim={dim} cond(V)={np.linalg.cond(vandermonde):.2e}")

    return LagrangeBasis(order=order, dim=dim, nodes=nodes, exponents=exponents, coefficients=coefficients)


def cell_basis(order: int, dim: int) -> LagrangeBasis:
    return lagrange_basis(order, dim)


def face_basis(order: int, dim: int) -> LagrangeBasis:
    """Trace basis on a face of a dim-dimensional mesh"""
    return lagrange_basis(order, dim - 1)


# Quadrature

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray   # (n, simplex_dim)
    weights: np.ndarray  # (n,), sum to the reference measure
    degree: int          # exact for every polynomial of total degree <= degree
    simplex_dim: int


def quadrature_for(degree: int, domain: str, dim: int) -> QuadratureRule:
    """
    Rule exact to `degree` on the reference cell (domain="cell") or reference face
    (domain="face") of a dim-dimensional mesh
    """
    if domain not in ("cell", "face"):
        raise ValueError(f"domain must be 'cell' or 'face', got {domain!r}")
    simplex_dim = dim if domain == "cell" else dim - 1
    return simplex_quadrature(int(degree), simplex_dim)


@cached(cache_instance=quadrature_cache)
def simplex_quadrature(degree: int, simplex_dim: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi rule on the reference simplex"""
    if degree < 0 or degree > settings.QUADRATURE_MAX_DEGREE:
        raise QuadratureUnavailableError(
            f"quadrature degree {degree} outside supported range [0, {settings.QUADRATURE_MAX_DEGREE}]",
            degree=degree,
        )
    n = max(1, math.ceil((degree + 1) / 2))

    a, wa = special.roots_legendre(n)
    if simplex_dim == 1:
        points = ((1 + a) / 2)[:, None]
        weights = wa / 2
    elif simplex_dim == 2:
        b, wb = special.roots_jacobi(n, 1.0, 0.0)
        A, B = np.meshgrid(a, b, indexing="ij")
        WA, WB = np.meshgrid(wa, wb, indexing="ij")
        x = (1 + A) * (1 - B) / 4
        y = (1 + B) / 2
        points = np.stack([x.ravel(), y.ravel()], axis=1)
        weights = (WA * WB).ravel() / 8
    elif simplex_dim == 3:
        b, wb = special.roots_jacobi(n, 1.0, 0.0)
        c, wc = special.roots_jacobi(n, 2.0, 0.0)
        A, B, C = np.meshgrid(a, b, c, indexing="ij")
        WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
        x = (1 + A) * (1 - B) * (1 - C) / 8
        y = (1 + B) * (1 - C) / 4
        z = (1 + C) / 2
        points = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        weights = (WA * WB * WC).ravel() / 64
    else:
        raise QuadratureUnavailableError(f"no simplex rule in dimension {simplex_dim}")

    return QuadratureRule(points=points, weights=weights, degree=degree, simplex_dim=simplex_dim)


def cell_quadrature_degree(order: int, model_order: int = 0) -> int:
    """2p+1 for the bilinear forms, raised to 2p+r for a model of order r"""
    return 2 * order + max(1, model_order) + settings.QUADRATURE_EXTRA


# p-adaptivity

def face_orders(mesh: SimplicialMesh, orders: np.ndarray) -> np.ndarray:
    """Interior faces take the max of their two cells, boundary faces their only cell"""
    orders = np.asarray(orders, dtype=np.int64)
    owner, neighbor = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    result = orders[owner].copy()
    interior = neighbor >= 0
    result[interior] = np.maximum(result[interior], orders[neighbor[interior]])
    return result


def count_trace_dofs(mesh: SimplicialMesh, orders: Union[int, np.ndarray]) -> int:
    """Dimension of the global trace system"""
    orders = _per_cell(mesh, orders)
    return int(sum(dof_count(int(q), mesh.dim - 1) for q in face_orders(mesh, orders)))


def count_volume_dofs(mesh: SimplicialMesh, orders: Union[int, np.ndarray]) -> int:
    """Volume dof per scalar unknown (multiply by dim+1 for pressure and velocity)"""
    orders = _per_cell(mesh, orders)
    return int(sum(dof_count(int(p), mesh.dim) for p in orders))


def assign_orders(
    mesh: SimplicialMesh,
    wave_speed: Union[float, np.ndarray],
    frequency: float,
    dofs_per_wavelength: float,
    p_min: int = None,
    p_max: int = None,
) -> np.ndarray:
    """
    Per-cell order from the local wavelength: the smallest p with
    (p+1) * wavelength / h >= dofs_per_wavelength, clamped to [p_min, p_max]
    """
    p_min = settings.P_MIN if p_min is None else p_min
    p_max = settings.P_MAX if p_max is None else p_max
    wave_speed = np.broadcast_to(np.asarray(wave_speed, dtype=float), (mesh.n_cells,))

    if np.any(wave_speed <= 0) or frequency <= 0:
        raise ValueError("wave speed and frequency must be positive")

    wavelength = wave_speed / frequency
    required = np.ceil(dofs_per_wavelength * mesh.diameters / wavelength - 1e-12).astype(np.int64) - 1
    orders = np.clip(required, p_min, p_max)

    clamped = int(np.count_nonzero(required > p_max))
    if clamped:
        logger.warning(
            f"{clamped} cells need order above p_max={p_max} for {dofs_per_wavelength} dof per wavelength; clamped"
        )
    return orders


def _per_cell(mesh: SimplicialMesh, orders) -> np.ndarray:
    return np.broadcast_to(np.asarray(orders, dtype=np.int64), (mesh.n_cells,))
