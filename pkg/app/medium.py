"""
Medium parameters: wave speed and density per cell
Wave speed is a piecewise polynomial of order r (nodal coefficients on the
order-r lattice of each cell); density is piecewise constant
"""

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .basis import dof_count, lagrange_basis
from .errors import InvalidModelError
from .logger import get_logger
from .mesh import SimplicialMesh

logger = get_logger("medium")

DEFAULT_BOUNDS = (1.0, 1.0e5)


@dataclass(frozen=True, eq=False)
class ModelState:
    wave_speed: np.ndarray          # (N, dof_count(order, dim)) in m/s
    density: np.ndarray             # (N,) in kg/m^3, never touched by the inversion
    order: int = 0
    bounds: Tuple[float, float] = DEFAULT_BOUNDS
    dim: int = 2

    def __post_init__(self):
        wave_speed = np.array(self.wave_speed, dtype=float, ndmin=2)
        density = np.array(self.density, dtype=float).reshape(-1)
        expected = dof_count(self.order, self.dim)
        if wave_speed.shape[1] != expected:
            raise ValueError(f"order {self.order} model needs {expected} coefficients per cell")
        if len(density) != len(wave_speed):
            raise ValueError("wave speed and density must cover the same cells")
        if np.any(density <= 0):
            raise ValueError("density must be positive")
        bad = ~np.isfinite(wave_speed) | (wave_speed <= 0)
        if np.any(bad):
            cell = int(np.argwhere(bad)[0, 0])
            raise InvalidModelError(
                f"wave speed must be positive and finite; cell {cell} has {wave_speed[cell].min():g}",
                cell=cell, wave_speed=float(wave_speed[cell].min()),
            )
        wave_speed.flags.writeable = False
        density.flags.writeable = False
        object.__setattr__(self, "wave_speed", wave_speed)
        object.__setattr__(self, "density", density)

    @property
    def n_cells(self) -> int:
        return len(self.wave_speed)

    @property
    def n_model_dofs(self) -> int:
        return self.wave_speed.size

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(self.wave_speed).tobytes())
        digest.update(np.ascontiguousarray(self.density).tobytes())
        digest.update(f"{self.order}:{self.dim}".encode())
        return digest.hexdigest()

    def vector(self) -> np.ndarray:
        return self.wave_speed.reshape(-1).copy()

    def with_vector(self, values: np.ndarray) -> "ModelState":
        return replace(self, wave_speed=np.asarray(values, dtype=float).reshape(self.wave_speed.shape))

    def check_bounds(self) -> "ModelState":
        """Raise when any coefficient lies outside [c_min, c_max]"""
        low, high = self.bounds
        outside = (self.wave_speed < low) | (self.wave_speed > high)
        if np.any(outside):
            cell = int(np.argwhere(outside)[0, 0])
            raise InvalidModelError(
                f"wave speed of cell {cell} leaves the bounds [{low:g}, {high:g}]",
                cell=cell, wave_speed=float(self.wave_speed[cell][outside[cell]][0]), bounds=f"{low:g},{high:g}",
            )
        return self

    def project(self, values: np.ndarray) -> np.ndarray:
        """Clip a coefficient vector to the box bounds"""
        return np.clip(values, self.bounds[0], self.bounds[1])

    def wave_speed_at(self, cell: int, reference_points: np.ndarray) -> np.ndarray:
        basis = lagrange_basis(self.order, self.dim)
        return basis.values(reference_points) @ self.wave_speed[cell]

    def cell_mean_wave_speed(self) -> np.ndarray:
        return self.wave_speed.mean(axis=1)

    def kappa_inv_at(self, cell: int, reference_points: np.ndarray) -> np.ndarray:
        """kappa^-1 = 1 / (rho c^2)"""
        c = self.wave_speed_at(cell, reference_points)
        return 1.0 / (self.density[cell] * c * c)


def model_nodes(mesh: SimplicialMesh, order: int) -> np.ndarray:
    """(N, n_model_dof, dim) physical positions of the model coefficients"""
    nodes = lagrange_basis(order, mesh.dim).nodes
    return np.stack([mesh.to_physical(cell, nodes) for cell in range(mesh.n_cells)])


def model_from_function(
    mesh: SimplicialMesh,
    wave_speed: Callable[[np.ndarray], np.ndarray],
    density: float = 1.0,
    order: int = 0,
    bounds: Tuple[float, float] = DEFAULT_BOUNDS,
) -> ModelState:
    nodes = model_nodes(mesh, order)
    values = np.asarray(wave_speed(nodes.reshape(-1, mesh.dim)), dtype=float).reshape(nodes.shape[:2])
    return ModelState(
        wave_speed=values,
        density=np.full(mesh.n_cells, float(density)),
        order=order,
        bounds=bounds,
        dim=mesh.dim,
    )


def constant_model(mesh: SimplicialMesh, wave_speed: float, density: float = 1.0, order: int = 0,
                   bounds: Tuple[float, float] = DEFAULT_BOUNDS) -> ModelState:
    return model_from_function(mesh, lambda x: np.full(len(x), float(wave_speed)), density, order, bounds)


def inclusion_field(background: float, inclusions: Sequence[dict], gradient: Optional[Sequence[float]] = None):
    """
    Wave-speed function: background (+ linear gradient along each axis) with
    round inclusions given as {"center": [...], "radius": r, "wave_speed": c}
    """
    def field(points: np.ndarray) -> np.ndarray:
        values = np.full(len(points), float(background))
        if gradient is not None:
            values = values + points @ np.asarray(gradient, dtype=float)
        for inclusion in inclusions:
            center = np.asarray(inclusion["center"], dtype=float)
            inside = np.linalg.norm(points - center, axis=1) <= float(inclusion["radius"])
            values[inside] = float(inclusion["wave_speed"])
        return values

    return field


def transfer_model(model: ModelState, source: SimplicialMesh, target: SimplicialMesh) -> ModelState:
    """
    Nearest-cell-centroid transfer: each target cell reads the polynomial of the
    source cell whose centroid is closest to its own
    """
    tree = cKDTree(source.centroids)
    _, nearest = tree.query(target.centroids)
    nodes = model_nodes(target, model.order)

    values = np.empty((target.n_cells, dof_count(model.order, target.dim)))
    density = np.empty(target.n_cells)
    for cell, donor in enumerate(nearest):
        reference = source.to_reference(int(donor), nodes[cell])
        values[cell] = model.wave_speed_at(int(donor), reference)
        density[cell] = model.density[donor]

    logger.info(f"Transferred model from {source.n_cells} to {target.n_cells} cells")
    return ModelState(
        wave_speed=model.project(values),
        density=density,
        order=model.order,
        bounds=model.bounds,
        dim=target.dim,
    )
