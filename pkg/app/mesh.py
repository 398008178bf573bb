"""
Simplicial meshes
Triangles (2D) and tetrahedra (3D): face enumeration, interior/boundary
classification, outward normals and the cell-to-trace connectivity map
"""

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DanglingVertexError,
    DegenerateExtentError,
    InvertedCellError,
    LayoutError,
    MeshParseError,
    NonManifoldMeshError,
    PointLocationError,
)
from .config import settings
from .logger import get_logger

logger = get_logger("mesh")

# Side names of the bounding box, per axis (low, high); the last axis points up
_SIDE_NAMES = {
    2: (("left", "right"), ("bottom", "top")),
    3: (("left", "right"), ("front", "back"), ("bottom", "top")),
}
SURFACE_TAG = "top"
INTERIOR_TAG = ""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Immutable simplicial mesh; build it with from_arrays / build_structured_mesh / import_mesh"""

    vertices: np.ndarray      # (n_vertices, dim)
    cells: np.ndarray         # (N, dim + 1), positively oriented
    faces: np.ndarray         # (N_sigma, dim), sorted vertex keys, lexicographic order
    face_cells: np.ndarray    # (N_sigma, 2) owner (lower cell id) and neighbor, -1 on the boundary
    face_local: np.ndarray    # (N_sigma, 2) local face index inside owner / neighbor
    cell_faces: np.ndarray    # (N, dim + 1) global face opposite local vertex i
    cell_normals: np.ndarray  # (N, dim + 1, dim) outward unit normals
    face_measures: np.ndarray # (N_sigma,)
    face_tags: Tuple[str, ...]
    jacobians: np.ndarray = field(repr=False)       # (N, dim, dim), columns v_k - v_0
    inverse_jacobians: np.ndarray = field(repr=False)
    volumes: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, cells, tag_boundary: bool = True) -> "SimplicialMesh":
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)

        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshParseError(f"vertices must be (n, 2) or (n, 3), got {vertices.shape}")
        dim = vertices.shape[1]
        if cells.ndim != 2 or cells.shape[1] != dim + 1:
            raise MeshParseError(f"cells must be (N, {dim + 1}), got {cells.shape}")
        if len(cells) == 0:
            raise MeshParseError("mesh has no cells")
        if cells.min() < 0 or cells.max() >= len(vertices):
            bad = int(np.flatnonzero((cells < 0).any(axis=1) | (cells >= len(vertices)).any(axis=1))[0])
            raise DanglingVertexError(
                f"dangling vertex: cell {bad} references a vertex outside the table",
                cell=bad, n_vertices=len(vertices),
            )

        cells = _orient_cells(vertices, cells)
        jacobians = _jacobians(vertices, cells)
        dets = np.linalg.det(jacobians)
        volumes = dets / math.factorial(dim)

        faces, face_cells, face_local, cell_faces = _enumerate_faces(cells)
        cell_normals = _outward_normals(vertices, cells)
        face_measures = _face_measures(vertices, faces)
        tags = _tag_faces(vertices, faces, face_cells) if tag_boundary else tuple(
            INTERIOR_TAG if neighbor >= 0 else "boundary" for neighbor in face_cells[:, 1]
        )

        unused = len(vertices) - len(np.unique(cells))
        if unused:
            logger.warning(f"{unused} vertices are not referenced by any cell")

        return cls(
            vertices=_frozen(vertices),
            cells=_frozen(cells),
            faces=_frozen(faces),
            face_cells=_frozen(face_cells),
            face_local=_frozen(face_local),
            cell_faces=_frozen(cell_faces),
            cell_normals=_frozen(cell_normals),
            face_measures=_frozen(face_measures),
            face_tags=tags,
            jacobians=_frozen(jacobians),
            inverse_jacobians=_frozen(np.linalg.inv(jacobians)),
            volumes=_frozen(volumes),
        )

    # Counts

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def faces_per_cell(self) -> int:
        return self.dim + 1

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @property
    def n_interior(self) -> int:
        return len(self.interior_faces)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_faces)

    # Geometry

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @property
    def diameters(self) -> np.ndarray:
        """Longest edge per cell"""
        points = self.vertices[self.cells]
        longest = np.zeros(self.n_cells)
        for a, b in itertools.combinations(range(self.dim + 1), 2):
            longest = np.maximum(longest, np.linalg.norm(points[:, a] - points[:, b], axis=1))
        return longest

    def face_normal(self, face: int, side: int = 0) -> np.ndarray:
        """Unit normal of a face, outward of the owner (side 0) or of the neighbor (side 1)"""
        cell = self.face_cells[face, side]
        if cell < 0:
            raise LayoutError(f"face {face} has no side {side}", face=face)
        return self.cell_normals[cell, self.face_local[face, side]]

    def to_physical(self, cell: int, reference_points: np.ndarray) -> np.ndarray:
        reference_points = np.atleast_2d(reference_points)
        return self.vertices[self.cells[cell, 0]] + reference_points @ self.jacobians[cell].T

    def to_reference(self, cell: int, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return (points - self.vertices[self.cells[cell, 0]]) @ self.inverse_jacobians[cell].T

    def face_points(self, face: int, face_reference_points: np.ndarray) -> np.ndarray:
        """Map points of the reference face through the canonical (sorted) vertex order"""
        corners = self.vertices[self.faces[face]]
        face_reference_points = np.atleast_2d(face_reference_points)
        return corners[0] + face_reference_points @ (corners[1:] - corners[0])

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Containing cell and reference coordinates for each point.
        Points on shared faces go to the lowest cell id.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        origins = self.vertices[self.cells[:, 0]]
        cell_ids = np.empty(len(points), dtype=np.int64)
        reference = np.empty_like(points)

        for k, point in enumerate(points):
            xi = np.einsum("eij,ej->ei", self.inverse_jacobians, point - origins)
            barycentric_min = np.minimum(1.0 - xi.sum(axis=1), xi.min(axis=1))
            inside = np.flatnonzero(barycentric_min >= -settings.LOCATE_TOLERANCE)
            if len(inside) == 0:
                raise PointLocationError(f"point {point.tolist()} lies outside the mesh", point=str(point.tolist()))
            cell_ids[k] = inside[0]
            reference[k] = xi[inside[0]]

        return cell_ids, reference

    def summary(self) -> dict:
        return {
            "dim": self.dim,
            "cells": self.n_cells,
            "vertices": len(self.vertices),
            "faces": self.n_faces,
            "interior_faces": self.n_interior,
            "boundary_faces": self.n_boundary,
            "tags": sorted(set(tag for tag in self.face_tags if tag)),
        }


@dataclass(frozen=True, eq=False)
class ConnectivityMap:
    """
    R_e for every cell: the global trace dof of its faces, in local face order.
    select() is R_e, scatter() is R_e transpose.
    """

    face_offsets: np.ndarray          # (N_sigma + 1,)
    cell_face_ranges: np.ndarray      # (N, n_face, 2) [start, stop) per local face
    cell_dofs: Tuple[np.ndarray, ...]

    @property
    def n_trace_dofs(self) -> int:
        return int(self.face_offsets[-1])

    def face_dofs(self, face: int) -> np.ndarray:
        return np.arange(self.face_offsets[face], self.face_offsets[face + 1])

    def local_slices(self, cell: int) -> List[slice]:
        """Slices of the local trace vector belonging to each local face"""
        sizes = self.cell_face_ranges[cell, :, 1] - self.cell_face_ranges[cell, :, 0]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(int(starts[i]), int(starts[i + 1])) for i in range(len(sizes))]

    def select(self, trace: np.ndarray, cell: int) -> np.ndarray:
        return trace[self.cell_dofs[cell]]

    def scatter(self, local: np.ndarray, cell: int, out: np.ndarray) -> np.ndarray:
        dofs = self.cell_dofs[cell]
        if local.shape[0] != len(dofs):
            raise LayoutError(
                f"cell {cell}: local trace block has {local.shape[0]} rows, layout expects {len(dofs)}",
                cell=cell,
            )
        np.add.at(out, dofs, local)
        return out


def build_faces_and_connectivity(
    mesh: SimplicialMesh, face_dof_counts: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, ConnectivityMap]:
    """
    Face list and connectivity map for a given per-face dof count
    (one dof per face when no count is given, i.e. order 0 traces)
    """
    if face_dof_counts is None:
        face_dof_counts = np.ones(mesh.n_faces, dtype=np.int64)
    face_dof_counts = np.asarray(face_dof_counts, dtype=np.int64)
    if face_dof_counts.shape != (mesh.n_faces,):
        raise LayoutError(
            f"expected {mesh.n_faces} face dof counts, got {face_dof_counts.shape}",
        )

    face_offsets = np.concatenate([[0], np.cumsum(face_dof_counts)])
    starts = face_offsets[mesh.cell_faces]
    stops = face_offsets[mesh.cell_faces + 1]
    ranges = np.stack([starts, stops], axis=-1)
    cell_dofs = tuple(
        _frozen(np.concatenate([np.arange(a, b) for a, b in ranges[cell]]))
        for cell in range(mesh.n_cells)
    )

    connectivity = ConnectivityMap(
        face_offsets=_frozen(face_offsets),
        cell_face_ranges=_frozen(ranges),
        cell_dofs=cell_dofs,
    )
    return mesh.faces, connectivity


def build_structured_mesh(extent: Sequence[Sequence[float]], cells_per_axis: Sequence[int]) -> SimplicialMesh:
    """
    Box split into simplexes: 2 triangles per quad in 2D, 6 tetrahedra per hexahedron
    (Kuhn split along the main diagonal, conforming across neighbours) in 3D
    """
    extent = np.asarray(extent, dtype=float)
    cells_per_axis = [int(n) for n in cells_per_axis]
    dim = len(cells_per_axis)

    if dim not in (2, 3) or extent.shape != (dim, 2):
        raise DegenerateExtentError(
            f"extent must list (low, high) for each of {dim} axes, got shape {extent.shape}"
        )
    if any(n < 1 for n in cells_per_axis):
        raise DegenerateExtentError(f"cells_per_axis must be >= 1, got {cells_per_axis}")
    if not np.all(np.isfinite(extent)) or np.any(extent[:, 1] <= extent[:, 0]):
        raise DegenerateExtentError(f"degenerate extent {extent.tolist()}: every axis needs low < high")

    axes = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(extent, cells_per_axis)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel(order="F") for g in grid], axis=1)
    shape = [n + 1 for n in cells_per_axis]

    def vertex_id(index):
        vid, stride = 0, 1
        for i, n in zip(index, shape):
            vid += i * stride
            stride *= n
        return vid

    cells = []
    for corner in itertools.product(*[range(n) for n in reversed(cells_per_axis)]):
        corner = tuple(reversed(corner))
        if dim == 2:
            i, j = corner
            v00, v10 = vertex_id((i, j)), vertex_id((i + 1, j))
            v01, v11 = vertex_id((i, j + 1)), vertex_id((i + 1, j + 1))
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
        else:
            for permutation in itertools.permutations(range(3)):
                path = [np.array(corner)]
                for axis in permutation:
                    step = path[-1].copy()
                    step[axis] += 1
                    path.append(step)
                cells.append(tuple(vertex_id(tuple(p)) for p in path))

    mesh = SimplicialMesh.from_arrays(vertices, np.array(cells, dtype=np.int64))
    logger.debug(f"Structured mesh: {mesh.summary()}")
    return mesh


def import_mesh(path: Union[str, Path]) -> SimplicialMesh:
    """
    Read the ASCII node-element format: `dim n_vertices n_cells`, then vertex
    coordinate lines, then 0-based cell vertex-index lines
    """
    path = Path(path)
    try:
        lines = [line.split() for line in path.read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise MeshParseError(f"cannot read mesh file {path}: {exc}", path=str(path)) from exc

    try:
        dim, n_vertices, n_cells = (int(token) for token in lines[0])
    except (IndexError, ValueError) as exc:
        raise MeshParseError(f"{path}: bad header, expected 'dim n_vertices n_cells'", path=str(path)) from exc

    if dim not in (2, 3):
        raise MeshParseError(f"{path}: unsupported dimension {dim}", path=str(path))
    if len(lines) != 1 + n_vertices + n_cells:
        raise MeshParseError(
            f"{path}: expected {1 + n_vertices + n_cells} non-empty lines, found {len(lines)}",
            path=str(path),
        )

    try:
        vertices = np.array([[float(t) for t in row] for row in lines[1:1 + n_vertices]])
        cells = np.array([[int(t) for t in row] for row in lines[1 + n_vertices:]], dtype=np.int64)
    except ValueError as exc:
        raise MeshParseError(f"{path}: {exc}", path=str(path)) from exc

    if vertices.shape != (n_vertices, dim) or cells.shape != (n_cells, dim + 1):
        raise MeshParseError(f"{path}: row lengths do not match dimension {dim}", path=str(path))

    mesh = SimplicialMesh.from_arrays(vertices, cells)
    logger.info(f"Imported mesh {path.name}: {mesh.n_cells} cells, {mesh.n_faces} faces")
    return mesh


def export_mesh(mesh: SimplicialMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    rows = [f"{mesh.dim} {len(mesh.vertices)} {mesh.n_cells}"]
    rows += [" ".join(f"{x:.17g}" for x in vertex) for vertex in mesh.vertices]
    rows += [" ".join(str(int(v)) for v in cell) for cell in mesh.cells]
    path.write_text("\n".join(rows) + "\n")
    return path


# Construction helpers

def _jacobians(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    points = vertices[cells]
    return np.transpose(points[:, 1:] - points[:, :1], (0, 2, 1))


def _orient_cells(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Swap the last two vertices of negatively oriented cells; reject flat ones"""
    cells = cells.copy()
    dets = np.linalg.det(_jacobians(vertices, cells))
    scale = np.max(np.ptp(vertices, axis=0)) ** vertices.shape[1]

    flat = np.abs(dets) <= 1e-14 * scale
    if flat.any():
        bad = int(np.flatnonzero(flat)[0])
        raise InvertedCellError(f"cell {bad} has zero volume", cell=bad)

    negative = dets < 0
    if negative.any():
        logger.info(f"Reoriented {int(negative.sum())} negatively oriented cells")
        cells[negative, -2], cells[negative, -1] = cells[negative, -1], cells[negative, -2].copy()
    return cells


def _enumerate_faces(cells: np.ndarray):
    n_cells, n_local = cells.shape
    local_faces = np.array([[j for j in range(n_local) if j != i] for i in range(n_local)])

    keys = np.sort(cells[:, local_faces], axis=2).reshape(n_cells * n_local, n_local - 1)
    faces, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    if counts.max() > 2:
        bad = int(np.flatnonzero(counts > 2)[0])
        raise NonManifoldMeshError(
            f"nonmanifold mesh: face {faces[bad].tolist()} is shared by {counts[bad]} cells",
            face=str(faces[bad].tolist()),
        )

    face_cells = -np.ones((len(faces), 2), dtype=np.int64)
    face_local = -np.ones((len(faces), 2), dtype=np.int64)
    cell_faces = inverse.reshape(n_cells, n_local)

    # Incidences are visited in increasing cell id, so side 0 is the lower-indexed owner
    for flat, face in enumerate(inverse):
        cell, local = divmod(flat, n_local)
        side = 0 if face_cells[face, 0] < 0 else 1
        face_cells[face, side] = cell
        face_local[face, side] = local

    return faces, face_cells, face_local, cell_faces


def _outward_normals(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    n_cells, n_local = cells.shape
    dim = vertices.shape[1]
    normals = np.empty((n_cells, n_local, dim))

    for i in range(n_local):
        others = [j for j in range(n_local) if j != i]
        face_points = vertices[cells[:, others]]
        if dim == 2:
            tangent = face_points[:, 1] - face_points[:, 0]
            normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        else:
            normal = np.cross(face_points[:, 1] - face_points[:, 0], face_points[:, 2] - face_points[:, 0])
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        away = np.einsum("ed,ed->e", normal, face_points[:, 0] - vertices[cells[:, i]])
        normal[away < 0] *= -1.0
        normals[:, i] = normal

    return normals


def _face_measures(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    points = vertices[faces]
    if vertices.shape[1] == 2:
        return np.linalg.norm(points[:, 1] - points[:, 0], axis=1)
    return 0.5 * np.linalg.norm(np.cross(points[:, 1] - points[:, 0], points[:, 2] - points[:, 0]), axis=1)


def _tag_faces(vertices: np.ndarray, faces: np.ndarray, face_cells: np.ndarray) -> Tuple[str, ...]:
    """Boundary faces lying on a bounding-box side get that side's name"""
    dim = vertices.shape[1]
    low, high = vertices.min(axis=0), vertices.max(axis=0)
    tolerance = 1e-12 * max(1.0, float(np.max(high - low)))

    tags = []
    for face, (_, neighbor) in zip(faces, face_cells):
        if neighbor >= 0:
            tags.append(INTERIOR_TAG)
            continue
        points = vertices[face]
        tag = "boundary"
        for axis in range(dim):
            if np.all(np.abs(points[:, axis] - low[axis]) <= tolerance):
                tag = _SIDE_NAMES[dim][axis][0]
            elif np.all(np.abs(points[:, axis] - high[axis]) <= tolerance):
                tag = _SIDE_NAMES[dim][axis][1]
        tags.append(tag)
    return tuple(tags)
