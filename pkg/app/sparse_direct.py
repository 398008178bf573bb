"""
Sparse direct factorization of the global trace matrix
Factor once, then solve any number of right-hand sides and
conjugate-transpose (adjoint) systems from the same factors
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Union

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from .errors import DimensionMismatchError, SingularMatrixError
from .logger import get_logger, log_performance
from .monitoring import monitor

logger = get_logger("sparse_direct")

# Relative pivot size below which the factorization is declared singular
PIVOT_TOLERANCE = 1e-14


class DirectSolverBackend(Protocol):
    """Seam for swapping the desk-scale LU for an external direct solver"""

    name: str

    def factor(self, matrix: sps.csc_matrix) -> Any: ...

    def solve(self, handle: Any, rhs: np.ndarray, adjoint: bool) -> np.ndarray: ...

    def pivots(self, handle: Any) -> Optional[np.ndarray]: ...

    def factor_nnz(self, handle: Any) -> int: ...


class SuperLUBackend:
    """SuperLU with column approximate minimum degree ordering"""

    name = "superlu-colamd"

    def factor(self, matrix: sps.csc_matrix):
        return splu(matrix, permc_spec="COLAMD")

    def solve(self, handle, rhs: np.ndarray, adjoint: bool) -> np.ndarray:
        return handle.solve(rhs, trans="H" if adjoint else "N")

    def pivots(self, handle) -> Optional[np.ndarray]:
        """U diagonal mapped back to original column (trace dof) order"""
        diagonal = np.abs(handle.U.diagonal())
        return diagonal[handle.perm_c]

    def factor_nnz(self, handle) -> int:
        return int(handle.L.nnz + handle.U.nnz)


default_backend = SuperLUBackend()


@dataclass(eq=False)
class Factorization:
    """Reusable factors of a square complex sparse matrix"""

    handle: Any = field(repr=False)
    backend: DirectSolverBackend = field(repr=False)
    dimension: int
    generation: int
    key: Optional[str] = None
    nnz_matrix: int = 0
    nnz_factors: int = 0

    @property
    def memory_estimate_bytes(self) -> int:
        # complex128 values plus int32 indices
        return self.nnz_factors * (16 + 4)

    def statistics(self) -> dict:
        return {
            "backend": self.backend.name,
            "dimension": self.dimension,
            "nnz_matrix": self.nnz_matrix,
            "nnz_factors": self.nnz_factors,
            "memory_estimate_bytes": self.memory_estimate_bytes,
            "generation": self.generation,
        }


def factorize(
    matrix: Union[sps.spmatrix, np.ndarray],
    key: Optional[str] = None,
    backend: Optional[DirectSolverBackend] = None,
) -> Factorization:
    """Factor the matrix; every call increments the global factorization counter"""
    backend = backend or default_backend
    matrix = sps.csc_matrix(matrix, dtype=np.complex128)

    if matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(f"matrix must be square, got {matrix.shape}")

    n = matrix.shape[0]
    _check_structure(matrix)

    start_time = time.time()
    try:
        handle = backend.factor(matrix)
    except RuntimeError as exc:
        raise SingularMatrixError(f"factorization failed: {exc}", trace_dof=None) from exc

    pivots = backend.pivots(handle)
    if pivots is not None and n:
        scale = float(np.max(np.abs(matrix.data))) if matrix.nnz else 1.0
        small = np.flatnonzero(pivots <= PIVOT_TOLERANCE * scale)
        if len(small):
            raise SingularMatrixError(
                f"numerically singular pivot at trace dof {int(small[0])}", trace_dof=int(small[0])
            )

    generation = monitor.increment("factorizations")
    duration = time.time() - start_time
    monitor.record_stage("factorization", duration)

    factorization = Factorization(
        handle=handle,
        backend=backend,
        dimension=n,
        generation=generation,
        key=key,
        nnz_matrix=int(matrix.nnz),
        nnz_factors=backend.factor_nnz(handle),
    )
    log_performance("factorization", duration, **factorization.statistics())
    return factorization


def solve_many(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    """Columnwise solves; a 1-D rhs gives a 1-D solution"""
    return _solve(factorization, rhs, adjoint=False)


def solve(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    return _solve(factorization, rhs, adjoint=False)


def solve_adjoint(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    """Solve the conjugate-transpose system from the existing factors"""
    return _solve(factorization, rhs, adjoint=True)


def _solve(factorization: Factorization, rhs: np.ndarray, adjoint: bool) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.complex128)
    if rhs.shape[0] != factorization.dimension or rhs.ndim > 2:
        raise DimensionMismatchError(
            f"rhs of shape {rhs.shape} does not match system dimension {factorization.dimension}"
        )
    if rhs.ndim == 2 and rhs.shape[1] == 0:
        return np.zeros_like(rhs)

    start_time = time.time()
    solution = factorization.backend.solve(factorization.handle, np.ascontiguousarray(rhs), adjoint)
    columns = 1 if rhs.ndim == 1 else rhs.shape[1]
    monitor.increment("adjoint_solves" if adjoint else "solves", columns)
    monitor.record_stage("adjoint solve" if adjoint else "solve", time.time() - start_time)
    return solution


def _check_structure(matrix: sps.csc_matrix):
    """Empty rows or columns make the matrix structurally singular"""
    n = matrix.shape[0]
    if n == 0:
        return
    column_counts = np.diff(matrix.indptr)
    row_counts = np.bincount(matrix.indices, minlength=n)
    empty = np.flatnonzero((column_counts == 0) | (row_counts == 0))
    if len(empty):
        raise SingularMatrixError(
            f"structurally singular: trace dof {int(empty[0])} has an empty row or column",
            trace_dof=int(empty[0]),
        )


def dump_coo(matrix: sps.spmatrix, path: Union[str, Path]) -> Path:
    """Write 'row col re im' lines for external cross-checks"""
    path = Path(path)
    coo = sps.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with path.open("w") as handle:
        handle.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for k in order:
            value = complex(coo.data[k])
            handle.write(f"{coo.row[k]} {coo.col[k]} {value.real:.17g} {value.imag:.17g}\n")
    logger.info(f"Wrote {coo.nnz} matrix entries to {path}")
    return path
