"""
Full waveform inversion
Least-squares misfit over frequencies and sources, Polak-Ribiere-plus
nonlinear conjugate gradient with projected Armijo backtracking, and
sequential frequency continuation. Synthetic data generation with
per-trace white noise lives here too.
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import (
    GradientVector,
    build_adjoint_rhs,
    diagonal_scaling,
    gradient,
    pseudo_hessian,
    solve_adjoint_states,
)
from .basis import assign_orders
from .config import VERSION
from .errors import DataError, HDGError
from .forward_solver import AcquisitionSetup, ForwardResult, RestrictionOperator, complex_frequency, solve_forward
from .hdg import BoundarySpec, Discretization
from .logger import get_logger, log_error
from .medium import ModelState, transfer_model
from .mesh import SimplicialMesh
from .models import DataSetHeader, InversionSection, IterationRecord
from .storage import DataSet, write_inversion_log, write_model, write_timings

logger = get_logger("inversion")

BoundaryFactory = Callable[[SimplicialMesh, ModelState], BoundarySpec]
OrderPolicy = Callable[[SimplicialMesh, ModelState, float], np.ndarray]


def uniform_orders(order: int) -> OrderPolicy:
    def policy(mesh: SimplicialMesh, model: ModelState, frequency: float) -> np.ndarray:
        return np.full(mesh.n_cells, int(order))
    return policy


def adaptive_orders(dofs_per_wavelength: float, p_min: Optional[int] = None, p_max: Optional[int] = None) -> OrderPolicy:
    """Wavelength-driven orders from the cell-mean wave speed"""
    def policy(mesh: SimplicialMesh, model: ModelState, frequency: float) -> np.ndarray:
        return assign_orders(mesh, model.cell_mean_wave_speed(), frequency, dofs_per_wavelength, p_min, p_max)
    return policy


def misfit(residuals: Sequence[np.ndarray]) -> float:
    """1/2 sum of squared residual magnitudes over every (frequency, source, receiver)"""
    return 0.5 * float(sum(np.sum(np.abs(r) ** 2) for r in residuals))


# Misfit and gradient evaluation

class MisfitEvaluator:
    """
    Misfit and gradient at one frequency set on a fixed discretization.
    Forward results of the most recent model are kept, so a line-search trial
    and the gradient at the accepted model share one factorization.
    """

    def __init__(
        self,
        discretization: Discretization,
        boundary: BoundarySpec,
        setup: AcquisitionSetup,
        data: Dict[float, np.ndarray],
        laplace_shift: float = 0.0,
        parameter: str = "wave_speed",
    ):
        self.discretization = discretization
        self.boundary = boundary
        self.setup = setup
        self.data = data                 # frequency -> (n_sources, n_receivers)
        self.laplace_shift = laplace_shift
        self.parameter = parameter
        self.restriction = RestrictionOperator.build(discretization, setup.receivers, setup.component)
        self._cache_key: Optional[str] = None
        self._cache: Dict[float, ForwardResult] = {}

        for frequency, block in data.items():
            if block.shape != (setup.n_sources, setup.n_receivers):
                raise DataError(
                    f"data block at {frequency} Hz has shape {block.shape}, "
                    f"expected ({setup.n_sources}, {setup.n_receivers})"
                )

    @property
    def frequencies(self) -> List[float]:
        return sorted(self.data)

    def forward(self, model: ModelState) -> Dict[float, ForwardResult]:
        if model.fingerprint != self._cache_key:
            self._cache = {}
            for frequency in self.frequencies:
                self._cache[frequency] = solve_forward(
                    self.discretization,
                    model,
                    complex_frequency(frequency, self.laplace_shift),
                    self.setup,
                    self.boundary,
                    restriction=self.restriction,
                )
            self._cache_key = model.fingerprint
        return self._cache

    def residuals(self, model: ModelState) -> Dict[float, np.ndarray]:
        """(n_receivers, n_sources) per frequency"""
        results = self.forward(model)
        return {f: results[f].measurements - self.data[f].T for f in self.frequencies}

    def misfit(self, model: ModelState) -> float:
        return misfit(list(self.residuals(model).values()))

    def misfit_and_gradient(self, model: ModelState) -> Tuple[float, GradientVector]:
        results = self.forward(model)
        residuals = self.residuals(model)
        total: Optional[GradientVector] = None
        for frequency in self.frequencies:
            result = results[frequency]
            rhs, local_sources = build_adjoint_rhs(result.system, residuals[frequency], self.restriction)
            adjoint = solve_adjoint_states(result.system, rhs, local_sources, residuals[frequency])
            contribution = gradient(result.system, model, result.solution, adjoint, self.parameter)
            total = contribution if total is None else total + contribution
        return misfit(list(residuals.values())), total

    def pseudo_hessian(self, model: ModelState) -> GradientVector:
        """Source-side illumination summed over frequencies, from the cached forward fields"""
        results = self.forward(model)
        total: Optional[GradientVector] = None
        for frequency in self.frequencies:
            result = results[frequency]
            contribution = pseudo_hessian(result.system, model, result.solution, self.parameter)
            total = contribution if total is None else total + contribution
        return total


# Search direction and step

@dataclass(frozen=True)
class SearchDirection:
    direction: np.ndarray
    beta: float
    restarted: bool
    converged: bool


def nlcg_direction(
    current: np.ndarray,
    previous: Optional[np.ndarray] = None,
    previous_direction: Optional[np.ndarray] = None,
    scaled: Optional[np.ndarray] = None,
    previous_scaled: Optional[np.ndarray] = None,
) -> SearchDirection:
    """
    Polak-Ribiere-plus on the preconditioned gradient z = P g:
    s = -z + max(0, <g, z - z_prev> / <g_prev, z_prev>) s_prev,
    restarted with -z when s is not a descent direction. Without z the
    plain form (P = I) is used.
    """
    current = np.asarray(current, dtype=float)
    if not np.any(current):
        return SearchDirection(np.zeros_like(current), 0.0, False, True)
    z = current if scaled is None else np.asarray(scaled, dtype=float)
    if previous is None or previous_direction is None:
        return SearchDirection(-z, 0.0, False, False)
    previous_z = previous if previous_scaled is None else previous_scaled

    denominator = float(previous_z @ previous)
    beta = max(0.0, float(current @ (z - previous_z)) / denominator) if denominator > 0 else 0.0
    direction = -z + beta * previous_direction
    if float(direction @ -current) <= 0.0:
        return SearchDirection(-z, 0.0, True, False)
    return SearchDirection(direction, beta, False, False)


@dataclass(frozen=True)
class LineSearchResult:
    step: float
    value: float
    trials: int
    accepted: bool
    point: Optional[np.ndarray] = None


def line_search(
    point: np.ndarray,
    direction: np.ndarray,
    value: float,
    slope: float,
    oracle: Callable[[np.ndarray], float],
    initial_step: float,
    project: Callable[[np.ndarray], np.ndarray] = lambda x: x,
    c1: float = 1e-4,
    max_halvings: int = 20,
) -> LineSearchResult:
    """
    Backtracking Armijo: the largest step in {initial_step * 2^-j, j <= max_halvings}
    with J(P(m + step s)) <= J(m) + c1 step <g, s>
    """
    if not np.any(direction) or slope >= 0.0 or not initial_step > 0.0:
        logger.warning("Line search called without a descent direction; rejected")
        return LineSearchResult(step=0.0, value=value, trials=0, accepted=False)

    step = initial_step
    for trial in range(1, max_halvings + 2):
        candidate = project(point + step * direction)
        trial_value = oracle(candidate)
        if np.isfinite(trial_value) and trial_value <= value + c1 * step * slope:
            return LineSearchResult(step=step, value=trial_value, trials=trial, accepted=True, point=candidate)
        step *= 0.5

    return LineSearchResult(step=0.0, value=value, trials=max_halvings + 1, accepted=False)


def initial_step(point: np.ndarray, direction: np.ndarray, fraction: float) -> float:
    """Step whose largest coefficient change is `fraction` of the largest coefficient"""
    largest = float(np.max(np.abs(direction)))
    if largest == 0.0:
        return 0.0
    return fraction * float(np.max(np.abs(point))) / largest


def trial_step(
    point: np.ndarray,
    direction: np.ndarray,
    settings: InversionSection,
    last_change: Optional[float] = None,
) -> float:
    """
    First trial of a line search: initial_step_fraction when nothing was
    accepted yet, otherwise step_growth times the last accepted largest
    coefficient change, never beyond max_step_fraction
    """
    first = initial_step(point, direction, settings.initial_step_fraction)
    if last_change is None or not last_change > 0.0 or first == 0.0:
        return first
    largest = float(np.max(np.abs(direction)))
    cap = initial_step(point, direction, max(settings.max_step_fraction, settings.initial_step_fraction))
    return min(settings.step_growth * last_change / largest, cap)


# Driver

@dataclass
class InversionProblem:
    mesh: SimplicialMesh
    setup: AcquisitionSetup
    data: DataSet
    boundary: BoundaryFactory
    orders: OrderPolicy
    laplace_shift: float = 0.0
    mesh_schedule: Dict[float, SimplicialMesh] = field(default_factory=dict)


@dataclass
class InversionResult:
    model: ModelState
    mesh: SimplicialMesh
    log: List[IterationRecord]

    def misfits(self, frequency: Optional[float] = None) -> List[float]:
        return [r.misfit for r in self.log if r.accepted and (frequency is None or r.frequency == frequency)]


def run_inversion(
    problem: InversionProblem,
    initial_model: ModelState,
    settings: InversionSection,
    output_dir: Optional[Path] = None,
) -> InversionResult:
    """
    Frequencies in ascending order, each its own block with frozen orders and
    boundary coefficients. Any failure writes an abort checkpoint and re-raises.
    """
    model, mesh = initial_model, problem.mesh
    log: List[IterationRecord] = []
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

    try:
        for block_index, frequency in enumerate(sorted(problem.data.frequencies)):
            scheduled = problem.mesh_schedule.get(frequency)
            if scheduled is not None and scheduled is not mesh:
                model = transfer_model(model, mesh, scheduled)
                mesh = scheduled
            model = _invert_frequency(problem, mesh, model, frequency, block_index, settings, log, output_dir)
    except HDGError as exc:
        log_error("inversion", exc, frequency=log[-1].frequency if log else None)
        if output_dir is not None:
            write_model(model, output_dir / "checkpoint_abort.model")
            write_inversion_log(log, output_dir / "inversion_log.csv")
        raise

    if output_dir is not None:
        write_model(model, output_dir / "final.model")
        write_inversion_log(log, output_dir / "inversion_log.csv")
        write_timings(log, output_dir / "timings.csv")
    return InversionResult(model=model, mesh=mesh, log=log)


def _invert_frequency(
    problem: InversionProblem,
    mesh: SimplicialMesh,
    model: ModelState,
    frequency: float,
    block_index: int,
    settings: InversionSection,
    log: List[IterationRecord],
    output_dir: Optional[Path],
) -> ModelState:
    orders = problem.orders(mesh, model, frequency)
    discretization = Discretization.build(mesh, orders)
    evaluator = MisfitEvaluator(
        discretization,
        problem.boundary(mesh, model),
        problem.setup,
        {frequency: problem.data.block(frequency)},
        problem.laplace_shift,
        settings.parameter,
    )
    logger.info(
        f"Frequency block {block_index}: {frequency} Hz, {discretization.n_trace_dofs} trace dofs, "
        f"orders {int(orders.min())}..{int(orders.max())}"
    )

    start_time = time.time()
    value, grad = evaluator.misfit_and_gradient(model)
    initial_norm = grad.norm
    log.append(IterationRecord(
        frequency=frequency, iteration=0, misfit=value, step=0.0, gradient_norm=initial_norm,
        trials=0, accepted=True, restarted=False, wall_time=time.time() - start_time,
    ))

    # Frozen per block, like orders and boundary coefficients
    scaling: Optional[np.ndarray] = None
    if settings.preconditioner == "pseudo_hessian":
        scaling = diagonal_scaling(evaluator.pseudo_hessian(model).vector(), settings.preconditioner_damping)

    previous: Optional[np.ndarray] = None
    previous_scaled: Optional[np.ndarray] = None
    previous_direction: Optional[np.ndarray] = None
    last_change: Optional[float] = None
    for iteration in range(1, settings.iterations + 1):
        start_time = time.time()
        g = grad.vector()
        z = g if scaling is None else scaling * g
        search = nlcg_direction(g, previous, previous_direction, z, previous_scaled)
        if search.converged or grad.norm <= settings.gradient_tolerance * initial_norm:
            logger.info(f"{frequency} Hz: converged at iteration {iteration - 1}")
            break

        point = model.vector()
        slope = float(g @ search.direction)
        result = line_search(
            point,
            search.direction,
            value,
            slope,
            lambda m: evaluator.misfit(model.with_vector(m)),
            trial_step(point, search.direction, settings, last_change),
            project=model.project,
            c1=settings.armijo_c1,
            max_halvings=settings.max_halvings,
        )

        if not result.accepted:
            log.append(IterationRecord(
                frequency=frequency, iteration=iteration, misfit=value, step=0.0, gradient_norm=grad.norm,
                trials=result.trials, accepted=False, restarted=search.restarted,
                wall_time=time.time() - start_time,
            ))
            if previous is None or search.restarted:
                logger.warning(f"{frequency} Hz: steepest descent step rejected; stopping block")
                break
            logger.info(f"{frequency} Hz: step rejected at iteration {iteration}, restarting")
            previous, previous_scaled, previous_direction, last_change = None, None, None, None
            continue

        model = model.with_vector(result.point)
        previous, previous_scaled, previous_direction = g, z, search.direction
        last_change = result.step * float(np.max(np.abs(search.direction)))
        value, grad = evaluator.misfit_and_gradient(model)
        log.append(IterationRecord(
            frequency=frequency, iteration=iteration, misfit=value, step=result.step, gradient_norm=grad.norm,
            trials=result.trials, accepted=True, restarted=search.restarted,
            wall_time=time.time() - start_time,
        ))
        logger.info(
            f"{frequency} Hz iteration {iteration}: misfit {value:.6e}, step {result.step:.3e}, "
            f"{result.trials} trials"
        )

        if output_dir is not None and settings.checkpoint_every and iteration % settings.checkpoint_every == 0:
            write_model(model, output_dir / f"checkpoint_f{block_index}_it{iteration:03d}.model")

    return model


# Synthetic data

def add_noise(values: np.ndarray, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    """
    Complex white Gaussian noise per trace (last axis = receivers) scaled so
    |signal|^2 / |noise|^2 = 10^(snr/10) in expectation
    """
    if snr_db is None or math.isinf(snr_db):
        return values.copy()
    values = np.asarray(values, dtype=np.complex128)
    power = np.mean(np.abs(values) ** 2, axis=-1, keepdims=True)
    variance = power / 10.0 ** (snr_db / 10.0)
    noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
    return values + np.sqrt(variance / 2.0) * noise


def synthesize_data(
    model: ModelState,
    discretization: Discretization,
    boundary: BoundarySpec,
    setup: AcquisitionSetup,
    frequencies: Sequence[float],
    laplace_shift: float = 0.0,
    snr_db: Optional[float] = None,
    seed: int = 0,
) -> DataSet:
    """Measurements of the true model at every frequency, noise added with a recorded seed"""
    rng = np.random.default_rng(seed)
    frequencies = sorted(float(f) for f in frequencies)
    blocks = []
    for frequency in frequencies:
        result = solve_forward(
            discretization, model, complex_frequency(frequency, laplace_shift), setup, boundary
        )
        blocks.append(add_noise(result.measurements.T, snr_db, rng))

    header = DataSetHeader(
        frequencies=frequencies,
        laplace_shift=laplace_shift,
        sources=[list(map(float, s.position)) for s in setup.sources],
        amplitudes=[(complex(s.amplitude).real, complex(s.amplitude).imag) for s in setup.sources],
        receivers=setup.receivers.tolist(),
        quantity=setup.quantity,
        values_file="",
        seed=seed,
        snr_db=snr_db,
        version=VERSION,
    )
    logger.info(f"Synthesized {len(frequencies)} x {setup.n_sources} x {setup.n_receivers} data, SNR {snr_db} dB")
    return DataSet(header=header, values=np.stack(blocks))


# Finite-difference check of the adjoint gradient

def perturb(model: ModelState, index: int, delta: float, parameter: str = "wave_speed") -> ModelState:
    """Shift one model coefficient (wave speed) or one cell's kappa^-1 by delta"""
    values = model.vector()
    if parameter == "kappa_inv":
        cell = index
        kappa_inv = 1.0 / (model.density[cell] * values[cell] ** 2) + delta
        values[cell] = 1.0 / math.sqrt(model.density[cell] * kappa_inv)
    else:
        values[index] += delta
    return model.with_vector(values)


def parameter_value(model: ModelState, index: int, parameter: str = "wave_speed") -> float:
    value = float(model.vector()[index])
    if parameter == "kappa_inv":
        return 1.0 / (float(model.density[index]) * value ** 2)
    return value


def gradient_check(
    evaluator: MisfitEvaluator,
    model: ModelState,
    indices: Sequence[int],
    steps: Sequence[float],
) -> Tuple[GradientVector, List[Dict[str, float]]]:
    """
    Central differences of the misfit against the adjoint gradient on the
    selected model coefficients; steps are relative to each coefficient
    """
    _, grad = evaluator.misfit_and_gradient(model)
    adjoint = grad.vector()[list(indices)]
    parameter = evaluator.parameter

    rows = []
    for step in steps:
        finite = np.empty(len(indices))
        for k, index in enumerate(indices):
            h = step * abs(parameter_value(model, index, parameter))
            plus = evaluator.misfit(perturb(model, index, h, parameter))
            minus = evaluator.misfit(perturb(model, index, -h, parameter))
            finite[k] = (plus - minus) / (2.0 * h)
        error = float(np.linalg.norm(finite - adjoint) / max(np.linalg.norm(adjoint), 1e-300))
        rows.append({"step": float(step), "relative_error": error})
        logger.info(f"gradient check step {step:.0e}: relative error {error:.3e}")
    return grad, rows
