"""
HDG frequency-domain acoustic solver and FWI command line
Verbs: mesh-info, forward, synthesize, gradcheck, invert
"""

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.config import VERSION
from app.errors import EXIT_OK, ConfigError, DataError, HDGError, NumericalError
from app.forward_solver import AcquisitionSetup, PointSource, line_points, solve_forward
from app.hdg import BoundaryCondition, BoundarySpec, Discretization
from app.inversion import (
    InversionProblem,
    MisfitEvaluator,
    adaptive_orders,
    gradient_check,
    run_inversion,
    synthesize_data,
    uniform_orders,
)
from app.logger import log_error, log_performance, logger
from app.medium import ModelState, inclusion_field, model_from_function
from app.mesh import SimplicialMesh, build_structured_mesh, import_mesh
from app.models import MeshSection, ModelSection, RunConfig, check_model_dimension, parse_config
from app.monitoring import monitor
from app.storage import (
    model_vertex_values,
    read_dataset,
    read_model,
    vertex_values,
    write_dataset,
    write_error,
    write_measurements,
    write_model,
    write_resolved_config,
    write_table,
    write_vtk,
)


# Config -> domain objects

def build_mesh(section: MeshSection) -> SimplicialMesh:
    if section.path is not None:
        return import_mesh(section.path)
    return build_structured_mesh(section.extent, section.cells_per_axis)


def build_model(section: ModelSection, mesh: SimplicialMesh) -> ModelState:
    if section.path is not None:
        model = read_model(section.path, bounds=section.bounds)
        if model.n_cells != mesh.n_cells or model.dim != mesh.dim:
            raise ConfigError(
                f"model file {section.path} covers {model.n_cells} cells in {model.dim}D, "
                f"mesh has {mesh.n_cells} cells in {mesh.dim}D"
            )
        return model.check_bounds()
    check_model_dimension(section, mesh.dim, "model")
    field = inclusion_field(
        section.wave_speed, [i.model_dump() for i in section.inclusions], section.gradient
    )
    return model_from_function(mesh, field, section.density, section.order, section.bounds).check_bounds()


def boundary_factory(config: RunConfig):
    def build(mesh: SimplicialMesh, model: ModelState) -> BoundarySpec:
        def condition(section) -> BoundaryCondition:
            return BoundaryCondition(section.kind, section.alpha, section.beta)
        mapping = {tag: condition(section) for tag, section in config.boundary.tags.items()}
        return BoundarySpec.from_tags(mesh, mapping, condition(config.boundary.default), model=model)
    return build


def order_policy(config: RunConfig):
    section = config.discretization
    if section.adaptive:
        return adaptive_orders(section.dofs_per_wavelength, section.p_min, section.p_max)
    return uniform_orders(section.order)


def build_acquisition(config: RunConfig, mesh: SimplicialMesh) -> AcquisitionSetup:
    section = config.acquisition
    sources = [PointSource(tuple(s.position), complex(*s.amplitude)) for s in section.sources]
    receivers = [list(r) for r in section.receivers]
    if section.source_line is not None:
        sources += [
            PointSource(tuple(p)) for p in line_points(mesh, section.source_line.count, section.source_line.offset)
        ]
    if section.receiver_line is not None:
        receivers += line_points(mesh, section.receiver_line.count, section.receiver_line.offset).tolist()
    for position in [s.position for s in sources] + receivers:
        if len(position) != mesh.dim:
            raise ConfigError(f"acquisition point {list(position)} is not {mesh.dim}-dimensional")
    return AcquisitionSetup(sources=tuple(sources), receivers=np.array(receivers), quantity=section.quantity)


def _print(payload: dict):
    print(json.dumps(payload, indent=2, sort_keys=True))


# Verbs

def cmd_mesh_info(config: RunConfig, output_dir: Path) -> dict:
    """Print mesh counts and trace/volume dof totals"""
    mesh = build_mesh(config.mesh)
    model = build_model(config.model, mesh)
    orders = order_policy(config)(mesh, model, min(config.frequencies))
    discretization = Discretization.build(mesh, orders)
    summary = {**mesh.summary(), **discretization.summary()}
    _print(summary)
    return summary


def cmd_forward(config: RunConfig, output_dir: Path) -> dict:
    """Solve every source at every frequency; write measurements and fields"""
    mesh = build_mesh(config.mesh)
    model = build_model(config.model, mesh)
    setup = build_acquisition(config, mesh)
    boundary = boundary_factory(config)(mesh, model)
    policy = order_policy(config)

    summary = {"frequencies": [], "factorizations": 0}
    for index, frequency in enumerate(sorted(config.frequencies)):
        discretization = Discretization.build(mesh, policy(mesh, model, frequency))
        result = solve_forward(discretization, model, config.sigma(frequency), setup, boundary)
        write_measurements(
            result.measurements, frequency, config.laplace_shift, output_dir / f"measurements_f{index}.csv"
        )

        pressure = {
            f"pressure_s{k}": vertex_values(
                mesh, discretization.orders, [result.solution.pressure(c)[:, k] for c in range(mesh.n_cells)]
            )
            for k in range(setup.n_sources)
        }
        write_vtk(
            mesh,
            output_dir / f"field_f{index}.vtk",
            point_fields=pressure,
            cell_fields={"order": discretization.orders, "wave_speed": model.cell_mean_wave_speed()},
        )
        summary["frequencies"].append({
            "frequency": frequency,
            "trace_dofs": discretization.n_trace_dofs,
            **result.system.factorize().statistics(),
        })
    summary["factorizations"] = monitor.factorizations
    _print(summary)
    return summary


def _synthesis_inputs(config: RunConfig):
    """Truth model, data mesh and discretization policy; differs from the inversion setup when configured"""
    section = config.synthesis
    mesh = build_mesh(section.mesh or config.mesh)
    truth = build_model(section.truth or config.model, mesh)
    policy = uniform_orders(section.order) if section.order is not None else order_policy(config)
    return mesh, truth, policy


def synthesize(config: RunConfig, output_dir: Path):
    mesh, truth, policy = _synthesis_inputs(config)
    setup = build_acquisition(config, mesh)
    boundary = boundary_factory(config)(mesh, truth)
    # Orders follow the highest frequency so every block is resolved
    discretization = Discretization.build(mesh, policy(mesh, truth, max(config.frequencies)))
    dataset = synthesize_data(
        truth, discretization, boundary, setup, config.frequencies, config.laplace_shift,
        config.synthesis.snr_db, config.seed,
    )
    path = write_dataset(dataset, output_dir / "data.json")
    write_model(truth, output_dir / "truth.model")
    return dataset, path


def cmd_synthesize(config: RunConfig, output_dir: Path) -> dict:
    """Write noisy synthetic data and the true model"""
    dataset, path = synthesize(config, output_dir)
    summary = {
        "data": str(path),
        "shape": list(dataset.values.shape),
        "snr_db": config.synthesis.snr_db,
        "seed": config.seed,
    }
    _print(summary)
    return summary


def cmd_gradcheck(config: RunConfig, output_dir: Path) -> dict:
    """Compare the adjoint gradient with central finite differences"""
    section = config.gradcheck
    mesh = build_mesh(config.mesh)
    model = build_model(config.model, mesh)
    truth_section = config.synthesis.truth
    truth = build_model(truth_section, mesh) if truth_section else model.with_vector(1.1 * model.vector())
    setup = build_acquisition(config, mesh)
    boundary = boundary_factory(config)(mesh, model)
    discretization = Discretization.build(mesh, order_policy(config)(mesh, model, max(config.frequencies)))

    data = synthesize_data(truth, discretization, boundary, setup, config.frequencies, config.laplace_shift)
    evaluator = MisfitEvaluator(
        discretization, boundary, setup,
        {f: data.block(f) for f in data.frequencies}, config.laplace_shift, section.parameter,
    )

    rng = np.random.default_rng(config.seed)
    candidates = model.n_cells if section.parameter == "kappa_inv" else model.n_model_dofs
    indices = sorted(rng.choice(candidates, size=min(section.cells, candidates), replace=False).tolist())
    grad, rows = gradient_check(evaluator, model, indices, section.steps)

    write_table(rows, output_dir / "gradcheck.csv")
    write_vtk(
        mesh, output_dir / "gradient.vtk",
        cell_fields={"order": discretization.orders},
        field_data={"gradient": grad.values},
    )
    summary = {
        "indices": indices,
        "parameter": section.parameter,
        "min_relative_error": min(row["relative_error"] for row in rows),
    }
    _print(summary)
    return summary


def cmd_invert(config: RunConfig, output_dir: Path) -> dict:
    """Run NLCG full waveform inversion with frequency continuation"""
    section = config.inversion
    mesh = build_mesh(config.mesh)
    initial = build_model(section.initial_model or config.model, mesh)

    if section.data_path is not None:
        dataset = read_dataset(section.data_path)
    else:
        logger.info("No data_path given: synthesizing data first")
        dataset, _ = synthesize(config, output_dir)
    missing = [f for f in config.frequencies if not any(np.isclose(f, g) for g in dataset.frequencies)]
    if missing:
        raise DataError(f"data set has no block for frequencies {missing}")

    setup = build_acquisition(config, mesh)
    problem = InversionProblem(
        mesh=mesh,
        setup=setup,
        data=dataset,
        boundary=boundary_factory(config),
        orders=order_policy(config),
        laplace_shift=config.laplace_shift,
        mesh_schedule={s.frequency: build_mesh(s.mesh) for s in section.mesh_schedule},
    )
    result = run_inversion(problem, initial, section, output_dir)
    write_vtk(
        result.mesh, output_dir / "final_model.vtk",
        point_fields={"wave_speed": model_vertex_values(result.mesh, result.model)},
    )

    misfits = result.misfits()
    summary = {
        "iterations": len(result.log),
        "initial_misfit": misfits[0] if misfits else None,
        "final_misfit": misfits[-1] if misfits else None,
        "factorizations": monitor.factorizations,
    }
    _print(summary)
    return summary


COMMANDS = {
    "mesh-info": cmd_mesh_info,
    "forward": cmd_forward,
    "synthesize": cmd_synthesize,
    "gradcheck": cmd_gradcheck,
    "invert": cmd_invert,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdg-fwi", description="HDG acoustic solver and full waveform inversion")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sub = subparsers.add_parser(name, help=func.__doc__)
        sub.add_argument("--config", required=True, help="RunConfig JSON file")
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
        sub.add_argument("--output-dir", default=None, help="override the config output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    output_dir: Optional[Path] = Path(args.output_dir) if args.output_dir else None
    start_time = time.time()

    try:
        config = parse_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if output_dir is not None:
            overrides["output_dir"] = str(output_dir)
        config = config.model_copy(update=overrides)
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(config, output_dir, {"command": args.command})

        logger.info(f"hdg-fwi {VERSION}: {args.command}")
        COMMANDS[args.command](config, output_dir)
        log_performance(args.command, time.time() - start_time, factorizations=monitor.factorizations)
        return EXIT_OK

    except HDGError as exc:
        return _fail(args.command, exc, output_dir)
    except OSError as exc:
        return _fail(args.command, DataError(f"I/O failure: {exc}"), output_dir)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        error = NumericalError(f"{type(exc).__name__}: {exc}", cause=type(exc).__name__)
        return _fail(args.command, error, output_dir)


def _fail(command: str, error: HDGError, output_dir: Optional[Path]) -> int:
    log_error(command, error)
    record = error.to_record()
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if output_dir is not None:
        write_error(record, output_dir)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
