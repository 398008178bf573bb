"""
On-disk formats
Model files, measurement DataSets (JSON header + CSV or binary values),
legacy VTK export, inversion logs and run metadata. All floats are written
with round-trip precision so reruns are byte-identical.
"""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .basis import cell_basis, dof_count, lagrange_basis
from .config import VERSION, settings
from .errors import DataError, InvalidModelError
from .logger import get_logger
from .medium import DEFAULT_BOUNDS, ModelState
from .mesh import SimplicialMesh
from .models import DataSetHeader, IterationRecord, RunConfig

logger = get_logger("storage")

MODEL_MAGIC = b"HDGM"
DATA_COLUMNS = ["source_id", "receiver_id", "freq_re", "freq_im", "value_re", "value_im"]
LOG_COLUMNS = ["frequency", "iteration", "misfit", "step", "gradient_norm", "trials", "accepted", "restarted"]

PathLike = Union[str, Path]


def _g(value: float) -> str:
    return f"{value:.17g}"


# Model files

def write_model(model: ModelState, path: PathLike, binary: bool = False) -> Path:
    """
    ASCII: header `dim N order`, then one row per cell with the wave-speed
    coefficients followed by the density. Binary: magic, three '<i4' header
    fields, then the same rows as '<f8'.
    """
    path = Path(path)
    rows = np.column_stack([model.wave_speed, model.density])
    if binary:
        with path.open("wb") as handle:
            handle.write(MODEL_MAGIC)
            handle.write(struct.pack("<3i", model.dim, model.n_cells, model.order))
            handle.write(rows.astype("<f8").tobytes())
    else:
        lines = [f"{model.dim} {model.n_cells} {model.order}"]
        lines += [" ".join(_g(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
    return path


def read_model(path: PathLike, bounds: Tuple[float, float] = DEFAULT_BOUNDS) -> ModelState:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}", path=str(path)) from exc

    try:
        if raw[:4] == MODEL_MAGIC:
            dim, n_cells, order = struct.unpack("<3i", raw[4:16])
            width = dof_count(order, dim) + 1
            rows = np.frombuffer(raw[16:], dtype="<f8").reshape(n_cells, width)
        else:
            lines = raw.decode().split("\n")
            dim, n_cells, order = (int(token) for token in lines[0].split())
            rows = np.array([[float(t) for t in line.split()] for line in lines[1:] if line.strip()])
            width = dof_count(order, dim) + 1
            if rows.shape != (n_cells, width):
                raise ValueError(f"expected {n_cells} rows of {width} values, got {rows.shape}")
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"malformed model file {path}: {exc}", path=str(path)) from exc

    if not np.all(np.isfinite(rows)):
        raise DataError(f"model file {path} holds non-finite values", path=str(path))
    try:
        return ModelState(wave_speed=rows[:, :-1], density=rows[:, -1], order=order, bounds=bounds, dim=dim)
    except (InvalidModelError, ValueError) as exc:
        raise DataError(f"model file {path}: {exc}", path=str(path)) from exc


# Measurement data

@dataclass(eq=False)
class DataSet:
    header: DataSetHeader
    values: np.ndarray   # (n_frequencies, n_sources, n_receivers) complex

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.header.shape:
            raise DataError(f"data array {self.values.shape} does not match header {self.header.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("data set holds non-finite values")

    @property
    def frequencies(self) -> List[float]:
        return list(self.header.frequencies)

    def block(self, frequency: float) -> np.ndarray:
        """(n_sources, n_receivers) data at one frequency"""
        for k, f in enumerate(self.header.frequencies):
            if np.isclose(f, frequency, rtol=1e-12, atol=0.0):
                return self.values[k]
        raise DataError(f"no data block for frequency {frequency} Hz", frequency=frequency)


def write_dataset(dataset: DataSet, path: PathLike, binary: Optional[bool] = None) -> Path:
    """
    Write the JSON header at `path` and the values next to it: CSV rows
    `source_id, receiver_id, freq_re, freq_im, value_re, value_im` (complex
    frequency in Hz, f + i s / 2 pi), or a '<c8' array above the size threshold
    """
    path = Path(path)
    if binary is None:
        binary = dataset.values.size > settings.BINARY_THRESHOLD
    values_path = path.with_suffix(".bin" if binary else ".csv")
    header = dataset.header.model_copy(
        update={"layout": "binary" if binary else "csv", "values_file": values_path.name}
    )

    if binary:
        values_path.write_bytes(dataset.values.astype("<c8").tobytes())
    else:
        shift = header.laplace_shift / (2.0 * np.pi)
        with values_path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(DATA_COLUMNS)
            for k, frequency in enumerate(header.frequencies):
                for s in range(dataset.values.shape[1]):
                    for r in range(dataset.values.shape[2]):
                        value = dataset.values[k, s, r]
                        writer.writerow([s, r, _g(frequency), _g(shift), _g(value.real), _g(value.imag)])

    path.write_text(json.dumps(header.model_dump(), indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote data set {path.name}: {dataset.values.shape} ({header.layout})")
    dataset.header = header
    return path


def read_dataset(path: PathLike) -> DataSet:
    path = Path(path)
    try:
        header = DataSetHeader.model_validate_json(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read data header {path}: {exc}", path=str(path)) from exc
    except ValueError as exc:
        raise DataError(f"malformed data header {path}: {exc}", path=str(path)) from exc

    values_path = path.parent / header.values_file
    shape = header.shape
    try:
        if header.layout == "binary":
            values = np.fromfile(values_path, dtype="<c8").astype(np.complex128)
            values = values.reshape(shape)
        else:
            values = np.zeros(shape, dtype=np.complex128)
            seen = np.zeros(shape, dtype=bool)
            with values_path.open(newline="") as handle:
                reader = csv.DictReader(handle)
                if reader.fieldnames != DATA_COLUMNS:
                    raise ValueError(f"expected columns {DATA_COLUMNS}, got {reader.fieldnames}")
                frequencies = np.asarray(header.frequencies)
                for row in reader:
                    k = int(np.argmin(np.abs(frequencies - float(row["freq_re"]))))
                    index = (k, int(row["source_id"]), int(row["receiver_id"]))
                    values[index] = complex(float(row["value_re"]), float(row["value_im"]))
                    seen[index] = True
            if not seen.all():
                missing = np.argwhere(~seen)[0].tolist()
                raise ValueError(f"missing entry (frequency, source, receiver) = {missing}")
    except OSError as exc:
        raise DataError(f"cannot read data values {values_path}: {exc}", path=str(values_path)) from exc
    except (ValueError, IndexError, KeyError) as exc:
        raise DataError(f"malformed data values {values_path}: {exc}", path=str(values_path)) from exc

    return DataSet(header=header, values=values)


# VTK export

def vertex_values(mesh: SimplicialMesh, orders: Sequence[int], coefficients: Sequence[np.ndarray]) -> np.ndarray:
    """Per-cell polynomial fields evaluated at the cell's own vertices, (N, dim+1)"""
    corners = np.vstack([np.zeros(mesh.dim), np.eye(mesh.dim)])
    return np.array([
        cell_basis(int(order), mesh.dim).values(corners) @ np.asarray(c)
        for order, c in zip(orders, coefficients)
    ])


def model_vertex_values(mesh: SimplicialMesh, model: ModelState) -> np.ndarray:
    corners = np.vstack([np.zeros(mesh.dim), np.eye(mesh.dim)])
    return model.wave_speed @ lagrange_basis(model.order, mesh.dim).values(corners).T


def write_vtk(
    mesh: SimplicialMesh,
    path: PathLike,
    point_fields: Optional[Mapping[str, np.ndarray]] = None,
    cell_fields: Optional[Mapping[str, np.ndarray]] = None,
    field_data: Optional[Mapping[str, np.ndarray]] = None,
    title: str = "hdg-fwi",
) -> Path:
    """
    Legacy ASCII unstructured grid. Vertices are duplicated per cell so
    discontinuous fields keep their per-cell values; point fields are (N, dim+1)
    arrays, complex ones are split into _re/_im/_abs.
    """
    path = Path(path)
    dim = mesh.dim
    n_local = dim + 1
    points = mesh.vertices[mesh.cells].reshape(-1, dim)
    if dim == 2:
        points = np.column_stack([points, np.zeros(len(points))])
    cell_type = 5 if dim == 2 else 10

    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(points)} double")
    lines += [" ".join(_g(x) for x in p) for p in points]
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (n_local + 1)}")
    lines += [
        " ".join([str(n_local)] + [str(cell * n_local + k) for k in range(n_local)])
        for cell in range(mesh.n_cells)
    ]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += [str(cell_type)] * mesh.n_cells

    if point_fields:
        lines.append(f"POINT_DATA {len(points)}")
        for name, values in _split_complex(point_fields):
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_g(v) for v in np.asarray(values).reshape(-1)]

    if cell_fields:
        lines.append(f"CELL_DATA {mesh.n_cells}")
        for name, values in _split_complex(cell_fields):
            values = np.asarray(values).reshape(-1)
            kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
            lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
            lines += [str(int(v)) if kind == "int" else _g(v) for v in values]

    if field_data:
        arrays = list(_split_complex(field_data))
        lines.append(f"FIELD FieldData {len(arrays)}")
        for name, values in arrays:
            values = np.atleast_2d(np.asarray(values, dtype=float))
            lines.append(f"{name} {values.shape[1]} {values.shape[0]} double")
            lines += [" ".join(_g(v) for v in row) for row in values]

    path.write_text("\n".join(lines) + "\n")
    return path


def _split_complex(fields: Mapping[str, np.ndarray]) -> Iterable[Tuple[str, np.ndarray]]:
    for name, values in fields.items():
        values = np.asarray(values)
        if np.iscomplexobj(values):
            yield f"{name}_re", values.real
            yield f"{name}_im", values.imag
            yield f"{name}_abs", np.abs(values)
        else:
            yield name, values


# Logs and metadata

def write_inversion_log(records: Sequence[IterationRecord], path: PathLike) -> Path:
    """Iteration CSV without wall times, so identical runs give identical files"""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for record in records:
            writer.writerow([
                _g(record.frequency), record.iteration, _g(record.misfit), _g(record.step),
                _g(record.gradient_norm), record.trials, int(record.accepted), int(record.restarted),
            ])
    return path


def write_timings(records: Sequence[IterationRecord], path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["frequency", "iteration", "wall_time"])
        for record in records:
            writer.writerow([_g(record.frequency), record.iteration, f"{record.wall_time:.3f}"])
    return path


def write_table(rows: Sequence[Mapping[str, Any]], path: PathLike) -> Path:
    """Generic CSV report (gradient check, convergence tables)"""
    path = Path(path)
    columns = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_g(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return path


def write_measurements(
    measurements: np.ndarray, frequency: float, laplace_shift: float, path: PathLike
) -> Path:
    """(n_receivers, n_sources) values at one frequency in the DataSet CSV layout"""
    path = Path(path)
    shift = laplace_shift / (2.0 * np.pi)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(DATA_COLUMNS)
        for s in range(measurements.shape[1]):
            for r in range(measurements.shape[0]):
                value = measurements[r, s]
                writer.writerow([s, r, _g(frequency), _g(shift), _g(value.real), _g(value.imag)])
    return path


def write_resolved_config(config: RunConfig, output_dir: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Fully resolved config plus the code version; no timestamps"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": VERSION,
        "settings": settings.get_summary(),
        "config": config.model_dump(mode="json"),
    }
    if extra:
        payload["resolved"] = extra
    path = output_dir / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_error(record: Dict[str, Any], output_dir: PathLike) -> Optional[Path]:
    try:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        path = output_dir / "error.json"
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return path
    except OSError as exc:
        logger.error(f"Could not write error record: {exc}")
        return None
