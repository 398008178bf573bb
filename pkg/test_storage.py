"""
Model files, measurement data sets, VTK export and run metadata
"""

import json

import numpy as np
import pytest

from app.config import VERSION
from app.errors import DataError, HDGError, InvalidModelError
from app.medium import constant_model, model_from_function
from app.models import DataSetHeader, IterationRecord, parse_config
from app.storage import (
    DataSet,
    model_vertex_values,
    read_dataset,
    read_model,
    write_dataset,
    write_error,
    write_inversion_log,
    write_measurements,
    write_model,
    write_resolved_config,
    write_timings,
    write_vtk,
)


def _dataset(n_f=2, n_s=3, n_r=4, seed=0):
    rng = np.random.default_rng(seed)
    header = DataSetHeader(
        frequencies=[1.0, 2.5][:n_f],
        laplace_shift=0.5,
        sources=[[0.1 * k, 0.9] for k in range(n_s)],
        amplitudes=[(1.0, 0.0)] * n_s,
        receivers=[[0.2 * k, 0.8] for k in range(n_r)],
        values_file="",
        seed=seed,
    )
    values = rng.standard_normal((n_f, n_s, n_r)) + 1j * rng.standard_normal((n_f, n_s, n_r))
    return DataSet(header=header, values=values)


@pytest.mark.parametrize("binary", [False, True])
def test_model_file_round_trip(tmp_path, square_mesh, binary):
    model = model_from_function(square_mesh, lambda x: 1500.0 + 100.0 * x[:, 1] / 3.0, density=1000.0, order=1)
    path = write_model(model, tmp_path / "model.txt", binary=binary)
    loaded = read_model(path)
    np.testing.assert_array_equal(loaded.wave_speed, model.wave_speed)
    np.testing.assert_array_equal(loaded.density, model.density)
    assert (loaded.order, loaded.dim) == (1, 2)
    assert loaded.fingerprint == model.fingerprint


def test_model_file_header(tmp_path, two_triangles):
    path = write_model(constant_model(two_triangles, 2.0, 3.0), tmp_path / "model.txt")
    assert path.read_text().splitlines() == ["2 2 0", "2 3", "2 3"]


def test_malformed_model_file(tmp_path):
    path = tmp_path / "bad.model"
    path.write_text("2 3 0\n1 1\n")
    with pytest.raises(DataError):
        read_model(path)
    with pytest.raises(DataError):
        read_model(tmp_path / "missing.model")


def test_model_file_with_negative_speed(tmp_path):
    path = tmp_path / "negative.model"
    path.write_text("2 2 0\n1.5 1\n-0.5 1\n")
    with pytest.raises(DataError) as info:
        read_model(path)
    assert "wave speed" in str(info.value)


@pytest.mark.parametrize("speed", [0.0, -1.0, float("nan"), float("inf")])
def test_model_state_rejects_invalid_speed(two_triangles, speed):
    with pytest.raises(InvalidModelError) as info:
        constant_model(two_triangles, speed)
    assert info.value.exit_code == 2


def test_check_bounds(two_triangles):
    model = constant_model(two_triangles, 2.0, bounds=(1.0, 3.0))
    assert model.check_bounds() is model
    with pytest.raises(InvalidModelError) as info:
        constant_model(two_triangles, 4.0, bounds=(1.0, 3.0)).check_bounds()
    assert info.value.details["bounds"] == "1,3"
    assert info.value.details["wave_speed"] == 4.0


def test_csv_dataset_round_trip(tmp_path):
    dataset = _dataset()
    path = write_dataset(dataset, tmp_path / "data.json", binary=False)
    loaded = read_dataset(path)
    np.testing.assert_array_equal(loaded.values, dataset.values)
    assert loaded.header.layout == "csv"
    assert loaded.header.values_file == "data.csv"

    rows = (tmp_path / "data.csv").read_text().splitlines()
    assert rows[0] == "source_id,receiver_id,freq_re,freq_im,value_re,value_im"
    assert len(rows) == 1 + 2 * 3 * 4
    assert rows[1].split(",")[2:4] == ["1", format(0.5 / (2.0 * np.pi), ".17g")]


def test_binary_dataset_uses_single_precision(tmp_path):
    dataset = _dataset()
    loaded = read_dataset(write_dataset(dataset, tmp_path / "data.json", binary=True))
    assert loaded.header.layout == "binary"
    np.testing.assert_allclose(loaded.values, dataset.values.astype(np.complex64), rtol=0)
    assert (tmp_path / "data.bin").stat().st_size == dataset.values.size * 8


def test_dataset_block_lookup():
    dataset = _dataset()
    np.testing.assert_array_equal(dataset.block(2.5), dataset.values[1])
    with pytest.raises(DataError):
        dataset.block(3.0)


def test_dataset_rejects_bad_values():
    header = _dataset().header
    with pytest.raises(DataError):
        DataSet(header=header, values=np.zeros((2, 3, 5)))
    values = np.zeros((2, 3, 4), dtype=complex)
    values[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        DataSet(header=header, values=values)


def test_dataset_with_missing_rows(tmp_path):
    path = write_dataset(_dataset(), tmp_path / "data.json", binary=False)
    csv_path = tmp_path / "data.csv"
    csv_path.write_text("\n".join(csv_path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(DataError):
        read_dataset(path)


def test_measurements_csv(tmp_path):
    measurements = np.array([[1.0 + 2.0j, 3.0], [4.0j, 5.0]])
    rows = write_measurements(measurements, 2.0, 0.0, tmp_path / "m.csv").read_text().splitlines()
    assert rows[1] == "0,0,2,0,1,2"
    assert rows[2] == "0,1,2,0,0,4"
    assert len(rows) == 5


def test_vtk_export(tmp_path, two_triangles):
    model = model_from_function(two_triangles, lambda x: 1.0 + x[:, 0], order=1)
    corner_values = model_vertex_values(two_triangles, model)
    np.testing.assert_allclose(corner_values, 1.0 + two_triangles.vertices[two_triangles.cells][:, :, 0])

    path = write_vtk(
        two_triangles,
        tmp_path / "model.vtk",
        point_fields={"wave_speed": corner_values, "pressure": corner_values * 1j},
        cell_fields={"order": np.array([1, 2])},
        field_data={"gradient": np.ones((2, 3))},
    )
    text = path.read_text()
    assert "POINTS 6 double" in text
    assert "CELL_TYPES 2" in text
    for name in ("wave_speed", "pressure_re", "pressure_im", "pressure_abs", "order int"):
        assert f"SCALARS {name}" in text
    assert "gradient 3 2 double" in text


def test_logs_keep_wall_time_separate(tmp_path):
    records = [
        IterationRecord(frequency=1.0, iteration=0, misfit=2.0, step=0.0, gradient_norm=1.0,
                        trials=0, accepted=True, restarted=False, wall_time=0.25),
        IterationRecord(frequency=1.0, iteration=1, misfit=1.0, step=0.1, gradient_norm=0.5,
                        trials=2, accepted=True, restarted=True, wall_time=0.5),
    ]
    log = write_inversion_log(records, tmp_path / "log.csv").read_text().splitlines()
    assert log[2] == "1,1,1,0.10000000000000001,0.5,2,1,1"
    timings = write_timings(records, tmp_path / "timings.csv").read_text().splitlines()
    assert timings[1] == "1,0,0.250"


def test_resolved_config_records_version(tmp_path):
    config = parse_config({
        "mesh": {"extent": [[0, 1], [0, 1]], "cells_per_axis": [2, 2]},
        "frequencies": [5.0],
        "acquisition": {"receivers": [[0.5, 0.5]]},
    })
    payload = json.loads(write_resolved_config(config, tmp_path, {"command": "forward"}).read_text())
    assert payload["version"] == VERSION
    assert payload["config"]["frequencies"] == [5.0]
    assert payload["resolved"] == {"command": "forward"}


def test_error_record(tmp_path):
    error = DataError("missing block", frequency=2.0, sigma=1j)
    write_error(error.to_record(), tmp_path)
    record = json.loads((tmp_path / "error.json").read_text())
    assert record["error_type"] == "DataError"
    assert record["exit_code"] == 4
    assert record["details"] == {"frequency": 2.0, "sigma": [0.0, 1.0]}
    assert isinstance(error, HDGError)
