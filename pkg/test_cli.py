"""
Command line verbs, artifacts and exit codes
"""

import json

import pytest

import main as cli
from main import build_parser, main


def _config(tmp_path, **changes):
    config = {
        "mesh": {"extent": [[0, 1], [0, 1]], "cells_per_axis": [3, 3]},
        "model": {"wave_speed": 1.0, "density": 1.0, "bounds": [0.5, 5.0]},
        "frequencies": [1.0],
        "laplace_shift": 0.2,
        "acquisition": {"source_line": {"count": 2}, "receiver_line": {"count": 3}},
        "discretization": {"order": 2},
        "synthesis": {"truth": {"wave_speed": 1.0, "density": 1.0, "bounds": [0.5, 5.0],
                                "inclusions": [{"center": [0.5, 0.4], "radius": 0.25, "wave_speed": 1.3}]}},
        "inversion": {"iterations": 2},
        "gradcheck": {"cells": 5, "steps": [1e-3, 1e-4, 1e-5]},
    }
    config.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _record(err: str) -> dict:
    """The error record is the last stderr line; log lines may precede it"""
    return json.loads(err.strip().splitlines()[-1])


def test_mesh_info_two_triangles(tmp_path, capsys):
    config = _config(
        tmp_path,
        mesh={"extent": [[0, 1], [0, 1]], "cells_per_axis": [1, 1]},
        discretization={"order": 3},
    )
    code, out, _ = _run(capsys, "mesh-info", "--config", config, "--output-dir", str(tmp_path / "out"))
    assert code == 0
    summary = json.loads(out)
    assert summary["trace_dofs"] == 20
    assert summary["volume_dofs_per_unknown"] == 20
    assert (tmp_path / "out" / "resolved_config.json").exists()


def test_forward_writes_measurements_and_fields(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = _run(capsys, "forward", "--config", _config(tmp_path), "--output-dir", str(out_dir))
    assert code == 0
    assert json.loads(out)["factorizations"] == 1
    rows = (out_dir / "measurements_f0.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3
    assert "SCALARS pressure_s1_abs" in (out_dir / "field_f0.vtk").read_text()


def test_synthesize_is_reproducible(tmp_path, capsys):
    config = _config(tmp_path, synthesis={"snr_db": 10.0})
    for run in ("a", "b"):
        code, _, _ = _run(capsys, "synthesize", "--config", config, "--seed", "3", "--output-dir", str(tmp_path / run))
        assert code == 0
    for name in ("data.json", "data.csv", "truth.model"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = json.loads((tmp_path / "a" / "data.json").read_text())
    assert header["seed"] == 3 and header["snr_db"] == 10.0


def test_gradcheck_on_small_mesh(tmp_path, capsys):
    config = _config(tmp_path, mesh={"extent": [[0, 1], [0, 1]], "cells_per_axis": [2, 2]})
    code, out, _ = _run(capsys, "gradcheck", "--config", config, "--output-dir", str(tmp_path / "out"))
    assert code == 0
    assert json.loads(out)["min_relative_error"] < 1e-5
    assert (tmp_path / "out" / "gradcheck.csv").read_text().startswith("step,relative_error")
    assert (tmp_path / "out" / "gradient.vtk").exists()


def test_invert_synthesizes_missing_data(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = _run(capsys, "invert", "--config", _config(tmp_path), "--output-dir", str(out_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["final_misfit"] <= summary["initial_misfit"]
    for name in ("data.json", "final.model", "inversion_log.csv", "timings.csv", "final_model.vtk"):
        assert (out_dir / name).exists()


def test_invert_with_mismatched_data_is_io_error(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert _run(capsys, "synthesize", "--config", _config(tmp_path), "--output-dir", str(data_dir))[0] == 0
    config = _config(
        tmp_path, frequencies=[2.0], inversion={"iterations": 1, "data_path": str(data_dir / "data.json")}
    )
    code, _, err = _run(capsys, "invert", "--config", config, "--output-dir", str(tmp_path / "out"))
    assert code == 4
    assert _record(err)["error_type"] == "DataError"


def test_config_error_exit_code(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, _, err = _run(capsys, "forward", "--config", _config(tmp_path, unknown_key=1), "--output-dir", str(out_dir))
    assert code == 2
    record = _record(err)
    assert record["error_type"] == "ConfigError"
    assert record["details"]["key"] == "unknown_key"
    assert json.loads((out_dir / "error.json").read_text()) == record


def test_numerical_error_exit_code(tmp_path, capsys):
    config = _config(tmp_path, boundary={"tags": {"top": {"kind": "robin", "alpha": 1.0, "beta": 0.0}}})
    code, _, err = _run(capsys, "forward", "--config", config, "--output-dir", str(tmp_path / "out"))
    assert code == 3
    assert _record(err)["error_type"] == "BoundaryConditionError"


def test_missing_config_is_io_error(tmp_path, capsys):
    code, _, err = _run(capsys, "mesh-info", "--config", str(tmp_path / "absent.json"))
    assert code == 4
    assert _record(err)["exit_code"] == 4


def test_unknown_verb_is_rejected():
    with pytest.raises(SystemExit):
        main(["migrate", "--config", "x.json"])


def test_inverse_crime_run_drives_misfit_to_zero(tmp_path, capsys):
    """Noise-free data from the identical discretization: the truth is reachable"""
    config = _config(
        tmp_path,
        mesh={"extent": [[0, 1], [0, 1]], "cells_per_axis": [1, 1]},
        # no absorbing faces, whose impedance would be frozen at the starting model
        boundary={"default": {"kind": "neumann"}, "tags": {"top": {"kind": "dirichlet"}}},
        acquisition={
            "sources": [{"position": [0.3, 0.8]}, {"position": [0.7, 0.2]}],
            "receivers": [[0.2, 0.5], [0.5, 0.2], [0.8, 0.5], [0.5, 0.8], [0.25, 0.35], [0.75, 0.65]],
        },
        synthesis={"truth": {"wave_speed": 1.0, "density": 1.0, "bounds": [0.5, 5.0], "gradient": [0.1, 0.0]}},
        inversion={"iterations": 200, "checkpoint_every": 0},
    )
    code, out, _ = _run(capsys, "invert", "--config", config, "--output-dir", str(tmp_path / "out"))
    assert code == 0
    summary = json.loads(out)
    assert summary["initial_misfit"] > 0
    assert summary["final_misfit"] < 1e-10 * summary["initial_misfit"]


def test_inclusion_center_of_wrong_dimension(tmp_path, capsys):
    model = {"wave_speed": 1.0, "density": 1.0, "bounds": [0.5, 5.0],
             "inclusions": [{"center": [0.5, 0.4, 0.1], "radius": 0.2, "wave_speed": 1.3}]}
    out_dir = tmp_path / "out"
    code, _, err = _run(capsys, "forward", "--config", _config(tmp_path, model=model), "--output-dir", str(out_dir))
    assert code == 2
    record = _record(err)
    assert record["error_type"] == "ConfigError"
    assert record["details"]["key"] == "model.inclusions.0.center"
    assert json.loads((out_dir / "error.json").read_text()) == record


@pytest.mark.parametrize("model", [
    {"wave_speed": 1.0, "density": 1.0, "bounds": [0.5, 5.0], "gradient": [0.0, -3.0]},
    {"wave_speed": 6.0, "density": 1.0, "bounds": [0.5, 5.0]},
])
def test_wave_speed_outside_bounds_is_config_error(tmp_path, capsys, model):
    code, _, err = _run(capsys, "forward", "--config", _config(tmp_path, model=model), "--output-dir", str(tmp_path / "out"))
    assert code == 2
    record = _record(err)
    assert record["error_type"] == "InvalidModelError"
    assert "wave_speed" in record["details"]


def test_unexpected_value_error_is_numerical(tmp_path, capsys, monkeypatch):
    def broken(config, output_dir):
        raise ValueError("operands could not be broadcast together")

    monkeypatch.setitem(cli.COMMANDS, "forward", broken)
    out_dir = tmp_path / "out"
    code, _, err = _run(capsys, "forward", "--config", _config(tmp_path), "--output-dir", str(out_dir))
    assert code == 3
    record = _record(err)
    assert record["error_type"] == "NumericalError"
    assert record["details"]["cause"] == "ValueError"
    assert (out_dir / "error.json").exists()


def test_help_describes_every_verb():
    # argparse wraps long help lines
    text = " ".join(build_parser().format_help().split())
    for name, func in cli.COMMANDS.items():
        assert func.__doc__
        assert name in text
        assert func.__doc__ in text
