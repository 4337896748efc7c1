import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from roughmaps import cli, io


def write_cfg(path, **kw):
    base = {"n": 17}
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return str(path)


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- io -----------------------------------------------------------------------


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, -2.5e17):
        assert float(io.fmt(x)) == x
    assert io.fmt(np.float32(0.5)) == "0.5"
    assert io.fmt(True) == "true" and io.fmt(np.int64(3)) == "3"


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X, V = rng.random((4, 5, 3)), rng.standard_normal((4, 5, 2))
    io.write_field(tmp_path / "f.txt", X, V, {"kind": "test"})
    X2, V2, meta = io.read_field(tmp_path / "f.txt")
    np.testing.assert_array_equal(X2, X.reshape(-1, 3))
    np.testing.assert_array_equal(V2, V.reshape(-1, 2))
    assert meta["kind"] == "test" and meta["nodes"] == "20"


def test_csv_header_and_line_endings(tmp_path):
    p = tmp_path / "t.csv"
    io.write_csv(p, ["a", "b"], [[1, 0.5], [2, 0.25]], kind="trace")
    raw = p.read_bytes()
    assert raw.startswith(b"# roughmaps-csv v1 trace\n") and b"\r" not in raw
    kind, cols, rows = io.read_csv(p)
    assert kind == "trace" and cols == ["a", "b"] and rows[1] == ["2", "0.25"]


def test_read_csv_rejects_unversioned(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        io.read_csv(p)


def test_parse_kv():
    assert io.parse_kv("a = 1  # note\n\n# c\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(io.ConfigSyntaxError):
        io.parse_kv("a = 1\na = 2\n")
    with pytest.raises(io.ConfigSyntaxError):
        io.parse_kv("just words\n")


def test_report_text_is_sorted_and_flat():
    txt = io.report_text({"b": 1, "a": {"y": [1, 2], "x": None}})
    assert txt == "a.x = none\na.y = 1,2\nb = 1\n"


# -- configuration --------------------------------------------------------------


def test_config_round_trip():
    cfg = cli.ExperimentConfig(n=33, generator="step_geodesic", data_params={"angle": 0.3}, flip_curvature=True)
    again = cli.ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg


@pytest.mark.parametrize(
    "text,key",
    [
        ("nn = 3\n", "nn"),
        ("n = 2\n", "n"),
        ("sigma = 1.5\n", "sigma"),
        ("damping = fast\n", "damping"),
        ("data.bogus = 1\n", "data.bogus"),
    ],
)
def test_invalid_config_names_key(text, key):
    with pytest.raises(cli.InvalidConfig) as exc:
        cli.ExperimentConfig.from_text(text)
    assert exc.value.key == key
    assert repr(key) in str(exc.value)


def test_cli_invalid_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n = 17\nresidual_tol = 1e-8\n")
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "residual_tol" in capsys.readouterr().err


def test_cli_constant_data_single_iteration(tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", generator="constant")
    out = tmp_path / "o"
    assert cli.main(["solve", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    _, cols, rows = io.read_csv(out / "trace.csv")
    assert len(rows) == 1
    summary = io.read_kv(out / "summary.txt")
    assert summary["exit_code"] == "0"


def test_cli_nonconvergence_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", max_iterations=1, **{"data.amplitude": 0.05})
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_NONCONVERGENCE


@pytest.mark.parametrize("command", ["extend", "norms", "verify", "perturb"])
def test_cli_other_commands(tmp_path, command):
    cfg = write_cfg(tmp_path / "c.txt", box_n=9, **{"data.amplitude": 0.05})
    out = tmp_path / "o"
    assert cli.main([command, "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    assert (out / "summary.txt").exists() and (out / "config.txt").exists()


def test_sweep_export_sorted_and_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", sweep_values="0.1,0.02,0.05")
    digests = []
    for i in range(2):
        out = tmp_path / f"s{i}"
        assert cli.main(["sweep", "--config", cfg, "--out", str(out), "--seed", "3"]) == cli.EXIT_OK
        _, cols, rows = io.read_csv(out / "sweep.csv")
        amps = [float(r[cols.index("amplitude")]) for r in rows]
        assert amps == sorted(amps)
        trend = io.read_kv(out / "sweep_summary.txt")
        assert trend["monotone_theta"] == "true"
        digests.append(digest(out / "sweep.csv"))
    assert digests[0] == digests[1]
    assert cli.main(["export", "--out", str(tmp_path / "s0")]) == cli.EXIT_OK


def test_export_without_runs(tmp_path, capsys):
    with pytest.raises(cli.MissingArtifacts):
        cli.export_results(str(tmp_path))
    assert cli.main(["export", "--out", str(tmp_path)]) == 1
    assert "no run summaries" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", generator="constant")
    r = subprocess.run(
        [sys.executable, "-m", "roughmaps.cli", "solve", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
        env={**os.environ, "ROUGHMAPS_DISABLE_NUMBA": "1"},
    )
    assert r.returncode == 0, r.stderr
