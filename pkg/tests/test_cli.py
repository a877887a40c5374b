import csv
import io
import json

import pytest

from qrambench import cli
from qrambench.benchmark import classify_region
from qrambench.cli import main, parse_int_list


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def table_csv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("# address,value\n" + "".join(f"{a},{a % 3 == 0:d}\n" for a in range(8)))
    return path


def test_parse_int_list():
    assert parse_int_list("6..10") == [6, 7, 8, 9, 10]
    assert parse_int_list("6..12:3,20") == [6, 9, 12, 20]
    with pytest.raises(cli.ConfigError):
        parse_int_list("")


def test_noiseless_query_has_unit_fidelity(capsys, table_csv):
    code, out, _ = run(capsys, "query", "--n", "3", "--epsilon", "0", "--input", "uniform", "--table",
                       str(table_csv), "--shots", "2", "--seed", "1")
    assert code == 0
    res = json.loads(out)
    assert res["fidelity"] == 1.0 and res["schema_version"] == "1"
    assert res["final_state"]["branches"] == 8


def test_query_is_deterministic_and_mode_independent(capsys):
    args = ["query", "--n", "5", "--epsilon", "1e-2", "--shots", "40", "--seed", "7"]
    _, a, _ = run(capsys, *args, "--mode", "pruned")
    _, b, _ = run(capsys, *args, "--mode", "pruned")
    _, c, _ = run(capsys, *args, "--mode", "full")
    assert a == b
    ra, rc = json.loads(a), json.loads(c)
    for key in ("fidelity", "fidelity_stderr", "reliable_fraction", "fault_log"):
        assert ra[key] == rc[key]


def test_workers_env_gives_same_output(capsys, monkeypatch):
    args = ["query", "--n", "3", "--epsilon", "2e-2", "--shots", "12", "--seed", "3"]
    _, serial, _ = run(capsys, *args)
    monkeypatch.setenv("QRAMBENCH_WORKERS", "2")
    _, parallel, _ = run(capsys, *args)
    assert serial == parallel


def test_generated_seed_is_echoed(capsys):
    code, out, _ = run(capsys, "query", "--n", "2", "--shots", "1")
    res = json.loads(out)
    assert code == 0 and res["seed_generated"] and isinstance(res["config"]["seed"], int)


def test_config_file_and_overrides(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 2, "epsilon": 0.0, "shots": 2}))
    code, _, err = run(capsys, "query", "--config", str(cfg))
    assert code == 2 and "seed" in err
    cfg.write_text(json.dumps({"n": 2, "epsilon": 0.0, "shots": 2, "seed": 5}))
    code, out, _ = run(capsys, "query", "--config", str(cfg), "--n", "3")
    assert code == 0 and json.loads(out)["config"]["n"] == 3
    cfg.write_text(json.dumps({"seed": 1, "colour": "blue"}))
    assert run(capsys, "query", "--config", str(cfg))[0] == 2


@pytest.mark.parametrize("argv", [
    ["ef", "--T", "0"],
    ["query", "--table", "missing.csv"],
    ["query", "--config", "missing.json"],
    ["query", "--n", "0"],
    ["query", "--channel", "qubit-depolarizing", "--seed", "1"],
    ["query", "--input", "haar:99", "--n", "3", "--seed", "1"],
    ["query", "--epsilon", "2", "--seed", "1"],
    ["bench", "--n", "3", "--branch-size", "32", "--seed", "1"],
    ["fit"],
    ["query", "--bogus"],
])
def test_config_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_runtime_error_exit_3(capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated failure")
    monkeypatch.setattr(cli, "run_noisy", boom)
    code, _, err = run(capsys, "query", "--n", "2", "--shots", "1", "--seed", "1")
    assert code == 3 and "simulated failure" in err


def test_amplitude_file_input(capsys, tmp_path):
    amps = tmp_path / "amps.json"
    amps.write_text(json.dumps([{"address": 1, "re": 3.0}, {"address": 2, "data": 1, "im": 4.0}]))
    code, out, _ = run(capsys, "query", "--n", "2", "--input", str(amps), "--shots", "1", "--seed", "2")
    res = json.loads(out)
    assert code == 0 and res["fidelity"] == 1.0 and res["final_state"]["branches"] == 2


def test_ef_identity_ratio_column(capsys):
    code, out, _ = run(capsys, "ef", "--op", "identity", "--epsilon", "1e-3", "--T", "1", "--states", "4",
                       "--shots", "200", "--rare-event", "--seed", "1")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 1
    assert 1.6 < float(rows[0]["ratio"]) < 2.4


def test_ef_qram_levels(capsys):
    code, out, _ = run(capsys, "ef", "--op", "qram", "--n", "3", "--epsilon", "1e-2", "--T", "1,2",
                       "--states", "2", "--shots", "10", "--seed", "4")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [int(r["T"]) for r in rows] == [1, 2]


def test_bench_regions_and_summary(capsys, tmp_path):
    summary = tmp_path / "s.json"
    code, out, _ = run(capsys, "bench", "--n", "6..8", "--p", "1e-6,1e-3", "--branch-size", "4", "--shots", "3",
                       "--repetitions", "5", "--mode", "both", "--summary", str(summary), "--seed", "2")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 3 + 2 * 3 * 2
    for r in rows:
        assert r["region"] == classify_region(int(r["n"]), float(r["epsilon"])).value
    s = json.loads(summary.read_text())
    assert s["schema_version"] == "1" and len(s["mode_ratios"]) == 6


def test_fit_reports_limits(capsys, tmp_path):
    path = tmp_path / "base.csv"
    path.write_text("n,infidelity\n" + "".join(f"{n},{0.001 * n ** 2}\n" for n in range(4, 11)))
    code, out, _ = run(capsys, "fit", "--input", str(path))
    res = json.loads(out)
    assert code == 0
    assert res["exponent"] == pytest.approx(2.0) and res["prefactor"] == pytest.approx(0.001)
    assert res["eps_max_original"] == 0.125 and res["eps_max_refined"] == 0.25
    # 0.001 n^2 <= 0.125 for n <= 11; <= 0.25 for n <= 15
    assert (res["n_max_original"], res["n_max_refined"]) == (11, 15)


def test_validate_quick(capsys):
    code, out, _ = run(capsys, "validate", "--quick")
    res = json.loads(out)
    assert code == 0 and res["passed"] and len(res["checks"]) >= 10
