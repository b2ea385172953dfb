import csv
import json
import subprocess
import sys

import pytest

from fracbin.cli import EXIT_INVALID, EXIT_OK, EXIT_VIOLATION, main, parse_grid


def _run(tmp_path, *argv):
    out = tmp_path / argv[0]
    code = main([*argv, "--out", str(out)])
    return code, out


def _record(out, name):
    return json.loads((out / f"{name}_run.json").read_text())


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- grid parsing ----------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("64", [64]),
    ("1:4", [1, 2, 3, 4]),
    ("10:30:10", [10, 20, 30]),
    ("dyadic:6:8", [64, 128, 256]),
])
def test_parse_grid(text, expected):
    assert parse_grid(text) == expected


@pytest.mark.parametrize("text", ["", "a:b", "5:1", "1:5:0", "dyadic:3", "dyadic:8:6", "0:3", "1:2:3:4"])
def test_parse_grid_rejects(text):
    import argparse

    with pytest.raises(argparse.ArgumentTypeError):
        parse_grid(text)


# -- invalid configurations ----------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["census", "--H", "0.4"],
    ["census", "--sigma", "-1"],
    ["critical", "--gamma", "1.5"],
    ["verify", "--N", "64"],
    ["verify", "--N", "64", "--lambda", "1.2"],
    ["coeffs", "--n-max", "100000"],
    ["aa1", "--p", "0.7"],
    ["census", "--threads", "0"],
])
def test_invalid_parameters_exit_2(tmp_path, argv):
    code, out = _run(tmp_path, *argv)
    assert code == EXIT_INVALID
    assert not (out / f"{argv[0]}_run.json").exists()


def test_bad_grid_is_argparse_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["census", "--N-grid", "dyadic:x:3", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_INVALID


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FRACBIN_THREADS", "many")
    assert _run(tmp_path, "census", "--N-grid", "1:3")[0] == EXIT_INVALID


# -- subcommands -----------------------------------------------------------------------

def test_coeffs(tmp_path):
    code, out = _run(tmp_path, "coeffs", "--n-max", "30")
    assert code == EXIT_OK
    rec = _record(out, "coeffs")
    assert rec["result"]["bounds_passed"] and rec["exit_code"] == 0
    assert rec["constants"]["c_X"] == pytest.approx(2.2819085547349127, rel=1e-12)
    rows = _csv(out / "coeffs_j.csv")
    assert rows[0] == ["n", "i", "j"] and len(rows) == 1 + 30 * 29 // 2
    assert len(_csv(out / "coeffs_g.csv")) == 31


def test_critical(tmp_path):
    code, out = _run(tmp_path, "critical", "--N-grid", "16:64:16")
    assert code == EXIT_OK
    rows = _csv(out / "thresholds.csv")
    assert rows[0] == ["N", "lambda_phi_NN", "lambda_psi", "lowbd", "exact_one_step", "nH"]
    psi = [float(r[2]) for r in rows[1:]]
    assert all(b >= a for a, b in zip(psi, psi[1:]))
    for r in rows[1:]:
        assert float(r[3]) == pytest.approx(float(r[4]), rel=1e-12)
        assert r[5] == "5"
    assert _record(out, "critical")["result"]["lambda_psi_monotone"]


def test_census_byte_identical(tmp_path):
    args = ["census", "--N-grid", "1:14", "--seed", "4"]
    code_a, _ = _run(tmp_path / "a", *args)
    code_b, _ = _run(tmp_path / "b", *args, "--threads", "2")
    assert code_a == code_b == EXIT_OK
    a = (tmp_path / "a" / "census" / "census.csv").read_bytes()
    b = (tmp_path / "b" / "census" / "census.csv").read_bytes()
    assert a == b
    rows = _csv(tmp_path / "a" / "census" / "census.csv")
    assert all(r[2] == r[3] for r in rows[1:])


def test_census_monte_carlo_levels(tmp_path):
    code, out = _run(tmp_path, "census", "--N-grid", "30", "--mc-samples", "5000", "--seed", "1")
    assert code == EXIT_OK
    row = _csv(out / "census.csv")[1]
    assert row[1] == "monte_carlo" and row[7] == "5000" and row[8] == "1"


def test_aa1_default_grid_reports_failure(tmp_path):
    # on 2**6..2**14 the gain level C_N is negative, so the run flags a violation
    code, out = _run(tmp_path, "aa1")
    assert code == EXIT_VIOLATION
    res = _record(out, "aa1")["result"]
    assert res["all_admissible"] and not res["C_positive"]
    assert len(_csv(out / "aa1.csv")) == 10


def test_aa1_extended_grid_passes(tmp_path):
    code, out = _run(tmp_path, "aa1", "--N-grid", "dyadic:24:28", "--n-H", "5")
    assert code == EXIT_OK
    res = _record(out, "aa1")["result"]
    assert res["probability_matches"] and res["C_positive"]


def test_verify_sottinen(tmp_path):
    code, out = _run(tmp_path, "verify", "--N", "64", "--lambda", "0.05")
    assert code == EXIT_OK
    cert = _record(out, "verify")["result"]["certificate"]
    assert cert["is_arbitrage"] and cert["profit_probability"] == f"1/{2 ** 63}"


def test_verify_gamma_above_and_below_threshold(tmp_path):
    code, out = _run(tmp_path / "hi", "verify", "--N", str(2 ** 26), "--gamma", "0.25", "--lambda", "2e-4")
    assert code == EXIT_VIOLATION
    res = _record(out, "verify")["result"]
    assert res["witness_prefix"] == f"d^{2 ** 24}"
    assert res["certificate"]["witness_path"] == "u"
    assert res["certificate"]["min_terminal_value"] < 0
    code, out = _run(tmp_path / "lo", "verify", "--N", str(2 ** 26), "--gamma", "0.25", "--lambda", "5e-5")
    assert code == EXIT_OK
    assert _record(out, "verify")["result"]["certificate"]["is_arbitrage"]


def test_verify_gamma_without_trade(tmp_path):
    assert _run(tmp_path, "verify", "--N", "4096", "--gamma", "0.25", "--lambda", "0")[0] == EXIT_INVALID


def test_variance(tmp_path):
    code, out = _run(tmp_path, "variance", "--N-grid", "512:2048:512")
    assert code == EXIT_OK
    rows = _csv(out / "variance.csv")
    assert rows[0] == ["N", "V", "abs_dev"]
    dev = [float(r[2]) for r in rows[1:]]
    assert dev == sorted(dev, reverse=True)


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "fracbin", "census", "--N-grid", "1:3",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert done.returncode == 0
    assert (tmp_path / "census_run.json").exists()
    bad = subprocess.run([sys.executable, "-m", "fracbin", "census", "--H", "2"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert bad.returncode == 2 and "error" in bad.stderr
