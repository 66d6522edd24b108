import json
import subprocess
import sys

import numpy as np
import pytest

from ddpquant import bpdata
from ddpquant.cli import _read_data_csv, main
from ddpquant.simbench import SimConfig, simulate_dataset


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "ddpquant.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


def _fit_tiny(tmp_path, seed=1, n=30, draws=25, burnin=5, dist="t1"):
    data = tmp_path / "data.csv"
    chain = tmp_path / "chain.jsonl"
    r = run_cli("simulate", "--dist", dist, "--n", str(n),
                "--seed", "7", "--out", str(data))
    assert r.returncode == 0, r.stderr
    r = run_cli("fit", "--data", str(data), "--draws", str(draws),
                "--burnin", str(burnin), "--seed", str(seed),
                "--out", str(chain))
    assert r.returncode == 0, r.stderr
    return data, chain


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_shape_and_round_trip(tmp_path):
    out = tmp_path / "d.csv"
    r = run_cli("simulate", "--dist", "t1", "--n", "5", "--seed", "7",
                "--out", str(out))
    assert r.returncode == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x,y1,y2"
    assert len(lines) == 6
    ds = _read_data_csv(str(out))
    xs, ys = simulate_dataset(SimConfig(n=5, dist="t1", seed=7))
    flat_x, flat_y = ds.to_pairs()
    order = np.argsort(xs, kind="stable")
    assert np.array_equal(flat_x, xs[order])
    assert np.array_equal(flat_y, ys[order])


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run_cli("simulate", "--dist", "gamma", "--n", "50",
                       "--seed", "3", "--out", str(out)).returncode == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_gamma_large_correlation(tmp_path):
    out = tmp_path / "g.csv"
    assert run_cli("simulate", "--dist", "gamma", "--n", "100000",
                   "--seed", "5", "--out", str(out)).returncode == 0
    ds = _read_data_csv(str(out))
    _, y = ds.to_pairs()
    # subtract the regression part: errors = y - (1 + 2x^2, x^2)
    x, _ = ds.to_pairs()
    eps = y - np.stack([1 + 2 * x**2, x**2], axis=1)
    corr = np.corrcoef(eps[:, 0], eps[:, 1])[0, 1]
    assert abs(corr - 0.7) < 0.01


def test_simulate_rejects_bad_flags(tmp_path):
    r = run_cli("simulate", "--dist", "weird", "--n", "5",
                "--out", str(tmp_path / "x.csv"))
    assert r.returncode == 2
    r = run_cli("simulate", "--dist", "t1", "--n", "1",
                "--out", str(tmp_path / "x.csv"))
    assert r.returncode == 2
    assert r.stderr.startswith("error:")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_draw_count_and_determinism(tmp_path):
    data, chain = _fit_tiny(tmp_path, draws=10, burnin=5)
    lines = chain.read_text().splitlines()
    assert len(lines) == 10
    chain2 = tmp_path / "chain2.jsonl"
    r = run_cli("fit", "--data", str(data), "--draws", "10", "--burnin", "5",
                "--seed", "1", "--out", str(chain2))
    assert r.returncode == 0
    # first fit above used draws=10 burnin=5 seed=1 as well
    assert chain.read_bytes() == chain2.read_bytes()


def test_fit_defaults_are_standard_prior_block(tmp_path):
    _, chain = _fit_tiny(tmp_path, draws=5)
    meta = json.loads((tmp_path / "chain.jsonl.meta.json").read_text())
    h = meta["hyper"]
    assert h["N"] == 20 and h["J"] == 20
    assert h["c0"] == [1.0, 1.0] and h["c1"] == [2.0, 0.5]
    assert h["Sigma0"] == [[10.0, 0.0], [0.0, 10.0]]
    assert h["gamma"] == 10.0 and h["lambda"] == 0.5
    assert h["c_eta"] == [0.0, 0.0] and h["s_eta2"] == 10.0
    assert h["a"] == 1.0 and h["b"] == 1.0
    assert h["a_M1"] == 1.0 and h["b_M1"] == 1.0
    assert h["a_M2"] == 1.0 and h["b_M2"] == 1.0
    assert meta["diagnostics"]["n_draws"] == 5
    assert len(meta["diagnostics"]["loglik_trace"]) == 5


def test_fit_malformed_csv_names_line(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y1,y2\n0.0,1.0,2.0\n0.5,oops,3.0\n")
    r = run_cli("fit", "--data", str(bad), "--draws", "5",
                "--out", str(tmp_path / "c.jsonl"))
    assert r.returncode == 2
    assert "line 3" in r.stderr


def test_fit_nonfinite_rejected(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y1,y2\n0.0,1.0,inf\n1.0,1.0,2.0\n")
    r = run_cli("fit", "--data", str(bad), "--draws", "5",
                "--out", str(tmp_path / "c.jsonl"))
    assert r.returncode == 2
    assert r.stderr.startswith("error:")


# ---------------------------------------------------------------------------
# quantile
# ---------------------------------------------------------------------------

def test_quantile_row_at_observed_x(tmp_path):
    data, chain = _fit_tiny(tmp_path)
    ds = _read_data_csv(str(data))
    x = float(ds.xs[0])
    out = tmp_path / "q.csv"
    r = run_cli("quantile", "--chain", str(chain), "--u", "0,0",
                "--x", repr(x), "--out", str(out))
    assert r.returncode == 0, r.stderr
    lines = out.read_text().splitlines()
    assert lines[0] == "x,u1,u2,point1,point2,lo1,lo2,hi1,hi2"
    vals = [float(v) for v in lines[1].split(",")]
    assert all(np.isfinite(vals))
    assert vals[5] <= vals[3] <= vals[7]


def test_quantile_delta_auto_close_to_unsmoothed_on_flat_chain(tmp_path):
    # flat response: smoothing moves x~ but the location surface is level,
    # so delta 0 and delta auto must agree closely
    rng = np.random.default_rng(0)
    data = tmp_path / "flat.csv"
    rows = ["x,y1,y2"] + [f"{x},{0.02 * rng.standard_normal()},{0.02 * rng.standard_normal()}"
                          for x in np.linspace(-1, 1, 40)]
    data.write_text("\n".join(rows) + "\n")
    chain = tmp_path / "c.jsonl"
    assert run_cli("fit", "--data", str(data), "--draws", "120", "--burnin",
                   "60", "--seed", "2", "--out", str(chain)).returncode == 0
    q0, qa = tmp_path / "q0.csv", tmp_path / "qa.csv"
    assert run_cli("quantile", "--chain", str(chain), "--u", "0,0", "--x",
                   "0.0", "--delta", "0", "--seed", "3",
                   "--out", str(q0)).returncode == 0
    assert run_cli("quantile", "--chain", str(chain), "--u", "0,0", "--x",
                   "0.0", "--delta", "auto", "--seed", "3",
                   "--out", str(qa)).returncode == 0
    v0 = [float(v) for v in q0.read_text().splitlines()[1].split(",")]
    va = [float(v) for v in qa.read_text().splitlines()[1].split(",")]
    assert abs(v0[3] - va[3]) < 0.25
    assert abs(v0[4] - va[4]) < 0.25


def test_quantile_rejects_direction_outside_ball(tmp_path):
    _, chain = _fit_tiny(tmp_path, draws=5)
    r = run_cli("quantile", "--chain", str(chain), "--u", "0.9,0.9",
                "--x", "0.0", "--out", str(tmp_path / "q.csv"))
    assert r.returncode == 2
    assert r.stderr.startswith("error:")


def test_quantile_x_grid(tmp_path):
    _, chain = _fit_tiny(tmp_path, draws=8)
    out = tmp_path / "q.csv"
    r = run_cli("quantile", "--chain", str(chain), "--u", "0.1,0.1",
                "--x-grid=-1:1:5", "--seed", "4", "--out", str(out))
    assert r.returncode == 0, r.stderr
    assert len(out.read_text().splitlines()) == 6


def test_quantile_deterministic(tmp_path):
    _, chain = _fit_tiny(tmp_path, draws=8)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        r = run_cli("quantile", "--chain", str(chain), "--u", "0.2,0.0",
                    "--x", "0.3", "--delta", "auto", "--seed", "9",
                    "--out", str(out))
        assert r.returncode == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def test_baseline_linear_and_kernel(tmp_path):
    data, _ = _fit_tiny(tmp_path, draws=5)
    for method, extra in (("linear", []), ("kernel", ["--h", "0.5"])):
        out = tmp_path / f"{method}.csv"
        r = run_cli("baseline", "--data", str(data), "--method", method,
                    *extra, "--out", str(out))
        assert r.returncode == 0, r.stderr
        lines = out.read_text().splitlines()
        assert lines[0] == "x,est1,est2"
        assert len(lines) == 31


def test_baseline_deterministic(tmp_path):
    data, _ = _fit_tiny(tmp_path, draws=5)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run_cli("baseline", "--data", str(data), "--method", "kernel",
                       "--out", str(out)).returncode == 0
    assert a.read_bytes() == b.read_bytes()


def test_baseline_rejects_unknown_method(tmp_path):
    data, _ = _fit_tiny(tmp_path, draws=5)
    r = run_cli("baseline", "--data", str(data), "--method", "spline",
                "--out", str(tmp_path / "x.csv"))
    assert r.returncode == 2


# ---------------------------------------------------------------------------
# bp-demo
# ---------------------------------------------------------------------------

def test_bp_embedded_rows_match_source_table():
    by_serial = {row[0]: row for row in bpdata.BP_ROWS}
    assert by_serial[3] == (3, 60, 180, 100)
    assert by_serial[25] == (25, 40, 160, 112)
    assert len(bpdata.BP_ROWS) == 38
    assert 1 not in by_serial and 21 not in by_serial


def test_bp_demo_outputs_age_grid(tmp_path):
    out = tmp_path / "bp.csv"
    r = run_cli("bp-demo", "--draws", "30", "--burnin", "10", "--seed", "0",
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    lines = out.read_text().splitlines()
    ages = [float(line.split(",")[0]) for line in lines[1:]]
    assert ages == [21, 26, 31, 36, 41, 46, 51, 56, 61, 66, 71, 76]


def test_bp_demo_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run_cli("bp-demo", "--draws", "20", "--burnin", "5",
                       "--seed", "4", "--out", str(out)).returncode == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _strip_runtime(text):
    rows = []
    for line in text.splitlines():
        parts = line.split(",")
        rows.append(",".join(parts[:-1]))
    return "\n".join(rows)


def test_bench_tiny_shape_and_determinism(tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        r = run_cli("bench", "--seeds", "0", "--n", "16", "--draws", "25",
                    "--burnin", "10", "--out", str(out))
        assert r.returncode == 0, r.stderr
        outs.append(out.read_text())
    lines = outs[0].splitlines()
    assert lines[0] == "seed,error_law,method,mse,runtime_s"
    assert len(lines) == 7  # 3 methods x 2 laws
    # byte-identical up to the wall-time column
    assert _strip_runtime(outs[0]) == _strip_runtime(outs[1])


def test_bench_single_law(tmp_path):
    out = tmp_path / "t.csv"
    r = run_cli("bench", "--seeds", "0", "--n", "16", "--draws", "25",
                "--burnin", "10", "--dist", "t1", "--out", str(out))
    assert r.returncode == 0, r.stderr
    assert len(out.read_text().splitlines()) == 4


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_unknown_subcommand_exits_2():
    assert run_cli("frobnicate").returncode == 2


def test_missing_file_is_usage_error(tmp_path):
    r = run_cli("fit", "--data", str(tmp_path / "nope.csv"), "--draws", "5",
                "--out", str(tmp_path / "c.jsonl"))
    assert r.returncode == 2
    assert r.stderr.startswith("error:")


def test_main_callable_directly(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["simulate", "--dist", "t1", "--n", "4", "--seed", "0",
                 "--out", str(out)]) == 0
    assert main(["simulate", "--dist", "t1", "--n", "1", "--seed", "0",
                 "--out", str(out)]) == 2
