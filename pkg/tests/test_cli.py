import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import h_spec
from mixedlq.model import dump_problem, make_problem, zero_problem
from mixedlq.reference import LAST_CASE_GAINS


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "mixedlq", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    out = tmp_path_factory.mktemp("example")
    res = run("export-example", "--out", out)
    assert res.returncode == 0, res.stderr
    return out


def report_of(res):
    assert res.stdout, res.stderr
    return json.loads(res.stdout)


def test_help_and_version():
    res = run("--help")
    assert res.returncode == 0 and "reproduce-example" in res.stdout
    assert run("--version").returncode == 0
    for sub in ("solve", "classify", "simulate", "verify", "reproduce-example", "export-example"):
        assert run(sub, "--help").returncode == 0


def test_export_writes_expected_files(files):
    names = sorted(p.name for p in files.iterdir())
    assert "example4.json" in names and "report.schema.json" in names
    assert [n for n in names if n.startswith("psi_")] == [f"psi_{i:02d}.json" for i in range(1, 11)]


def test_solve_feedback_does_not_exist(files, tmp_path):
    out = tmp_path / "policy.json"
    res = run("solve", "--problem", files / "example4.json", "--kind", "feedback", "--out-policy", out)
    assert res.returncode == 3
    rep = report_of(res)
    assert rep["verdict"] == "no"
    assert rep["operators"][0]["convexity_eigenvalues"][0] < 0
    assert not out.exists()


def test_solve_mixed_last_case(files, tmp_path):
    out = tmp_path / "policy.json"
    report = tmp_path / "report.json"
    res = run("solve", "--problem", files / "example4.json", "--kind", "mixed", "--phi", files / "psi_10.json",
              "--out-policy", out, "--report", report)
    assert res.returncode == 0, res.stderr
    pol = json.loads(out.read_text())
    K = np.array(pol["K"])[:, 0, :]
    assert np.max(np.abs(K - np.array(LAST_CASE_GAINS))) <= 1e-3
    rep = json.loads(report.read_text())
    assert rep["verdict"] == "yes" and len(rep["fingerprint"]) == 64
    assert rep["tolerances"]["pinv_rtol"] == 1e-12


def test_solve_zero_problem(tmp_path):
    prob = tmp_path / "zero.json"
    prob.write_text(dump_problem(zero_problem(2, 1, 1, 2)))
    out = tmp_path / "policy.json"
    res = run("solve", "--problem", prob, "--kind", "feedback", "--out-policy", out)
    assert res.returncode == 0, res.stderr
    pol = json.loads(out.read_text())
    assert not np.any(pol["K"]) and not np.any(pol["c"])


def test_solve_mixed_needs_feedback_part(files):
    assert run("solve", "--problem", files / "example4.json", "--kind", "mixed").returncode == 2


def test_bad_inputs_exit_2(files, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n": 1}')
    assert run("solve", "--problem", bad, "--kind", "open").returncode == 2
    assert run("solve", "--problem", tmp_path / "missing.json", "--kind", "open").returncode == 2
    assert run("solve", "--problem", files / "example4.json", "--kind", "open", "--t", 9).returncode == 2
    assert run("classify", "--problem", files / "example4.json", "--scope", "fixed").returncode == 2
    assert run("classify", "--problem", files / "example4.json", "--scope", "fixed", "--x", "1,2,3").returncode == 2


def test_environment_tolerance_override(files):
    res = subprocess.run(
        [sys.executable, "-m", "mixedlq", "classify", "--problem", str(files / "example4.json")],
        capture_output=True, text=True, env={**__import__("os").environ, "MIXEDLQ_PSD_TOL": "1e-6"},
    )
    assert report_of(res)["tolerances"]["psd_tol"] == 1e-6


def test_classify_example(files):
    res = run("classify", "--problem", files / "example4.json", "--scope", "all")
    assert res.returncode == 0
    v = report_of(res)["verdicts"]
    assert v["open_exists"] == "no" and v["feedback_exists"] == "no"
    assert v["open_unique"] == "no" and v["feedback_unique"] == "no"
    assert v["mixed_exists_for_given_phi"] == "not_requested"


@pytest.mark.parametrize("case", [1, 5, 10])
def test_classify_mixed_cases(files, case):
    res = run("classify", "--problem", files / "example4.json", "--phi", files / f"psi_{case:02d}.json")
    assert report_of(res)["verdicts"]["mixed_exists_for_given_phi"] == "yes"


def test_classify_sign_condition_spec(tmp_path):
    prob = tmp_path / "h.json"
    prob.write_text(dump_problem(h_spec(np.random.default_rng(0), N=3)))
    v = report_of(run("classify", "--problem", prob))["verdicts"]
    assert v["feedback_exists"] == "yes" and v["feedback_unique"] == "yes" and v["H_holds"] == "yes"


@pytest.fixture(scope="module")
def mixed_policy(files, tmp_path_factory):
    out = tmp_path_factory.mktemp("policy") / "policy.json"
    res = run("solve", "--problem", files / "example4.json", "--kind", "mixed", "--phi", files / "psi_10.json",
              "--out-policy", out)
    assert res.returncode == 0
    return out


def test_simulate_deterministic_bytes(files, mixed_policy, tmp_path):
    args = ("simulate", "--problem", files / "example4.json", "--policy", mixed_policy, "--x", "1,1",
            "--reps", 3, "--seed", 17)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*args, "--out", a).returncode == 0
    assert run(*args, "--out", b).returncode == 0
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert csvs == ["trajectory_00000.csv", "trajectory_00001.csv", "trajectory_00002.csv"]
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rep = json.loads((a / "report.json").read_text())
    assert len(rep["summary"]["mean"]) == 5


def test_simulate_deterministic_problem_ignores_seed(tmp_path):
    prob = tmp_path / "det.json"
    prob.write_text(dump_problem(make_problem(1, 1, 1, 2, A=[[0.9]], B=[[1.0]], R=[[1.0]], G=[[1.0]])))
    pol = tmp_path / "pol.json"
    assert run("solve", "--problem", prob, "--kind", "feedback", "--out-policy", pol).returncode == 0
    outs = []
    for seed in (1, 2):
        d = tmp_path / f"s{seed}"
        assert run("simulate", "--problem", prob, "--policy", pol, "--x", "1", "--seed", seed,
                   "--out", d, "--long").returncode == 0
        outs.append((d / "trajectories.csv").read_text().splitlines())
    strip = lambda rows: [r.split(",")[:4] for r in rows]  # noqa: E731  drop the noise column
    assert strip(outs[0]) == strip(outs[1])


def test_verify_equilibrium_and_corrupted(files, mixed_policy, tmp_path):
    res = run("verify", "--problem", files / "example4.json", "--policy", mixed_policy, "--x", "1,1")
    assert res.returncode == 0, res.stdout[-2000:]
    summary = report_of(res)["summary"]
    assert summary["passed"] and summary["worst_margin"] >= -1e-9
    doc = json.loads(mixed_policy.read_text())
    doc["c"][2][0] += 1.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    res = run("verify", "--problem", files / "example4.json", "--policy", bad, "--x", "1,1")
    assert res.returncode == 3
    assert not report_of(res)["summary"]["passed"]


def test_verify_zero_problem(tmp_path):
    prob = tmp_path / "zero.json"
    prob.write_text(dump_problem(zero_problem(1, 1, 1, 3)))
    pol = tmp_path / "pol.json"
    assert run("solve", "--problem", prob, "--kind", "open", "--out-policy", pol).returncode == 0
    assert run("verify", "--problem", prob, "--policy", pol, "--x", "2").returncode == 0


def test_verify_depth_bound(files, mixed_policy):
    res = run("verify", "--problem", files / "example4.json", "--policy", mixed_policy, "--x", "1,1",
              "--depth-limit", 3)
    assert res.returncode == 4


def test_reproduce_example_reports_table():
    res = run("reproduce-example")
    lines = res.stdout.splitlines()
    assert lines[0].split()[0] == "quantity"
    assert sum("mixed case" in line for line in lines) == 88
    assert res.returncode == (0 if "deviate" not in res.stdout else 5)


def test_reproduce_example_random_sampling(tmp_path):
    report = tmp_path / "r.json"
    res = run("reproduce-example", "--samples", 3, "--seed", 1, "--report", report)
    assert "random feedback parts" in res.stdout
    rep = json.loads(report.read_text())
    assert len(rep["random_feedback_parts"]) == 3
    again = tmp_path / "r2.json"
    run("reproduce-example", "--samples", 3, "--seed", 1, "--report", again)
    assert json.loads(again.read_text())["random_feedback_parts"] == rep["random_feedback_parts"]
