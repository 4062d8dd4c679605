import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bidca import cli, experiment, verify
from bidca.bilevel import solve_lower
from bidca.data import TIMING_FIELDS, read_results
from bidca.errors import ConfigError
from bidca.models.toys import build_toy

DATA = Path(__file__).resolve().parents[1] / "data"


def strip_timing(doc: str) -> list[dict]:
    out = []
    for line in doc.splitlines():
        rec = json.loads(line)
        for key in TIMING_FIELDS:
            rec.pop(key, None)
        out.append({k: v for k, v in rec.items() if not k.startswith("time_sec")})
    return out


def test_parse_seeds():
    assert cli.parse_seeds("3") == (3,)
    assert cli.parse_seeds("0,4,7") == (0, 4, 7)
    assert cli.parse_seeds("0-3,9") == (0, 1, 2, 3, 9)


def test_config_validation():
    with pytest.raises(ConfigError):
        experiment.ExperimentConfig(model="svm-cv")
    with pytest.raises(ConfigError):
        experiment.ExperimentConfig(model="toy:nope")
    with pytest.raises(ConfigError):
        experiment.ExperimentConfig(model="toy:clamp", epsilon=-1.0)
    with pytest.raises(ConfigError):
        experiment.ExperimentConfig(model="toy:clamp", seeds=(1, 1))
    with pytest.raises(ConfigError):
        experiment.ExperimentConfig(model="toy:clamp", rho=0.0)
    cfg = experiment.ExperimentConfig(model="toy:clamp")
    assert cfg.stopping == "algorithm"
    assert experiment.ExperimentConfig(model="svm-cv", data="x").stopping == "paper"


def test_record_carries_resolved_config():
    cfg = experiment.ExperimentConfig(model="toy:clamp", epsilon=1e-4, tol=1e-6)
    rec = experiment.solve_one(cfg, 0)
    assert rec["status"] == "converged"
    assert rec["cv_error"] <= 1e-3
    again = experiment.config_from_record(json.loads(json.dumps(rec)))
    assert again.resolved() == cfg.resolved()


def test_solve_is_deterministic(capsys):
    args = ["solve", "--model", "toy:clamp", "--epsilon", "1e-4", "--tol", "1e-6"]
    assert cli.main(args) == 0
    first = capsys.readouterr().out
    assert cli.main(args) == 0
    second = capsys.readouterr().out
    assert strip_timing(first) == strip_timing(second)


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["solve", "--model", "svm-cv", "--data", str(tmp_path / "missing")]) == 2
    assert cli.main(["solve", "--model", "wrong"]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2:0.1 2:0.2\n")
    assert cli.main(["solve", "--model", "svm-cv", "--data", str(bad)]) == 2
    # two iterations cannot reach tol 1e-12
    code = cli.main(["solve", "--model", "toy:clamp", "--max-iter", "2", "--tol", "1e-12"])
    assert code == 1
    capsys.readouterr()


def test_out_file_and_reps(tmp_path):
    out = tmp_path / "r.jsonl"
    assert cli.main(["solve", "--model", "toy:clamp", "--reps", "2", "--epsilon", "1e-4",
                     "--tol", "1e-6", "--out", str(out)]) == 0
    runs, footer = read_results(out)
    assert [r["seed"] for r in runs] == [0, 1]
    assert footer["runs"] == 2 and footer["status_counts"] == {"converged": 2}


def test_grid_single_point_equals_direct_evaluation():
    cfg = experiment.ExperimentConfig(model="toy:lasso")
    rec = experiment.grid_one(cfg, experiment.GridSpec.log_spaced(0.5, 0.5, 1), 0)
    p = build_toy("lasso")
    sol = solve_lower(p, [0.5])
    assert rec["cv_error"] == pytest.approx(p.F1.value(np.concatenate([sol.x, sol.y])), abs=1e-12)


def test_seven_point_grid_within_one_step_of_brute_force():
    cfg = experiment.ExperimentConfig(model="toy:lasso")
    coarse = experiment.GridSpec.log_spaced(1e-2, 1e2, 7)
    rec = experiment.grid_one(cfg, coarse, 0)
    p = build_toy("lasso")
    lams = np.logspace(-2, 2, 201)
    vals = []
    for lam in lams:
        sol = solve_lower(p, [lam])
        vals.append(p.F1.value(np.concatenate([sol.x, sol.y])))
    brute = lams[int(np.argmin(vals))]
    step = 4.0 / 6.0
    assert abs(math.log10(rec["hyperparameters"]["lambda"]) - math.log10(brute)) <= step + 1e-12


def test_grid_cli(tmp_path):
    out = tmp_path / "g.jsonl"
    assert cli.main(["grid", "--model", "toy:lasso", "--lambdas", "1e-2:1e2:5", "--out", str(out)]) == 0
    runs, _ = read_results(out)
    assert len(runs[0]["grid"]) == 5
    with pytest.raises(ConfigError):
        experiment.parse_range("1:2")


@pytest.mark.skipif(not (DATA / "diabetes_scale").exists(), reason="diabetes_scale not shipped")
def test_grid_on_svm_data():
    cfg = experiment.ExperimentConfig(model="svm-cv", data=str(DATA / "diabetes_scale"))
    rec = experiment.grid_one(cfg, experiment.GridSpec.log_spaced(1e-2, 1e2, 3), 0)
    assert rec["status"] == "converged"
    assert 0.0 <= rec["test_error"] <= 1.0


def test_verify_fast_scope_passes_quickly():
    t0 = time.perf_counter()
    results = verify.run_suite("fast")
    assert time.perf_counter() - t0 < 60
    assert all(r.passed for r in results), verify.format_report(results)


def test_verify_detects_planted_fault():
    results = verify.run_suite("fast", plant_fault=True)
    failed = {r.name for r in results if not r.passed}
    assert "value subgradient [clamp]" in failed


def test_verify_cli_exit_code(capsys):
    assert cli.main(["verify", "--plant-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "bidca", "solve", "--model", "toy:clamp",
                          "--epsilon", "1e-4", "--tol", "1e-6"], capture_output=True, text=True,
                         check=True)
    assert json.loads(out.stdout.splitlines()[0])["status"] == "converged"
