import csv
import json
import subprocess
import sys

import pytest

from sparse_ame.cli import main


def run(capsys, *argv):
    """Invoke the CLI in-process; returns (exit code, stdout, stderr)."""
    try:
        code = main(list(map(str, argv)))
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


class TestSampleEstimateSelect:
    def test_pipeline(self, capsys, tmp_path):
        store = tmp_path / "obs.jsonl"
        code, out, _ = run(capsys, "sample", "--n", 40, "--m", 400, "--knockoffs", "--store", store)
        assert code == 0 and json.loads(out)["evaluations"] > 0
        code, out, _ = run(capsys, "sample", "--n", 40, "--m", 400, "--knockoffs", "--store", store)
        assert code == 0 and json.loads(out)["evaluations"] == 0

        code, out, _ = run(capsys, "estimate", "--store", store, "--folds", 10,
                           "--cv-csv", tmp_path / "cv.csv", "--dump-design", tmp_path / "X.csv")
        assert code == 0
        ame = json.loads(out)["ame"]
        assert len(ame) == 40 and (tmp_path / "cv.csv").exists()
        with open(tmp_path / "X.csv") as fh:
            assert len(next(csv.reader(fh))) == 41

        code, out, _ = run(capsys, "select", "--store", store, "--q", 0.2, "--folds", 10)
        assert code == 0 and "tau" in json.loads(out)

    def test_select_without_knockoffs(self, capsys, tmp_path):
        store = tmp_path / "obs.jsonl"
        run(capsys, "sample", "--n", 10, "--m", 50, "--store", store)
        code, _, err = run(capsys, "select", "--store", store, "--q", 0.2)
        assert code == 3 and error_of(err)["error"] == "MissingKnockoffMask"


class TestSv:
    def test_exact(self, capsys, tmp_path):
        out_csv = tmp_path / "sv.csv"
        code, out, _ = run(capsys, "sv", "--n", 4, "--method", "exact", "--out", out_csv,
                           "--bound-out", tmp_path / "b.json")
        assert code == 0
        with open(out_csv) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["source", "value"]
        assert [float(r[1]) for r in rows[1:]] == pytest.approx([1 / 3, 1 / 3, 1 / 3, 0])
        assert json.loads((tmp_path / "b.json").read_text())["linf_bound"] == pytest.approx(0.4)

    def test_mc_to_stdout(self, capsys):
        code, out, err = run(capsys, "sv", "--n", 5, "--method", "mc", "--permutations", 20)
        assert code == 0 and out.splitlines()[0] == "source,value"
        assert "l2_bound" in err


class TestOtherCommands:
    def test_gen_task_and_poisoned_sample(self, capsys, tmp_path):
        task = tmp_path / "task.json"
        code, out, _ = run(capsys, "gen-task", "--n", 50, "--k", 3, "--out", task)
        assert code == 0 and len(json.loads(out)["poison_indices"]) == 3
        code, out, _ = run(capsys, "sample", "--oracle", "poisoned", "--task", task, "--m", 20,
                           "--store", tmp_path / "s.jsonl")
        assert code == 0 and json.loads(out)["rows"] == 20

    def test_hier_simulate_and_reload(self, capsys, tmp_path):
        tree = tmp_path / "tree.json"
        tree.write_text(json.dumps({"children": [[3 * g, 3 * g + 1, 3 * g + 2] for g in range(20)]}))
        save = tmp_path / "h.jsonl"
        code, out, _ = run(capsys, "hier", "--tree", tree, "--q", 0.2, "--poisons", "0,1,2,3,4",
                           "--m", 300, "--folds", 10, "--save", save)
        assert code == 0
        first = json.loads(out)
        code, out, _ = run(capsys, "hier", "--tree", tree, "--q", 0.2, "--store", save, "--folds", 10)
        assert code == 0 and json.loads(out) == first

    def test_experiment(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"oracle": "threshold", "n_sources": 50, "k": 3, "m": 200, "seed": 1}))
        code, out, _ = run(capsys, "experiment", "--config", cfg, "--trials", 2, "--folds", 5,
                           "--output", tmp_path / "res")
        assert code == 0 and json.loads(out)["aggregate"]["n_trials"] == 2
        assert (tmp_path / "res" / "summary.csv").read_text().startswith("trial,precision,recall,l2_error,lambda,tau\n")


class TestExitCodes:
    def test_bad_grid(self, capsys, tmp_path):
        code, _, err = run(capsys, "sample", "--n", 5, "--m", 5, "--dist", "grid:0.0,0.5",
                           "--store", tmp_path / "s")
        assert code == 2 and error_of(err)["error"] == "InvalidGrid"

    def test_missing_argument(self, capsys):
        code, _, err = run(capsys, "sample", "--n", 5)
        assert code == 2 and error_of(err)["error"] == "UsageError"

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "estimate", "--store", tmp_path / "none.jsonl")
        assert code == 3 and "message" in error_of(err)

    def test_invalid_config(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"oracle": "threshold", "n_sources": 50, "k": 3, "m": 20}))
        code, _, err = run(capsys, "experiment", "--config", cfg)
        assert code == 2 and error_of(err)["error"] == "InvalidConfig"

    def test_console_module(self):
        res = subprocess.run([sys.executable, "-m", "sparse_ame.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "experiment" in res.stdout
