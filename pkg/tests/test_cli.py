"""Command line: outputs, exit codes and reproducibility."""
import csv
import json
import subprocess
import sys

import pytest

from sadvi.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, atomic_write, main, parse_axis_values
from sadvi.config import ConfigError
from sadvi.evaluation import RESULTS_COLUMNS
from sadvi.models import get_model

TINY_INI = "[train]\nepochs = 1\nreplicates = 2\n[case]\nn = 64\n[mh]\nbank = 256\n[eval]\ngrid_n = 512\n"


@pytest.fixture()
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRun:
    def test_outputs(self, tmp_path, ini):
        out = tmp_path / "out"
        assert main(["run", "--config", ini, "--case", "3", "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "results.csv")
        assert tuple(rows[0]) == RESULTS_COLUMNS
        assert {r[1] for r in rows[1:]} == {"sadvi", "truncated-gaussian"}
        assert all(r[-1] == "" for r in rows[1:])
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["case.id"] == 3 and man["seeds"] == [0, 1]
        assert len(man["config_hash"]) == 40
        for name in ("trace.csv", "summary.csv", "dataset.csv"):
            assert (out / name).exists()
        assert not list(out.glob(".*.tmp"))

    def test_trace_and_dataset_columns(self, tmp_path, ini):
        out = tmp_path / "out"
        main(["run", "--config", ini, "--method", "sadvi", "--out", str(out)])
        trace = read_csv(out / "trace.csv")
        assert trace[0] == ["case", "method", "replicate", "epoch", "objective"]
        assert len(trace) == 1 + 2  # two replicates, one epoch
        data = read_csv(out / "dataset.csv")
        assert data[0] == ["seed", "x", "z"] and len(data) == 1 + 2 * 64

    def test_deterministic_and_manifest_replay(self, tmp_path, ini):
        a, b, c = (tmp_path / n for n in "abc")
        main(["run", "--config", ini, "--case", "2", "--out", str(a)])
        main(["run", "--config", ini, "--case", "2", "--out", str(b)])
        main(["run", "--config", str(a / "manifest.json"), "--out", str(c)])
        ref = (a / "results.csv").read_bytes()
        assert (b / "results.csv").read_bytes() == ref
        assert (c / "results.csv").read_bytes() == ref
        assert (c / "trace.csv").read_bytes() == (a / "trace.csv").read_bytes()

    def test_seed_override(self, tmp_path, ini):
        out = tmp_path / "out"
        main(["run", "--config", ini, "--method", "sadvi", "--seed", "7", "--out", str(out)])
        assert {r[3] for r in read_csv(out / "results.csv")[1:]} == {"7", "8"}

    def test_bad_case_exit_code(self, tmp_path, ini, capsys):
        assert main(["run", "--config", ini, "--case", "9", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err
        assert not (tmp_path / "results.csv").exists()

    def test_bad_method_and_missing_config(self, tmp_path):
        assert main(["run", "--method", "nuts", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["run", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_key_in_file(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[obj]\nbogus = 1\n")
        assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestSweep:
    def test_rows_per_value(self, tmp_path, ini):
        out = tmp_path / "sw"
        assert main(["sweep", "--config", ini, "--axis", "obj.T", "--values", "1,4", "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "results.csv")
        assert rows[0][:2] == ["axis", "value"]
        per_value = 2 * len(get_model(1).probe_x)  # two replicates at each probe point
        assert [r[1] for r in rows[1:]] == ["1"] * per_value + ["4"] * per_value
        assert json.loads((out / "manifest.json").read_text())["values"] == ["1", "4"]

    def test_empty_values_header_only(self, tmp_path, ini):
        out = tmp_path / "sw"
        assert main(["sweep", "--config", ini, "--axis", "obj.lambda", "--values", "", "--out", str(out)]) == EXIT_OK
        assert len(read_csv(out / "results.csv")) == 1

    def test_bad_axis(self, tmp_path, ini):
        assert main(["sweep", "--config", ini, "--axis", "opt.lr", "--values", "1", "--out", str(tmp_path)]) \
            == EXIT_CONFIG

    def test_value_parsing(self):
        assert parse_axis_values("anneal.kind", "linear, exponential,") == ["linear", "exponential"]
        with pytest.raises(ConfigError):
            parse_axis_values("obj.T", "1,x")


class TestOtherCommands:
    def test_validate_suite(self, capsys):
        assert main(["validate", "models"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_validate_unknown_suite(self):
        assert main(["validate", "nosuch"]) == EXIT_CONFIG

    def test_project_rate(self, tmp_path, capsys):
        assert main(["project-rate", "--H", "2,4", "--out", str(tmp_path)]) == EXIT_OK
        rows = read_csv(tmp_path / "projection.csv")
        assert rows[0] == ["degree", "H", "l2_error", "iterations", "converged"]
        assert float(rows[1][2]) > float(rows[2][2])

    @pytest.mark.parametrize("target", ["beta:1", "beta:-1,2", "gamma:2"])
    def test_project_rate_bad_target(self, target):
        assert main(["project-rate", "--target", target]) == EXIT_CONFIG

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "sadvi.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and "0.1.0" in res.stdout

    def test_bad_jobs_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["run", "--jobs", "0"])
        assert e.value.code == 2


class TestAtomicWrite:
    def test_failed_write_keeps_old_file(self, tmp_path):
        p = tmp_path / "results.csv"
        atomic_write(p, "old\n")
        with pytest.raises(TypeError):
            atomic_write(p, object())
        assert p.read_text() == "old\n"
        assert [f.name for f in tmp_path.iterdir()] == ["results.csv"]

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_FAIL, EXIT_CONFIG}) == 3
