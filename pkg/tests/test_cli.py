import json
import subprocess
import sys

import pytest

from cpchoi import cli
from cpchoi import gradsuite


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", out, "--scenes", 6, "--seed", 4) == 0
    return out / "scenes.jsonl"


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestGenData:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--scenes", 20, "--seed", 9) == 0
        assert (tmp_path / "a" / "scenes.jsonl").read_bytes() == (tmp_path / "b" / "scenes.jsonl").read_bytes()

    def test_resolved_config(self, tmp_path):
        run("gen-data", "--out", tmp_path, "--scenes", 3, "--seed", 2)
        saved = json.loads((tmp_path / "resolved_config.json").read_text())
        assert saved == {"command": "gen-data", "name": "scenes.jsonl", "out": str(tmp_path),
                         "scenes": 3, "seed": 2}


class TestTrain:
    def test_single_path_logs_have_no_cpc(self, dataset, tmp_path):
        code = run("train", "--data", dataset, "--out", tmp_path, "--paths", "1", "--cpc", "false",
                   "--steps", 3, "--batch-size", 2)
        assert code == 0
        for rec in read_jsonl(tmp_path / "losses.jsonl"):
            assert "cpc" not in rec and set(rec["sup"]) == {"1"}
        assert (tmp_path / "checkpoint.json").exists()

    def test_cpc_on_logs_pairs(self, dataset, tmp_path):
        run("train", "--data", dataset, "--out", tmp_path, "--paths", "1,2", "--steps", 2, "--batch-size", 2)
        first = read_jsonl(tmp_path / "losses.jsonl")[0]
        assert first["cpc"] >= 0 and len(first["pairs"]) == 1

    def test_eval_events(self, dataset, tmp_path):
        run("train", "--data", dataset, "--out", tmp_path, "--paths", "1", "--steps", 4, "--batch-size", 2,
            "--eval-data", dataset, "--eval-every", 2)
        events = read_jsonl(tmp_path / "metrics.jsonl")
        assert [e["step"] for e in events] == [2, 4] and all(0 <= e["map"] <= 1 for e in events)

    def test_config_replay_identical(self, dataset, tmp_path):
        run("train", "--data", dataset, "--out", tmp_path / "a", "--paths", "1,3", "--steps", 2,
            "--batch-size", 2, "--seed", 5)
        assert run("train", "--config", tmp_path / "a" / "resolved_config.json", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()

    def test_eval_command(self, dataset, tmp_path, capsys):
        run("train", "--data", dataset, "--out", tmp_path, "--paths", "1", "--steps", 1, "--batch-size", 2)
        capsys.readouterr()
        assert run("eval", "--checkpoint", tmp_path / "checkpoint.json", "--data", dataset) == 0
        record = json.loads(capsys.readouterr().out)
        assert set(record) == {"map", "ap"} and "overlapping" in record["ap"]


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        [],
        ["train", "--data", "x"],
        ["train", "--data", "x", "--out", "y", "--paths", "2,3"],
        ["train", "--data", "x", "--out", "y", "--cpc", "maybe"],
        ["nope"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert run(*argv) == 1

    def test_missing_file_is_runtime_failure(self, tmp_path):
        assert run("train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path, "--steps", 1) == 2

    def test_bad_checkpoint(self, dataset, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        assert run("eval", "--checkpoint", tmp_path / "bad.json", "--data", dataset) == 2

    def test_config_command_mismatch(self, tmp_path):
        run("gen-data", "--out", tmp_path, "--scenes", 1)
        assert run("train", "--config", tmp_path / "resolved_config.json", "--data", "x", "--out", "y") == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "cpchoi", "train"], capture_output=True, text=True)
        assert proc.returncode == 1 and "usage" in proc.stderr


class TestGradcheck:
    def test_exit_status_tracks_tolerance(self, monkeypatch, tmp_path, capsys):
        monkeypatch.setattr(gradsuite, "run_suite", lambda seed: {"ops": {"add": 1e-9}, "ops_max": 1e-9,
                                                                  "end_to_end": 1e-6})
        assert run("gradcheck", "--out", tmp_path) == 0
        assert json.loads((tmp_path / "gradcheck.json").read_text())["ops_max"] == 1e-9
        monkeypatch.setattr(gradsuite, "run_suite", lambda seed: {"ops": {"add": 1e-2}, "ops_max": 1e-2,
                                                                  "end_to_end": 1e-6})
        assert run("gradcheck") == 2
        assert "max op relative error" in capsys.readouterr().out


class TestParsers:
    def test_paths(self):
        assert cli.parse_paths("4,1,2") == (1, 2, 4)

    @pytest.mark.parametrize("text, value", [("true", True), ("0", False), ("Yes", True), ("off", False)])
    def test_bool(self, text, value):
        assert cli.parse_bool(text) is value
