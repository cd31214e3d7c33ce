"""Command-line surface: config parsing, exit codes, output files."""
import json
import subprocess
import sys

import pytest

from mosgeom import cli

CONFIG = """\
# tiny hierarchy run
[task]
kind = hierarchy
branching = 3
depth = 2
n_samples = 200
seed = 11
noise = 0.1

[layer]
hidden = 16
rank = 4

[optimizer]
base_lr = 3e-3
batch_size = 32
epochs = 2

[schedule]
warmup_ratio = 0.1
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CONFIG)
    return p


def _run(args, cwd, env_extra=None):
    import os

    env = dict(os.environ)
    env.pop("MOSGEOM_SEED", None)
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "mosgeom", *args],
                          cwd=cwd, env=env, capture_output=True, text=True)


class TestConfigParsing:
    def test_sections_and_inline_comments(self, cfg_path):
        sections = cli.parse_train_config(str(cfg_path))
        assert sections["task"]["kind"] == "hierarchy"
        assert sections["task"]["depth"] == 2
        assert sections["layer"]["hidden"] == 16
        assert sections["optimizer"]["epochs"] == 2
        assert sections["schedule"]["warmup_ratio"] == 0.1

    def test_group_sizes_list_value(self, tmp_path):
        p = tmp_path / "g.cfg"
        p.write_text("[layer]\ngroup_sizes = 2,2,1\nn_experts = 5\n")
        sections = cli.parse_train_config(str(p))
        assert sections["layer"]["group_sizes"] == (2, 2, 1)

    @pytest.mark.parametrize("body", [
        "[nosuch]\nx = 1\n",
        "[task]\nbogus = 1\n",
        "[task]\ndepth = deep\n",
        "[task]\nkind = fractal\n",
        "[task]\nkind = cycle\ndepth = 3\n",
        "no section header\n",
    ])
    def test_malformed_rejected(self, tmp_path, body):
        p = tmp_path / "bad.cfg"
        p.write_text(body)
        with pytest.raises(cli.ConfigError):
            cli.parse_train_config(str(p))

    def test_seed_priority(self, monkeypatch):
        monkeypatch.delenv("MOSGEOM_SEED", raising=False)
        assert cli._resolve_seed(3, None) == 3
        assert cli._resolve_seed(3, 5) == 5
        monkeypatch.setenv("MOSGEOM_SEED", "9")
        assert cli._resolve_seed(3, 5) == 9
        monkeypatch.setenv("MOSGEOM_SEED", "x")
        with pytest.raises(cli.ConfigError):
            cli._resolve_seed(3, 5)


class TestExitCodes:
    def test_no_arguments_prints_usage(self, tmp_path):
        res = _run([], tmp_path)
        assert res.returncode == 2
        assert "usage:" in res.stderr

    def test_unknown_flag(self, tmp_path):
        res = _run(["train", "--frobnicate"], tmp_path)
        assert res.returncode == 2

    def test_missing_config_file(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(["train", "--config", "absent.cfg"]) == 4

    def test_malformed_config_file(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "bad.cfg").write_text("[task]\nnoise = loud\n")
        assert cli.main(["train", "--config", "bad.cfg"]) == 3
        assert "bad value" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(["dump-curvature", "absent.bin"]) == 4

    def test_malformed_checkpoint(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
        assert cli.main(["dump-curvature", "junk.bin"]) == 3

    def test_unknown_verify_suite(self, capsys):
        assert cli.main(["verify", "--suite", "nope"]) == 2
        assert "unknown suite" in capsys.readouterr().err

    def test_bad_bench_flags(self, capsys):
        assert cli.main(["bench", "--dims", "64", "--depths", "1",
                         "--repeats", "2"]) == 3


class TestTrain:
    def test_writes_outputs_and_reports(self, cfg_path, tmp_path,
                                        monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        monkeypatch.delenv("MOSGEOM_SEED", raising=False)
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "final loss" in out and "seed=11" in out
        assert (tmp_path / "trajectory.csv").exists()
        assert (tmp_path / "checkpoint.bin").exists()
        header = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
        assert header.startswith("step,loss,aux_loss,kappa0")

    def test_repeat_runs_byte_identical(self, cfg_path, tmp_path):
        for tag in ("a", "b"):
            res = _run(["train", "--config", str(cfg_path),
                        "--trajectory", f"t{tag}.csv",
                        "--checkpoint", f"c{tag}.bin"], tmp_path)
            assert res.returncode == 0, res.stderr
        assert (tmp_path / "ta.csv").read_bytes() == \
            (tmp_path / "tb.csv").read_bytes()
        assert (tmp_path / "ca.bin").read_bytes() == \
            (tmp_path / "cb.bin").read_bytes()

    def test_env_seed_beats_flag_and_config(self, cfg_path, tmp_path):
        res = _run(["train", "--config", str(cfg_path), "--seed", "5"],
                   tmp_path, env_extra={"MOSGEOM_SEED": "99"})
        assert res.returncode == 0, res.stderr
        assert "seed=99" in res.stdout

    def test_flag_seed_beats_config(self, cfg_path, tmp_path):
        res = _run(["train", "--config", str(cfg_path), "--seed", "5"],
                   tmp_path)
        assert res.returncode == 0, res.stderr
        assert "seed=5" in res.stdout

    def test_dump_curvature_roundtrip(self, cfg_path, tmp_path, monkeypatch,
                                      capsys):
        monkeypatch.chdir(tmp_path)
        monkeypatch.delenv("MOSGEOM_SEED", raising=False)
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        capsys.readouterr()
        assert cli.main(["dump-curvature", "checkpoint.bin"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "expert,group,kappa,learnable"
        assert len(lines) == 1 + 8
        tags = [ln.split(",")[1] for ln in lines[1:]]
        assert tags == ["hyperbolic"] * 3 + ["spherical"] * 3 + \
            ["euclidean"] * 2
        eucl = [ln.split(",") for ln in lines[1:] if "euclidean" in ln]
        assert all(row[2] == "0.0" and row[3] == "0" for row in eucl)


class TestBench:
    def test_report_row_grid(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code = cli.main(["bench", "--dims", "64,128", "--depths", "2",
                         "--batch", "8", "--repeats", "5", "--warmup", "1",
                         "--out", "rep.json"])
        assert code == 0
        doc = json.loads((tmp_path / "rep.json").read_text())
        # 2 methods x 2 phases x 2 dims x 1 depth
        assert len(doc["rows"]) == 8
        per_method = {}
        for row in doc["rows"]:
            per_method.setdefault(row["method"], set()).add(
                (row["dim"], row["depth"], row["phase"]))
        assert per_method["mos"] == per_method["explog"]
        assert len(per_method["mos"]) == 4
        out = capsys.readouterr().out
        assert "speedup" in out and "identity check" in out


class TestVerifySubcommand:
    def test_single_suite_summary(self, capsys):
        assert cli.main(["verify", "--suite", "eq9"]) == 0
        out = capsys.readouterr().out
        assert "suite eq9" in out and "total:" in out

    def test_failure_exit_code(self, monkeypatch, capsys):
        import mosgeom.verify as ver

        def explode(rng):
            raise RuntimeError("boom")

        monkeypatch.setitem(ver.SUITES, "eq9", explode)
        assert cli.main(["verify", "--suite", "eq9"]) == 1
