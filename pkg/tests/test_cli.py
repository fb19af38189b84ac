import json
import os

import numpy as np
import pytest

from pgap.cli import main


def read(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


class TestTrain:
    def test_quad_lowrank_artifacts(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--task", "quad_lowrank", "--optimizer", "pgap",
                     "--steps", "12", "--window", "6", "--probes", "3",
                     "--rank", "2", "--seed", "7", "--out", str(out)])
        assert code == 0
        runlog = read(out / "runlog.csv").strip().split("\n")
        assert runlog[0] == "step,loss,rho,delta,eta,refresh,ms"
        assert len(runlog) == 13
        summary = json.loads(read(out / "summary.json"))
        assert summary["steps"] == 12
        assert (out / "final.ckpt").exists()
        assert (out / "config.echo.toml").exists()

    def test_same_seed_byte_identical_runlog(self, tmp_path):
        args = ["train", "--task", "quad_lowrank", "--steps", "10",
                "--window", "5", "--probes", "2", "--rank", "2", "--seed", "7"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        assert read(a / "runlog.csv") == read(b / "runlog.csv")

    def test_missing_config_exit_2(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.toml")])
        assert code == 2
        assert "nope.toml" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[optimizer]\nlearning_rate = 0.1\n")
        code = main(["train", "--config", str(cfg)])
        assert code == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[optimiser]\neta = 0.1\n")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_config_file_plus_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            "[task]\nname = \"quad_lowrank\"\nrows = 8\ncols = 8\nrank = 2\n"
            "[optimizer]\nsteps = 4\nk = 2\nh = 2\nr = 2\n"
            f"[output]\ndir = \"{tmp_path / 'from-file'}\"\n"
        )
        out = tmp_path / "from-flag"
        code = main(["train", "--config", str(cfg), "--out", str(out),
                     "--steps", "6"])
        assert code == 0
        assert not (tmp_path / "from-file").exists()
        assert len(read(out / "runlog.csv").strip().split("\n")) == 7
        echo = read(out / "config.echo.toml")
        assert "steps = 6" in echo

    def test_lora_task_trains(self, tmp_path):
        out = tmp_path / "lora"
        cfg = tmp_path / "lora.toml"
        cfg.write_text(
            "[task]\nname = \"mlp\"\nd = 8\nhidden = 10\nout = 4\nn = 32\n"
            "lora_rank = 2\nbatch_size = 0\n"
            "[optimizer]\nsteps = 4\nk = 2\nh = 2\nr = 2\neta = 1e-3\n"
        )
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0


class TestCompare:
    def test_compare_writes_csv_with_speedups(self, tmp_path):
        out = tmp_path / "cmp"
        cfg = tmp_path / "cmp.toml"
        cfg.write_text(
            "[task]\nname = \"quad_lowrank\"\nrows = 10\ncols = 10\nrank = 2\n"
            "[optimizer]\noptimizers = [\"pgap\", \"mezo\"]\n"
            "steps = 40\nk = 10\nh = 4\nr = 2\neta = 2e-3\ntarget_loss = 1e9\n"
            f"[output]\ndir = \"{out}\"\n"
        )
        assert main(["compare", "--config", str(cfg)]) == 0
        lines = read(out / "compare.csv").strip().split("\n")
        assert lines[0] == "optimizer,steps_to_target,final_loss,wall_ms,speedup"
        assert len(lines) == 3
        # target 1e9 is reached immediately by both, so both speedups are 1.0
        for line in lines[1:]:
            assert line.split(",")[4] == "1.0"

    def test_single_optimizer_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "one.toml"
        cfg.write_text("[optimizer]\noptimizers = [\"pgap\"]\ntarget_loss = 0.1\n")
        assert main(["compare", "--config", str(cfg)]) == 2

    def test_missing_target_is_config_error(self, tmp_path):
        cfg = tmp_path / "tgt.toml"
        cfg.write_text("[optimizer]\noptimizers = [\"pgap\", \"mezo\"]\n")
        assert main(["compare", "--config", str(cfg)]) == 2

    def test_unreachable_target_recorded_not_failed(self, tmp_path):
        out = tmp_path / "cmp"
        cfg = tmp_path / "cmp.toml"
        cfg.write_text(
            "[task]\nname = \"quad_lowrank\"\nrows = 8\ncols = 8\nrank = 2\n"
            "[optimizer]\noptimizers = [\"pgap\", \"mezo\"]\n"
            "steps = 5\nk = 5\nh = 2\nr = 2\ntarget_loss = -1.0\n"
            f"[output]\ndir = \"{out}\"\n"
        )
        assert main(["compare", "--config", str(cfg)]) == 0
        body = read(out / "compare.csv")
        assert "not_reached" in body

    def test_identical_optimizers_ratio_one(self, tmp_path):
        out = tmp_path / "cmp"
        cfg = tmp_path / "cmp.toml"
        cfg.write_text(
            "[task]\nname = \"quad_lowrank\"\nrows = 8\ncols = 8\nrank = 2\n"
            "[optimizer]\noptimizers = [\"mezo\", \"mezo\"]\n"
            "steps = 30\nk = 10\nh = 2\nr = 2\neta = 1e-3\ntarget_loss = 1e9\n"
            f"[output]\ndir = \"{out}\"\n"
        )
        assert main(["compare", "--config", str(cfg)]) == 0
        lines = read(out / "compare.csv").strip().split("\n")[1:]
        assert [ln.split(",")[4] for ln in lines] == ["1.0", "1.0"]


class TestLab:
    def test_unknown_suite_exit_2(self, tmp_path, capsys):
        assert main(["lab", "bogus", "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "variance" in err and "davis-kahan" in err

    def test_moments_suite_small(self, tmp_path):
        out = tmp_path / "lab"
        cfg = tmp_path / "lab.toml"
        cfg.write_text(
            "[lab]\nsamples = 50000\nmoment_dims = [2, 8]\n"
            f"[output]\ndir = \"{out}\"\n"
        )
        assert main(["lab", "moments", "--config", str(cfg)]) == 0
        reports = json.loads(read(out / "report-moments.json"))
        assert len(reports) == 4
        assert all(r["passed"] for r in reports)
        assert (out / "report-moments.csv").exists()

    def test_dispersion_suite_small(self, tmp_path):
        out = tmp_path / "lab"
        cfg = tmp_path / "disp.toml"
        cfg.write_text(
            "[lab]\ndispersion_samples = 8000\ndispersion_m = 16\n"
            "dispersion_rank = 2\nbasis_probes = 64\nbins = 16\n"
            f"[output]\ndir = \"{out}\"\n"
        )
        assert main(["lab", "dispersion", "--config", str(cfg)]) == 0
        reports = json.loads(read(out / "report-dispersion.json"))
        ratio = [r for r in reports if r["experiment"] == "dispersion_variance_ratio"]
        assert ratio and ratio[0]["passed"]

    def test_flag_overrides_samples(self, tmp_path):
        out = tmp_path / "lab"
        assert main(["lab", "angle", "--samples", "30000",
                     "--out", str(out)]) == 0
        reports = json.loads(read(out / "report-angle.json"))
        assert all(r["n"] == 30000 for r in reports)
