"""CLI contract tests: help goldens, exit codes, artifact round-trips,
byte determinism of repeated invocations."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dgpcompose.cli import build_parser, main

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def write_config(path, out_dir, schemes="meanfield", seeds=0, iters=4):
    cfg = {
        "dataset": {"generator": "sine", "n": 10},
        "model": {"L": 2, "M": 4, "sigma2": 0.01},
        "scheme": schemes,
        "training": {"iters": iters, "n_samples": 3, "seed": seeds,
                     "eval_every": 2, "eval_samples": 30},
        "outputs": {"dir": str(out_dir)},
    }
    path.write_text(json.dumps(cfg))
    return cfg


@pytest.fixture(scope="module")
def fitted_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_fit")
    cfg_path = root / "c.json"
    write_config(cfg_path, root / "rep")
    run_dir = root / "run"
    code = main(["fit", "--config", str(cfg_path), "--out", str(run_dir)])
    assert code == 0
    return root, cfg_path, run_dir


class TestHelpGoldens:
    def _docs(self):
        parser = build_parser()
        subs = parser._subparsers._group_actions[0].choices
        docs = {"help_main.txt": parser.format_help()}
        for name, sp in subs.items():
            docs[f"help_{name}.txt"] = sp.format_help()
        diag = subs["diagnose"]._subparsers._group_actions[0].choices
        for name, sp in diag.items():
            docs[f"help_diagnose_{name.replace('-', '_')}.txt"] = sp.format_help()
        return docs

    def test_help_matches_golden_files(self, monkeypatch):
        monkeypatch.setenv("COLUMNS", "80")
        monkeypatch.setenv("LINES", "24")
        for fname, text in self._docs().items():
            with open(os.path.join(GOLDEN, fname)) as f:
                assert text == f.read(), f"{fname} drifted"

    def test_help_flag_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for sub in ("datagen", "fit", "sample", "diagnose", "replicate"):
            assert sub in out

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "dgpcompose.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert proc.stdout.startswith("usage: dgp-compose")


class TestDatagen:
    def test_identity_three_rows(self, tmp_path, capsys):
        spec = tmp_path / "d.json"
        spec.write_text('{"generator": "identity", "n": 3}')
        out = tmp_path / "d.csv"
        assert main(["datagen", "--spec", str(spec), "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert '"command": "datagen"' in stdout
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config_hash=") and "seed=0" in lines[0]
        assert lines[1] == "x,y"
        assert lines[2:] == ["-1.0,-1.0", "0.0,0.0", "1.0,1.0"]

    def test_idempotent(self, tmp_path):
        spec = tmp_path / "d.json"
        spec.write_text('{"generator": "sine", "n": 8, "noise": 0.2, "seed": 4}')
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["datagen", "--spec", str(spec), "--out", str(out1)]) == 0
        assert main(["datagen", "--spec", str(spec), "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_bad_spec_key_exits_one(self, tmp_path, capsys):
        spec = tmp_path / "d.json"
        spec.write_text('{"generator": "sine", "n": 8, "amplitude": 2}')
        assert main(["datagen", "--spec", str(spec), "--out", "x.csv"]) == 1
        assert "amplitude" in capsys.readouterr().err


class TestDiagnose:
    def test_counterexample_printed_values(self, capsys):
        code = main(["diagnose", "counterexample", "--gamma", "1", "--u", "0",
                     "--mu-star", "1", "--sigma-star2", "0"])
        assert code == 0
        out = capsys.readouterr().out
        fields = dict(line.split("=", 1) for line in out.splitlines()
                      if "=" in line and not line.lstrip().startswith('"'))
        np.testing.assert_allclose(float(fields["derivative"]), -0.36788, atol=1e-5)
        assert fields["flag"] == "true"

    def test_scan_csv_and_stdout(self, tmp_path, capsys):
        out = tmp_path / "scan.csv"
        code = main(["diagnose", "scan", "--m-values", "2,4", "--grid-n", "101",
                     "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "M=2 min_curvature=" in stdout
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "m,min_curvature,argmin_x"
        assert len(lines) == 4

    def test_noisy_input_prior_layer(self, capsys):
        code = main(["diagnose", "noisy-input", "--x", "2.0",
                     "--input-var", "0.01"])
        assert code == 0
        out = capsys.readouterr().out
        fields = dict(line.split("=", 1) for line in out.splitlines()
                      if "=" in line and not line.lstrip().startswith('"'))
        base = float(fields["base_variance"])
        corr = float(fields["corrected_variance"])
        curv = float(fields["variance_curvature"])
        np.testing.assert_allclose(corr, base + 0.01 * curv, rtol=1e-4)

    def test_layer_variance_on_run(self, fitted_run, capsys):
        _, _, run_dir = fitted_run
        code = main(["diagnose", "layer-variance", "--run", str(run_dir),
                     "--samples", "60"])
        assert code == 0
        out = capsys.readouterr().out
        assert "layer=1 variance=" in out and "layer=2 variance=" in out


class TestFitSample:
    def test_fit_artifacts_and_echo(self, fitted_run, capsys):
        root, cfg_path, run_dir = fitted_run
        for name in ("data.csv", "trace.csv", "state.json"):
            assert (run_dir / name).exists()
        run2 = root / "run_again"
        assert main(["fit", "--config", str(cfg_path), "--out", str(run2)]) == 0
        stdout = capsys.readouterr().out
        assert '"command": "fit"' in stdout and "final_elbo=" in stdout
        for name in ("data.csv", "trace.csv", "state.json"):
            assert (run_dir / name).read_bytes() == (run2 / name).read_bytes()

    def test_fit_rejects_grid_configs(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        write_config(cfg_path, tmp_path / "rep", schemes=["meanfield", "chained"])
        assert main(["fit", "--config", str(cfg_path), "--out",
                     str(tmp_path / "r")]) == 1
        assert "replicate" in capsys.readouterr().err

    def test_sample_deterministic_csv(self, fitted_run, tmp_path):
        _, _, run_dir = fitted_run
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["sample", "--run", str(run_dir), "--grid=-1:1:7",
                "--samples", "5", "--seed", "3"]
        assert main(argv + ["--out", str(a)]) == 0
        assert main(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        lines = a.read_text().splitlines()
        assert lines[1] == "layer,sample,x,value"
        assert len(lines) == 2 + 2 * 5 * 7

    def test_sample_different_seed_differs(self, fitted_run, tmp_path):
        _, _, run_dir = fitted_run
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        base = ["sample", "--run", str(run_dir), "--grid=-1:1:7", "--samples", "5"]
        assert main(base + ["--seed", "3", "--out", str(a)]) == 0
        assert main(base + ["--seed", "4", "--out", str(b)]) == 0
        assert a.read_bytes() != b.read_bytes()


class TestReplicateCommand:
    def test_smoke(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        write_config(cfg_path, tmp_path / "rep")
        assert main(["replicate", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "status=ok" in out and "aggregate scheme=meanfield" in out
        assert (tmp_path / "rep" / "report.json").exists()


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["datagen", "--spec", "s.json", "--out", "o.csv",
                     "--bogus"]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert main(["fit", "--config", "c.json"]) == 1

    def test_no_subcommand(self, capsys):
        assert main([]) == 1

    def test_malformed_json_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"dataset": }')
        assert main(["fit", "--config", str(bad), "--out", "r"]) == 1
        err = capsys.readouterr().err
        assert "line" in err and "column" in err

    def test_missing_file_is_io_failure(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "nope.json"),
                     "--out", "r"]) == 3
        assert main(["sample", "--run", str(tmp_path / "norun"),
                     "--grid=0:1:3", "--out", "s.csv"]) == 3

    def test_numerical_failure_is_exit_two(self, tmp_path):
        cfg = {
            "dataset": {"generator": "sine", "n": 10},
            "model": {"L": 1, "M": 4, "sigma2": 1e-8},
            "scheme": "meanfield",
            "training": {"iters": 200, "lr": 80.0, "n_samples": 4,
                         "eval_every": 50, "eval_samples": 20},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["fit", "--config", str(path),
                     "--out", str(tmp_path / "r")]) == 2

    @pytest.mark.parametrize("grid", ["1:-1:5", "a:b:c", "0:1", "0:1:1"])
    def test_bad_grid_values(self, grid, fitted_run):
        _, _, run_dir = fitted_run
        assert main(["sample", "--run", str(run_dir), f"--grid={grid}",
                     "--out", "s.csv"]) == 1

    def test_threads_env_honoured(self, tmp_path, monkeypatch, capsys):
        cfg_path = tmp_path / "c.json"
        write_config(cfg_path, tmp_path / "rep", iters=2)
        monkeypatch.setenv("DGP_COMPOSE_THREADS", "2")
        assert main(["fit", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r")]) == 0
        assert '"threads": 2' in capsys.readouterr().out
        monkeypatch.setenv("DGP_COMPOSE_THREADS", "zero")
        assert main(["fit", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r2")]) == 1

    def test_threads_flag_beats_env(self, tmp_path, monkeypatch, capsys):
        cfg_path = tmp_path / "c.json"
        write_config(cfg_path, tmp_path / "rep", iters=2)
        monkeypatch.setenv("DGP_COMPOSE_THREADS", "4")
        assert main(["--threads", "1", "fit", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r")]) == 0
        assert '"threads": 1' in capsys.readouterr().out
