"""Dataset generators, artifact writing and the replication harness."""

import json
import math
import os

import numpy as np
import pytest
from modelzoo import se_model

from dgpcompose.config import RunConfig, resolve_config
from dgpcompose.experiments import (
    DatasetFileError,
    DatasetSpec,
    generate_dataset,
    load_run_dir,
    model_from_jsonable,
    model_to_jsonable,
    run_replication,
    sample_layers,
    state_from_jsonable,
    state_to_jsonable,
    write_dataset_csv,
)
from dgpcompose.math_core import InvalidInputError, RngHandle
from dgpcompose.vi_chained_inducing import init_chained
from dgpcompose.vi_joint_gaussian import init_joint_gaussian
from dgpcompose.vi_meanfield import init_meanfield


class TestGenerators:
    def test_identity_three_points(self):
        x, y = generate_dataset(DatasetSpec("identity", n=3))
        np.testing.assert_array_equal(x, [-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(y, x)

    def test_sine_hand_values(self):
        x, y = generate_dataset(DatasetSpec("sine", n=9))
        # grid hits 0 and 0.25 exactly
        np.testing.assert_allclose(y[x == 0.0], [0.0], atol=1e-15)
        np.testing.assert_allclose(y[x == 0.25], [1.0], rtol=1e-12)

    def test_chirp_hand_value(self):
        # sin(2*pi*2*(x + 1.5 x^2)) at x = 0.5 is sin(3.5 pi) = -1
        x, y = generate_dataset(DatasetSpec("chirp", n=5, lo=0.0, hi=1.0))
        np.testing.assert_allclose(y[x == 0.5], [-1.0], rtol=1e-12)
        assert np.all(np.abs(y) <= 1.0 + 1e-12)

    def test_noise_determinism(self):
        spec = DatasetSpec("sine", n=20, noise=0.3, seed=7)
        _, y1 = generate_dataset(spec)
        _, y2 = generate_dataset(spec)
        np.testing.assert_array_equal(y1, y2)
        _, y3 = generate_dataset(DatasetSpec("sine", n=20, noise=0.3, seed=8))
        assert not np.array_equal(y1, y3)

    def test_noiseless_is_exact(self):
        spec = DatasetSpec("sine", n=20)
        _, y1 = generate_dataset(spec)
        np.testing.assert_array_equal(y1, np.sin(2 * np.pi * np.linspace(-1, 1, 20)))

    @pytest.mark.parametrize("kwargs", [
        dict(generator="nope", n=5),
        dict(generator="sine", n=1),
        dict(generator="sine", n=5, lo=1.0, hi=-1.0),
        dict(generator="sine", n=5, noise=-1.0),
        dict(generator="from_file"),
    ])
    def test_spec_validation(self, kwargs):
        with pytest.raises(InvalidInputError):
            DatasetSpec(**kwargs)

    def test_from_file_roundtrip(self, tmp_path):
        path = tmp_path / "d.csv"
        x = np.linspace(0, 1, 5)
        write_dataset_csv(path, x, np.sin(x), "abc123def456", 3)
        spec = DatasetSpec("from_file", path=str(path))
        x2, y2 = generate_dataset(spec)
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(y2, np.sin(x))

    def test_from_file_errors(self, tmp_path):
        with pytest.raises(DatasetFileError):
            generate_dataset(DatasetSpec("from_file", path=str(tmp_path / "no.csv")))
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y\n0.0,1.0\n0.5,oops\n")
        with pytest.raises(DatasetFileError):
            generate_dataset(DatasetSpec("from_file", path=str(bad)))
        short = tmp_path / "short.csv"
        short.write_text("x,y\n0.0,1.0\n")
        with pytest.raises(DatasetFileError):
            generate_dataset(DatasetSpec("from_file", path=str(short)))


class TestSerde:
    def _model(self):
        return se_model(L=2, M=3, noise=1e-3, lengthscale=0.8)

    def test_model_roundtrip(self):
        model = self._model()
        doc = json.loads(json.dumps(model_to_jsonable(model)))
        back = model_from_jsonable(doc)
        assert back.L == model.L
        assert back.likelihood_noise == model.likelihood_noise
        for a, b in zip(back.layers, model.layers):
            assert a.kernel == b.kernel
            assert a.mean_fn.variant == b.mean_fn.variant
            np.testing.assert_array_equal(a.z, b.z)

    @pytest.mark.parametrize("scheme", [
        "meanfield", "joint_gaussian", "joint_gaussian_sampled", "chained"])
    def test_state_roundtrip_and_sampling(self, scheme):
        model = self._model()
        rng = RngHandle(5)
        if scheme == "meanfield":
            state = init_meanfield(model)
        elif scheme == "chained":
            state = init_chained(model)
        else:
            state = init_joint_gaussian(model, transition_scale=0.2,
                                        rng=rng.derive(1))
        doc = json.loads(json.dumps(state_to_jsonable(scheme, state)))
        back = state_from_jsonable(scheme, doc)
        grid = np.linspace(-1, 1, 7)
        s1 = sample_layers(model, scheme, state, grid, 5, RngHandle(9))
        s2 = sample_layers(model, scheme, back, grid, 5, RngHandle(9))
        np.testing.assert_array_equal(s1.draws, s2.draws)
        assert s1.draws.shape == (2, 5, 7)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(InvalidInputError):
            state_to_jsonable("gibbs", None)
        with pytest.raises(InvalidInputError):
            sample_layers(self._model(), "gibbs", None, np.zeros(2), 1, RngHandle(0))


def tiny_config(out_dir, schemes=("meanfield",), seeds=(0,)):
    return RunConfig(resolve_config({
        "dataset": {"generator": "sine", "n": 10},
        "model": {"L": 2, "M": 4, "sigma2": 1e-2},
        "scheme": list(schemes),
        "training": {"iters": 4, "n_samples": 3, "seed": list(seeds),
                     "eval_every": 2, "eval_samples": 30},
        "outputs": {"dir": str(out_dir)},
    }))


def read_all_bytes(root):
    out = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as f:
            out[name] = f.read()
    return out


class TestRunReplication:
    def test_smoke_artifacts_and_report(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        rep = run_replication(cfg, probe_samples=40, plot_samples=3, grid_n=11)
        assert len(rep.rows) == 1
        row = rep.rows[0]
        assert row.status == "ok"
        assert row.seed == 0 and row.config_hash == cfg.config_hash
        assert len(row.layer_variances) == 2
        assert row.train_rmse is not None and row.train_rmse >= 0
        out = rep.out_dir
        csvs = [n for n in os.listdir(out) if n.endswith(".csv")]
        assert sorted(csvs) == ["data.csv", "samples_meanfield_seed0.csv",
                                "trace_meanfield_seed0.csv"]
        for name in csvs:
            with open(os.path.join(out, name)) as f:
                first = f.readline().strip()
            assert first.startswith(f"# config_hash={cfg.config_hash} seed=")
        with open(rep.report_path) as f:
            doc = json.load(f)
        assert doc["config_hash"] == cfg.config_hash
        assert doc["rows"][0]["status"] == "ok"
        assert doc["aggregates"]["meanfield"]["n_ok"] == 1
        assert doc["aggregates"]["meanfield"]["final_elbo_std"] is None

    def test_trace_csv_columns(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        rep = run_replication(cfg, probe_samples=40, plot_samples=3, grid_n=11)
        path = os.path.join(rep.out_dir, "trace_meanfield_seed0.csv")
        lines = open(path).read().splitlines()
        assert lines[1] == ("iteration,elbo_train,elbo_eval,expectation_term,"
                            "kl_term,grad_norm")
        assert len(lines) > 2  # at least one eval row
        first = lines[2].split(",")
        assert int(first[0]) == 0 and math.isfinite(float(first[1]))

    def test_rerun_byte_reproduces(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        rep = run_replication(cfg, probe_samples=40, plot_samples=3, grid_n=11)
        before = read_all_bytes(rep.out_dir)
        rep2 = run_replication(cfg, probe_samples=40, plot_samples=3, grid_n=11)
        after = read_all_bytes(rep2.out_dir)
        assert before == after

    def test_state_reload_reproduces_draws(self, tmp_path):
        cfg = tiny_config(tmp_path / "out")
        rep = run_replication(cfg, probe_samples=40, plot_samples=3, grid_n=11)
        src = os.path.join(rep.out_dir, "state_meanfield_seed0.json")
        dst = os.path.join(rep.out_dir, "state.json")
        os.replace(src, dst)
        scheme, model, state, doc = load_run_dir(rep.out_dir)
        assert scheme == "meanfield" and doc["seed"] == 0
        grid = np.linspace(-1, 1, 5)
        s = sample_layers(model, scheme, state, grid, 4, RngHandle(1))
        assert np.all(np.isfinite(s.draws))

    def test_multi_scheme_seed_grid_and_aggregates(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", schemes=("meanfield", "chained"),
                          seeds=(0, 1))
        rep = run_replication(cfg, probe_samples=40, plot_samples=2, grid_n=7)
        assert [(r.scheme, r.seed) for r in rep.rows] == [
            ("meanfield", 0), ("meanfield", 1), ("chained", 0), ("chained", 1)]
        agg = rep.aggregates
        assert agg["meanfield"]["n_ok"] == 2
        assert agg["chained"]["final_elbo_std"] is not None
        assert len(agg["chained"]["layer_variance_mean"]) == 2

    def test_failure_is_recorded_not_raised(self, tmp_path):
        cfg = RunConfig(resolve_config({
            "dataset": {"generator": "sine", "n": 10},
            "model": {"L": 1, "M": 4, "sigma2": 1e-8},
            "scheme": ["meanfield", "chained"],
            "training": {"iters": 200, "lr": 80.0, "n_samples": 4, "seed": 0,
                         "eval_every": 50, "eval_samples": 20},
            "outputs": {"dir": str(tmp_path / "out")},
        }))
        rep = run_replication(cfg, probe_samples=40, plot_samples=2, grid_n=7)
        failed = [r for r in rep.rows if r.status == "failed"]
        assert failed, "expected at least one diverging run"
        assert all(r.error for r in failed)
        with open(rep.report_path) as f:
            doc = json.load(f)
        statuses = {(r["scheme"], r["seed"]): r["status"] for r in doc["rows"]}
        assert len(statuses) == 2
        for scheme in rep.aggregates:
            agg = rep.aggregates[scheme]
            assert agg["n_ok"] + agg["n_failed"] == 1
