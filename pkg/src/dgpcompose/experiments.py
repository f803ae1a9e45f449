"""Dataset generators and the multi-scheme, multi-seed replication harness.

`run_replication` fits every configured scheme for every seed, probes the
per-layer variances at x = 0, and writes per-run artifacts plus a JSON
report.  Artifacts are a pure function of the config: every CSV carries a
`# config_hash=... seed=...` header line and no wall-clock content, so
re-running a config byte-reproduces the output directory.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, load_config
from .diagnostics import layer_variance_probe
from .gp_layers import DgpModelSpec, GPLayerSpec, MeanFnSpec
from .math_core import InvalidInputError, KernelSpec, NotPsdError, RngHandle
from .training import TrainingDivergedError, fit
from ._scheme_common import ElboEvaluationError
from .vi_chained_inducing import ChainedInducingState, sample_layers_chained
from .vi_joint_gaussian import ChainGaussianState, sample_layers_jg
from .vi_meanfield import MeanFieldState, sample_layers_mf


class DatasetFileError(OSError):
    """A from_file dataset could not be parsed."""


@dataclass(frozen=True)
class DatasetSpec:
    """A synthetic 1-d regression task, or a CSV file to load one from."""

    generator: str
    n: int = 40
    lo: float = -1.0
    hi: float = 1.0
    noise: float = 0.0
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.generator not in ("sine", "identity", "chirp", "from_file"):
            raise InvalidInputError(f"unknown generator {self.generator!r}")
        if self.generator == "from_file":
            if not self.path:
                raise InvalidInputError("from_file dataset needs a path")
            return
        if self.n < 2:
            raise InvalidInputError("dataset needs at least 2 points")
        if not self.lo < self.hi:
            raise InvalidInputError("dataset range must satisfy lo < hi")
        if self.noise < 0:
            raise InvalidInputError("dataset noise must be non-negative")

    @staticmethod
    def from_dict(block):
        """Build from a resolved config dataset block."""
        if block["generator"] == "from_file":
            return DatasetSpec(generator="from_file", path=block["path"])
        lo, hi = block["range"]
        return DatasetSpec(generator=block["generator"], n=block["n"], lo=lo,
                           hi=hi, noise=block["noise"], seed=block["seed"])


def _read_xy_csv(path):
    xs, ys = [], []
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            for row in csv.reader(f):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                if len(row) < 2:
                    raise DatasetFileError(f"{path}: expected x,y columns, got {row!r}")
                try:
                    xs.append(float(row[0]))
                    ys.append(float(row[1]))
                except ValueError:
                    if not xs:  # header row
                        continue
                    raise DatasetFileError(
                        f"{path}: non-numeric row {row!r}"
                    ) from None
    except OSError as e:
        if isinstance(e, DatasetFileError):
            raise
        raise DatasetFileError(f"{path}: {e}") from e
    if len(xs) < 2:
        raise DatasetFileError(f"{path}: fewer than 2 data rows")
    return np.asarray(xs), np.asarray(ys)


def generate_dataset(spec):
    """Return (x, y) for the spec; x is linearly spaced for the generators."""
    if spec.generator == "from_file":
        x, y = _read_xy_csv(spec.path)
    else:
        x = np.linspace(spec.lo, spec.hi, spec.n)
        if spec.generator == "sine":
            y = np.sin(2.0 * np.pi * x)
        elif spec.generator == "identity":
            y = x.copy()
        else:  # chirp: frequency grows with x
            y = np.sin(2.0 * np.pi * 2.0 * (x + 1.5 * x * x))
        if spec.noise > 0:
            gen = RngHandle(spec.seed).generator()
            y = y + spec.noise * gen.standard_normal(x.shape[0])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("dataset contains non-finite values")
    return x, y


# ---------------------------------------------------------------------------
# scheme-generic sampling and state serialisation
# ---------------------------------------------------------------------------


def sample_layers(model, scheme, state, inputs, n_samples, rng):
    """Dispatch per-layer sampling to the scheme that produced `state`."""
    if scheme == "meanfield":
        return sample_layers_mf(model, state, inputs, n_samples, rng)
    if scheme == "joint_gaussian":
        return sample_layers_jg(model, state, inputs, n_samples, rng, mode="analytic")
    if scheme == "joint_gaussian_sampled":
        return sample_layers_jg(model, state, inputs, n_samples, rng, mode="sampled")
    if scheme == "chained":
        return sample_layers_chained(model, state, inputs, n_samples, rng)
    raise InvalidInputError(f"unknown scheme {scheme!r}")


def model_to_jsonable(model):
    layers = []
    for layer in model.layers:
        k = layer.kernel
        entry = {
            "family": k.family, "variance": k.variance, "lengthscale": k.lengthscale,
            "mean_fn": layer.mean_fn.variant, "z": [float(v) for v in layer.z],
        }
        if k.period is not None:
            entry["period"] = k.period
        layers.append(entry)
    return {"layers": layers, "sigma2": model.likelihood_noise}


def model_from_jsonable(d):
    layers = []
    for entry in d["layers"]:
        spec = KernelSpec(entry["family"], entry["variance"], entry["lengthscale"],
                          entry.get("period"))
        layers.append(GPLayerSpec(kernel=spec, mean_fn=MeanFnSpec(entry["mean_fn"]),
                                  z=np.asarray(entry["z"])))
    return DgpModelSpec(layers=layers, likelihood_noise=d["sigma2"])


def state_to_jsonable(scheme, state):
    if scheme == "meanfield":
        return {"m": state.m.tolist(), "C": state.C.tolist()}
    if scheme in ("joint_gaussian", "joint_gaussian_sampled"):
        return {"m1": state.m1.tolist(), "C11": state.C11.tolist(),
                "A": state.A.tolist(), "b": state.b.tolist(), "C": state.C.tolist()}
    if scheme == "chained":
        return {"m": state.m.tolist(), "C": state.C.tolist()}
    raise InvalidInputError(f"unknown scheme {scheme!r}")


def state_from_jsonable(scheme, d):
    arr = lambda k: np.asarray(d[k], dtype=float)
    if scheme == "meanfield":
        return MeanFieldState(arr("m"), arr("C"))
    if scheme in ("joint_gaussian", "joint_gaussian_sampled"):
        return ChainGaussianState(arr("m1"), arr("C11"), arr("A"), arr("b"), arr("C"))
    if scheme == "chained":
        return ChainedInducingState(arr("m"), arr("C"))
    raise InvalidInputError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------


def _header(cfg_hash, seed):
    return f"# config_hash={cfg_hash} seed={seed}"


def write_table_csv(path, cfg_hash, seed, colnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(_header(cfg_hash, seed) + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(colnames)
        w.writerows(rows)


def write_dataset_csv(path, x, y, cfg_hash, seed):
    write_table_csv(path, cfg_hash, seed, ("x", "y"),
               [(float(a), float(b)) for a, b in zip(x, y)])


def write_trace_csv(path, trace, cfg_hash, seed):
    cols = ("iteration", "elbo_train", "elbo_eval", "expectation_term",
            "kl_term", "grad_norm")
    rows = [tuple(row[c] for c in cols) for row in trace]
    write_table_csv(path, cfg_hash, seed, cols, rows)


def write_samples_csv(path, sample_set, cfg_hash, seed):
    """Tall layout: one row per (layer, sample, input) triple."""
    rows = []
    L, S, N = sample_set.draws.shape
    for layer in range(L):
        for s in range(S):
            for i in range(N):
                rows.append((layer + 1, s, float(sample_set.inputs[i]),
                             float(sample_set.draws[layer, s, i])))
    write_table_csv(path, cfg_hash, seed, ("layer", "sample", "x", "value"), rows)


def write_state_json(path, scheme, model, state, cfg_hash, seed, final):
    doc = {
        "config_hash": cfg_hash,
        "seed": seed,
        "scheme": scheme,
        "model": model_to_jsonable(model),
        "state": state_to_jsonable(scheme, state),
        "final": {"elbo": final.value, "expectation_term": final.expectation_term,
                  "kl_term": final.kl_term},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_run_dir(run_dir):
    """Load (scheme, model, state, meta) from a fit/replicate output dir."""
    path = os.path.join(run_dir, "state.json")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    model = model_from_jsonable(doc["model"])
    state = state_from_jsonable(doc["scheme"], doc["state"])
    return doc["scheme"], model, state, doc


# ---------------------------------------------------------------------------
# replication
# ---------------------------------------------------------------------------


@dataclass
class RunRow:
    scheme: str
    seed: int
    config_hash: str
    status: str = "ok"
    final_elbo: float | None = None
    expectation_term: float | None = None
    kl_term: float | None = None
    layer_variances: list = field(default_factory=list)
    layer_variance_ses: list = field(default_factory=list)
    train_rmse: float | None = None
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    def to_jsonable(self):
        return {
            "scheme": self.scheme, "seed": self.seed,
            "config_hash": self.config_hash, "status": self.status,
            "final_elbo": self.final_elbo,
            "expectation_term": self.expectation_term, "kl_term": self.kl_term,
            "layer_variances_at_0": list(self.layer_variances),
            "layer_variance_ses": list(self.layer_variance_ses),
            "train_rmse": self.train_rmse, "artifacts": dict(self.artifacts),
            "error": self.error,
        }


@dataclass
class ReplicationReport:
    config_hash: str
    out_dir: str
    rows: list
    aggregates: dict
    report_path: str


def _aggregate(rows):
    """Per-scheme means and (ddof=1) standard deviations over the ok seeds."""
    out = {}
    for scheme in sorted({r.scheme for r in rows}):
        ok = [r for r in rows if r.scheme == scheme and r.status == "ok"]
        entry = {"n_ok": len(ok),
                 "n_failed": sum(1 for r in rows
                                 if r.scheme == scheme and r.status != "ok")}
        if ok:
            elbos = np.array([r.final_elbo for r in ok])
            rmses = np.array([r.train_rmse for r in ok])
            lvars = np.array([r.layer_variances for r in ok])
            entry["final_elbo_mean"] = float(np.mean(elbos))
            entry["final_elbo_std"] = (
                float(np.std(elbos, ddof=1)) if len(ok) > 1 else None)
            entry["train_rmse_mean"] = float(np.mean(rmses))
            entry["layer_variance_mean"] = [float(v) for v in lvars.mean(axis=0)]
            entry["layer_variance_std"] = (
                [float(v) for v in lvars.std(axis=0, ddof=1)]
                if len(ok) > 1 else None)
        out[scheme] = entry
    return out


_RUN_FAILURES = (TrainingDivergedError, ElboEvaluationError, NotPsdError,
                 np.linalg.LinAlgError, FloatingPointError)


def replicate_one(model, scheme, x, y, training, seed, *, threads=1,
                  probe_samples=1000, plot_samples=25, grid_n=101,
                  grid_range=None):
    """Fit one (scheme, seed) cell and compute its report quantities.

    Returns (fit_result, probe_grid_sample_set, probes, rmse) where probes
    is a list of per-layer (variance, se) at x = 0.
    """
    result = fit(
        model, scheme, x, y,
        iters=training["iters"], lr=training["lr"],
        n_samples=training["n_samples"], seed=seed,
        refresh_noise_every=training["refresh_noise_every"],
        eval_every=training["eval_every"], eval_samples=training["eval_samples"],
        train_hypers=training["train_hypers"], train_noise=training["train_noise"],
        n_inner=training["n_inner"], transition_scale=training["transition_scale"],
        threads=threads, h_scale=training["h_scale"],
    )
    base = RngHandle(seed)
    probe_set = sample_layers(result.model, scheme, result.state,
                              np.array([0.0]), probe_samples,
                              base.derive(500_000_001))
    probes = [layer_variance_probe(probe_set, layer, 0)
              for layer in range(model.L)]
    lo, hi = grid_range if grid_range is not None else (x.min(), x.max())
    grid_set = sample_layers(result.model, scheme, result.state,
                             np.linspace(lo, hi, grid_n), plot_samples,
                             base.derive(500_000_002))
    fit_set = sample_layers(result.model, scheme, result.state, x,
                            probe_samples, base.derive(500_000_003))
    pred = fit_set.draws[-1].mean(axis=0)
    rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
    return result, grid_set, probes, rmse


def run_replication(config, *, threads=1, probe_samples=1000, plot_samples=25,
                    grid_n=101):
    """Fit scheme x seed per the config; write artifacts and report.json.

    `config` is a path to a JSON config or an already-loaded RunConfig.
    Each (scheme, seed) run is independent; failures are recorded in the
    report (with the trace written when one exists) and never abort the
    remaining runs.  Runs execute sequentially so artifacts stay ordered;
    `threads` fans out the per-step gradient probes inside each fit.
    """
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    h = cfg.config_hash
    spec = DatasetSpec.from_dict(cfg.dataset)
    x, y = generate_dataset(spec)
    model = cfg.model(data_range=(float(x.min()), float(x.max())))
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    write_dataset_csv(os.path.join(out_dir, "data.csv"), x, y, h, spec.seed)

    rows = []
    for scheme in cfg.schemes:
        for seed in cfg.seeds:
            row = RunRow(scheme=scheme, seed=seed, config_hash=h)
            tag = f"{scheme}_seed{seed}"
            try:
                result, grid_set, probes, rmse = replicate_one(
                    model, scheme, x, y, cfg.training, seed, threads=threads,
                    probe_samples=probe_samples, plot_samples=plot_samples,
                    grid_n=grid_n,
                )
            except _RUN_FAILURES as e:
                row.status = "failed"
                row.error = f"{type(e).__name__}: {e}"
                trace = getattr(e, "trace", None)
                if trace:
                    name = f"trace_{tag}.csv"
                    write_trace_csv(os.path.join(out_dir, name), trace, h, seed)
                    row.artifacts["trace"] = name
                rows.append(row)
                continue
            names = {"trace": f"trace_{tag}.csv", "samples": f"samples_{tag}.csv",
                     "state": f"state_{tag}.json"}
            write_trace_csv(os.path.join(out_dir, names["trace"]),
                            result.trace, h, seed)
            write_samples_csv(os.path.join(out_dir, names["samples"]),
                              grid_set, h, seed)
            write_state_json(os.path.join(out_dir, names["state"]), scheme,
                             result.model, result.state, h, seed, result.final)
            row.final_elbo = float(result.final.value)
            row.expectation_term = float(result.final.expectation_term)
            row.kl_term = float(result.final.kl_term)
            row.layer_variances = [float(p.variance) for p in probes]
            row.layer_variance_ses = [float(p.se) for p in probes]
            row.train_rmse = rmse
            row.artifacts = names
            rows.append(row)

    aggregates = _aggregate(rows)
    report = {
        "config_hash": h,
        "config": cfg.resolved,
        "rows": [r.to_jsonable() for r in rows],
        "aggregates": aggregates,
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return ReplicationReport(config_hash=h, out_dir=out_dir, rows=rows,
                             aggregates=aggregates, report_path=report_path)
