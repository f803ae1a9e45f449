"""Command-line interface for data generation, fitting, sampling,
diagnostics and replication.

Exit codes: 0 success, 1 config/validation error, 2 numerical failure,
3 I/O failure.  Every subcommand prints its resolved configuration as a
JSON block before any results; numeric results on stdout use 6
significant digits while CSV artifacts keep full precision.  The
`--threads` flag (or the DGP_COMPOSE_THREADS variable) caps the internal
thread pool used for gradient probes.
"""

import argparse
import json
import os
import sys

import numpy as np

from ._scheme_common import ElboEvaluationError
from .config import ConfigError, config_hash, load_config, validate_dataset
from .diagnostics import (
    counterexample_eval,
    layer_variance_probe,
    noisy_input_expansion,
    second_derivative_scan,
)
from .experiments import (
    DatasetSpec,
    generate_dataset,
    load_run_dir,
    run_replication,
    sample_layers,
    write_dataset_csv,
    write_samples_csv,
    write_state_json,
    write_table_csv,
    write_trace_csv,
)
from .gp_layers import GPLayerSpec, MeanFnSpec
from .math_core import InvalidInputError, KernelSpec, NotPsdError, RngHandle
from .training import TrainingDivergedError
from .training import fit as fit_scheme


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors map to exit code 1."""

    def error(self, message):
        raise CliError(1, f"{self.prog}: error: {message}")


def _fmt(v):
    return f"{float(v):.6g}"


def _echo(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected a:b:n, got {text!r}")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b:n numbers, got {text!r}")
    if not lo < hi or n < 2:
        raise argparse.ArgumentTypeError("grid needs a < b and n >= 2")
    return lo, hi, n


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DGP_COMPOSE_THREADS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ConfigError(f"DGP_COMPOSE_THREADS must be an integer, got {env!r}")
        if v < 1:
            raise ConfigError(f"DGP_COMPOSE_THREADS must be >= 1, got {v}")
        return v
    return 1


def _load_json(path, what):
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {what} {path}: {e}") from e


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_datagen(args):
    block = validate_dataset(_load_json(args.spec, "dataset spec"))
    h = config_hash(block)
    _echo({"command": "datagen", "config_hash": h, "dataset": block,
           "out": args.out})
    x, y = generate_dataset(DatasetSpec.from_dict(block))
    write_dataset_csv(args.out, x, y, h, block.get("seed", 0))
    print(f"wrote {x.shape[0]} rows to {args.out}")
    return 0


def _training_kwargs(training, threads):
    return dict(
        iters=training["iters"], lr=training["lr"],
        n_samples=training["n_samples"],
        refresh_noise_every=training["refresh_noise_every"],
        eval_every=training["eval_every"], eval_samples=training["eval_samples"],
        train_hypers=training["train_hypers"], train_noise=training["train_noise"],
        n_inner=training["n_inner"], transition_scale=training["transition_scale"],
        h_scale=training["h_scale"], threads=threads,
    )


def cmd_fit(args):
    cfg = load_config(args.config)
    if len(cfg.schemes) != 1 or len(cfg.seeds) != 1:
        raise CliError(1, "fit runs a single (scheme, seed) pair; "
                          "use `replicate` for scheme or seed grids")
    scheme, seed = cfg.schemes[0], cfg.seeds[0]
    threads = _threads(args)
    _echo({"command": "fit", "config_hash": cfg.config_hash,
           "config": cfg.resolved, "out": args.out, "threads": threads})
    x, y = generate_dataset(DatasetSpec.from_dict(cfg.dataset))
    model = cfg.model(data_range=(float(x.min()), float(x.max())))
    result = fit_scheme(model, scheme, x, y, seed=seed,
                        **_training_kwargs(cfg.training, threads))
    os.makedirs(args.out, exist_ok=True)
    h = cfg.config_hash
    write_dataset_csv(os.path.join(args.out, "data.csv"), x, y, h,
                      cfg.dataset.get("seed", 0))
    write_trace_csv(os.path.join(args.out, "trace.csv"), result.trace, h, seed)
    write_state_json(os.path.join(args.out, "state.json"), scheme,
                     result.model, result.state, h, seed, result.final)
    print(f"scheme={scheme} seed={seed} final_elbo={_fmt(result.final.value)} "
          f"expectation_term={_fmt(result.final.expectation_term)} "
          f"kl_term={_fmt(result.final.kl_term)}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_sample(args):
    scheme, model, state, doc = load_run_dir(args.run)
    lo, hi, n = args.grid
    _echo({"command": "sample", "run": args.run, "scheme": scheme,
           "grid": [lo, hi, n], "samples": args.samples, "seed": args.seed,
           "out": args.out, "config_hash": doc["config_hash"]})
    sset = sample_layers(model, scheme, state, np.linspace(lo, hi, n),
                         args.samples, RngHandle(args.seed))
    write_samples_csv(args.out, sset, doc["config_hash"], args.seed)
    for layer in range(sset.n_layers):
        v = float(np.mean(sset.layer_marginal_variance(layer)))
        print(f"layer={layer + 1} mean_variance={_fmt(v)}")
    print(f"wrote {sset.n_layers * args.samples * n} rows to {args.out}")
    return 0


def cmd_diagnose_counterexample(args):
    res = counterexample_eval(args.gamma, args.u, args.mu_star, args.sigma_star2)
    _echo({"command": "diagnose counterexample", "gamma": args.gamma,
           "u": args.u, "mu_star": args.mu_star, "sigma_star2": args.sigma_star2})
    print(f"expected_variance={_fmt(res.expected_variance)}")
    print(f"derivative={_fmt(res.derivative)}")
    print(f"derivative_at_zero={_fmt(res.derivative_at_zero)}")
    print(f"flag={'true' if res.shrinks else 'false'}")
    return 0


def cmd_diagnose_scan(args):
    _echo({"command": "diagnose scan", "gamma": args.gamma,
           "m_values": list(args.m_values), "grid_n": args.grid_n,
           "out": args.out})
    res = second_derivative_scan(m_values=args.m_values, gamma=args.gamma,
                                 grid_n=args.grid_n)
    for m, mn, am in zip(res.m_values, res.minima, res.argmin):
        print(f"M={m} min_curvature={_fmt(mn)} argmin_x={_fmt(am)}")
    if args.out:
        h = config_hash({"diagnose": "scan", "gamma": args.gamma,
                         "m_values": list(args.m_values), "grid_n": args.grid_n})
        rows = [(int(m), float(mn), float(am))
                for m, mn, am in zip(res.m_values, res.minima, res.argmin)]
        write_table_csv(args.out, h, 0, ("m", "min_curvature", "argmin_x"), rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_diagnose_noisy_input(args):
    _echo({"command": "diagnose noisy-input", "gamma": args.gamma,
           "variance": args.variance, "m": args.m,
           "z_range": [args.z_lo, args.z_hi], "x": args.x,
           "input_var": args.input_var})
    if not args.z_lo < args.z_hi:
        raise ConfigError("--z-lo must be below --z-hi")
    layer = GPLayerSpec(
        kernel=KernelSpec("se", args.variance, args.gamma),
        mean_fn=MeanFnSpec("zero"),
        z=np.linspace(args.z_lo, args.z_hi, args.m),
    )
    # deterministic inducing values (all zero): the layer is the plain
    # prior-conditional, the setting the collapse analysis studies
    res = noisy_input_expansion(layer, np.zeros(args.m),
                                np.zeros((args.m, args.m)), args.x,
                                args.input_var)
    print(f"base_variance={_fmt(res.base_variance)}")
    print(f"mean_slope={_fmt(res.mean_slope)}")
    print(f"variance_curvature={_fmt(res.variance_curvature)}")
    print(f"corrected_variance={_fmt(res.corrected_variance)}")
    return 0


def cmd_diagnose_layer_variance(args):
    scheme, model, state, doc = load_run_dir(args.run)
    _echo({"command": "diagnose layer-variance", "run": args.run,
           "scheme": scheme, "x0": args.x0, "samples": args.samples,
           "seed": args.seed, "config_hash": doc["config_hash"]})
    sset = sample_layers(model, scheme, state, np.array([args.x0]),
                         args.samples, RngHandle(args.seed))
    for layer in range(sset.n_layers):
        probe = layer_variance_probe(sset, layer, 0)
        print(f"layer={layer + 1} variance={_fmt(probe.variance)} "
              f"se={_fmt(probe.se)}")
    return 0


def cmd_replicate(args):
    cfg = load_config(args.config)
    threads = _threads(args)
    _echo({"command": "replicate", "config_hash": cfg.config_hash,
           "config": cfg.resolved, "threads": threads})
    rep = run_replication(cfg, threads=threads)
    for row in rep.rows:
        if row.status == "ok":
            print(f"scheme={row.scheme} seed={row.seed} status=ok "
                  f"final_elbo={_fmt(row.final_elbo)} "
                  f"train_rmse={_fmt(row.train_rmse)}")
        else:
            print(f"scheme={row.scheme} seed={row.seed} status=failed "
                  f"error={row.error}")
    for scheme, agg in rep.aggregates.items():
        if agg["n_ok"]:
            std = agg["final_elbo_std"]
            print(f"aggregate scheme={scheme} n_ok={agg['n_ok']} "
                  f"elbo_mean={_fmt(agg['final_elbo_mean'])} "
                  f"elbo_std={_fmt(std) if std is not None else 'n/a'}")
        else:
            print(f"aggregate scheme={scheme} n_ok=0")
    print(f"report at {rep.report_path}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(
        prog="dgp-compose",
        description="Deep GP inference: fit variational schemes, sample "
                    "layers, run collapse diagnostics and replications.",
    )
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="thread pool size for gradient probes "
                             "(default: DGP_COMPOSE_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{datagen,fit,sample,diagnose,replicate}")

    p = sub.add_parser("datagen", help="generate a dataset CSV from a spec")
    p.add_argument("--spec", required=True, help="dataset spec JSON file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("fit", help="fit one scheme on one seed")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="draw layer samples from a fitted run")
    p.add_argument("--run", required=True, help="run directory from `fit`")
    p.add_argument("--grid", required=True, type=_grid, metavar="A:B:N",
                   help="evaluation grid: N points from A to B "
                        "(write --grid=-1:1:50 when A is negative)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--samples", type=_positive_int, default=25,
                   help="number of sample paths (default 25)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diagnose", help="collapse diagnostics")
    dsub = p.add_subparsers(dest="diag_command", required=True,
                            metavar="{counterexample,scan,noisy-input,layer-variance}")

    d = dsub.add_parser("counterexample",
                        help="single-inducing-point shrinkage closed form")
    d.add_argument("--gamma", type=float, required=True, help="kernel lengthscale")
    d.add_argument("--u", type=float, required=True, help="inducing location")
    d.add_argument("--mu-star", type=float, required=True, help="input mean")
    d.add_argument("--sigma-star2", type=float, default=0.0,
                   help="input variance (default 0)")
    d.set_defaults(func=cmd_diagnose_counterexample)

    d = dsub.add_parser("scan",
                        help="minimum variance curvature per inducing count")
    d.add_argument("--gamma", type=float, default=1.0, help="kernel lengthscale")
    d.add_argument("--m-values", type=_int_list, default=(2, 4, 8, 16, 32),
                   metavar="M1,M2,...", help="inducing counts (default 2,4,8,16,32)")
    d.add_argument("--grid-n", type=_positive_int, default=601,
                   help="evaluation grid size (default 601)")
    d.add_argument("--out", default=None, help="optional output CSV path")
    d.set_defaults(func=cmd_diagnose_scan)

    d = dsub.add_parser("noisy-input",
                        help="input-noise variance correction for a "
                             "prior-conditional layer")
    d.add_argument("--gamma", type=float, default=1.0, help="kernel lengthscale")
    d.add_argument("--variance", type=float, default=1.0, help="kernel variance")
    d.add_argument("--m", type=_positive_int, default=4, help="inducing count")
    d.add_argument("--z-lo", type=float, default=-3.0, help="inducing range low")
    d.add_argument("--z-hi", type=float, default=3.0, help="inducing range high")
    d.add_argument("--x", type=float, required=True, help="evaluation input")
    d.add_argument("--input-var", type=float, required=True,
                   help="input noise variance")
    d.set_defaults(func=cmd_diagnose_noisy_input)

    d = dsub.add_parser("layer-variance",
                        help="per-layer sample variance of a fitted run")
    d.add_argument("--run", required=True, help="run directory from `fit`")
    d.add_argument("--x0", type=float, default=0.0, help="probe input (default 0)")
    d.add_argument("--samples", type=_positive_int, default=2000,
                   help="sample count (default 2000)")
    d.add_argument("--seed", type=int, default=0, help="sampling seed")
    d.set_defaults(func=cmd_diagnose_layer_variance)

    p = sub.add_parser("replicate", help="run the scheme x seed grid of a config")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.set_defaults(func=cmd_replicate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(e.message, file=sys.stderr)
        return e.code
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else int(e.code)
    except (ConfigError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, ElboEvaluationError, NotPsdError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
