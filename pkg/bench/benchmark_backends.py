"""Times the four ELBO evaluators on the NumPy and compiled backends.

Run from the repository root after an editable install:

    python3 bench/benchmark_backends.py
    python3 bench/benchmark_backends.py --n 80 --m 16 --samples 50 --repeat 30
"""

import argparse
import time

import numpy as np

from dgpcompose import _core_py
from dgpcompose._backend import available_backends
from dgpcompose._scheme_common import model_pack
from dgpcompose.gp_layers import DgpModelSpec, GPLayerSpec, default_mean_fns
from dgpcompose.math_core import KernelSpec


def build_calls(n, m, layers, samples, inner, seed):
    z = np.linspace(-1.0, 1.0, m)
    means = default_mean_fns(layers)
    model = DgpModelSpec(
        layers=tuple(
            GPLayerSpec(kernel=KernelSpec("se", 1.0, 0.8), mean_fn=means[ell], z=z)
            for ell in range(layers)
        ),
        likelihood_noise=0.01,
    )
    pack = model_pack(model)
    gen = np.random.default_rng(seed)
    x = np.linspace(-1.0, 1.0, n)
    y = np.sin(2.0 * np.pi * x)

    mf_m = gen.normal(scale=0.3, size=(layers, m))
    mf_C = np.stack([np.eye(m) * 0.3 for _ in range(layers)])
    eps = gen.standard_normal((samples, layers, n))

    m1 = gen.normal(scale=0.3, size=m)
    C11 = 0.3 * np.eye(m)
    A = 0.2 * gen.standard_normal((layers - 1, m, m))
    b = gen.normal(scale=0.3, size=(layers - 1, m))
    Cc = np.stack([0.3 * np.eye(m) for _ in range(max(layers - 1, 1))])[: layers - 1]
    u_eps = gen.standard_normal((samples, layers, m))
    f_eps = gen.standard_normal((samples, inner, layers, n))

    fz_eps = gen.standard_normal((samples, layers, m))
    retry_eps = gen.standard_normal((samples, layers, m))
    ch_f_eps = gen.standard_normal((samples, layers, n))

    s2 = model.likelihood_noise
    return {
        "mf_elbo": (*pack, mf_m, mf_C, x, y, s2, eps),
        "jg_elbo_analytic": (*pack, m1, C11, A, b, Cc, x, y, s2, eps),
        "jg_elbo_sampled": (*pack, m1, C11, A, b, Cc, x, y, s2, u_eps, f_eps),
        "chained_elbo": (
            *pack[:5], pack[5][0], mf_m, mf_C, x, y, s2,
            fz_eps, retry_eps, ch_f_eps, 1e-4,
        ),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=40, help="data points")
    ap.add_argument("--m", type=int, default=10, help="inducing points per layer")
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--samples", type=int, default=10, help="MC samples")
    ap.add_argument("--inner", type=int, default=1, help="inner samples (sampled JG)")
    ap.add_argument("--repeat", type=int, default=20, help="timed repetitions")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if "cython" not in available_backends():
        raise SystemExit("compiled backend unavailable; reinstall with Cython present")
    from dgpcompose import _core_cy

    calls = build_calls(args.n, args.m, args.layers, args.samples, args.inner,
                        args.seed)
    print(f"N={args.n} M={args.m} L={args.layers} S={args.samples} "
          f"inner={args.inner} (best of {args.repeat})")
    print(f"{'evaluator':<18} {'python':>12} {'cython':>12} {'speedup':>8}")
    for name, call in calls.items():
        t_py = time_call(getattr(_core_py, name), call, args.repeat)
        t_cy = time_call(getattr(_core_cy, name), call, args.repeat)
        print(f"{name:<18} {t_py * 1e3:>10.3f}ms {t_cy * 1e3:>10.3f}ms "
              f"{t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
